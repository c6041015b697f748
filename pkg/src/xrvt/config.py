"""``key = value`` run configuration files (``#`` starts a comment)."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .models import ModelSpec
from .train import TrainConfig

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelSpec)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_ALIASES = {"lr": "learning_rate", "classes": "num_classes"}
_EXTRA_KEYS = {"image_size", "freeze", "freeze_except", "model_seed"}


def parse(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Map key -> (raw value, line number).  Later lines override earlier ones."""
    out: dict[str, tuple[str, int]] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key or not val:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key = _ALIASES.get(key, key)
        if key not in _MODEL_KEYS | _TRAIN_KEYS | _EXTRA_KEYS:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        out[key] = (val, no)
    return out


def load(path) -> dict[str, tuple[str, int]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text, str(path))


@dataclasses.dataclass
class RunSettings:
    spec: ModelSpec
    train: TrainConfig
    freeze: tuple[str, ...] = ()
    freeze_except: str | None = None


def _typed(key, val, no, source, typ):
    try:
        if typ in ("int", int):
            return int(val)
        if typ in ("float", float):
            return float(val)
        if typ in ("bool", bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if "tuple" in str(typ):
            return tuple(int(x) for x in val.split(",") if x.strip())
        return val
    except ValueError:
        raise ConfigError(f"{source}:{no}: bad value for {key}: {val!r}") from None


def settings(values: dict[str, tuple[str, int]], kind: str | None = None, seed: int | None = None,
             source: str = "<config>") -> RunSettings:
    """Build model/train settings; ``kind`` and ``seed`` (CLI flags) win over the file."""
    mtypes = {f.name: f.type for f in dataclasses.fields(ModelSpec)}
    ttypes = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    mkw, tkw = {}, {}
    freeze, freeze_except = (), None
    for key, (val, no) in values.items():
        if key == "image_size":
            size = _typed(key, val, no, source, int)
            mkw.setdefault("height", size)
            mkw.setdefault("width", size)
        elif key == "freeze":
            freeze = tuple(p.strip() for p in val.split(",") if p.strip())
        elif key == "freeze_except":
            freeze_except = val
        elif key == "model_seed":
            mkw["seed"] = _typed(key, val, no, source, int)
        elif key == "seed":
            tkw["seed"] = _typed(key, val, no, source, int)
            mkw.setdefault("seed", tkw["seed"])
        elif key in mtypes:
            mkw[key] = _typed(key, val, no, source, mtypes[key])
        else:
            tkw[key] = _typed(key, val, no, source, ttypes[key])
    for explicit in ("height", "width"):
        if explicit in values:
            mkw[explicit] = _typed(explicit, *values[explicit], source, int)
    if kind is not None:
        mkw["kind"] = kind
    if seed is not None:
        tkw["seed"] = seed
        if "model_seed" not in values:
            mkw["seed"] = seed
    try:
        spec = ModelSpec(**mkw).validate()
        train = TrainConfig(**tkw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunSettings(spec, train, freeze, freeze_except)
