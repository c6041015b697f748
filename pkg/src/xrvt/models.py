"""Toy classifiers: a VGG-style CNN, a residual CNN, and a small ViT.

Parameter names are dot paths and are a pure function of the ModelSpec, e.g.::

    cnn     stages.0.conv0.kernel, stages.0.conv0.bias, ..., head.w, head.b
    resnet  stem.kernel, stages.1.proj.kernel, stages.0.block0.conv1.kernel, ...
    vit     patch.proj, patch.cls, patch.pos, encoder.0.attn.wq, ..., norm.gamma, head.w
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    LayerParams,
    conv2d,
    dense,
    factorized_conv,
    flatten,
    layernorm,
    maxpool2d,
    multi_head_attention,
    patch_embed,
    residual,
)
from .tensor import Tensor, as_tensor, gelu, relu

KINDS = ("cnn", "resnet", "vit")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelSpec:
    kind: str = "cnn"
    height: int = 32
    width: int = 32
    channels: int = 3
    num_classes: int = 4
    # vit
    patch: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_dim: int = 128
    # cnn / resnet
    widths: tuple[int, ...] = (8, 16)
    blocks: tuple[int, ...] = (1, 1)
    factorized: bool = False
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def num_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch) + 1

    def validate(self) -> "ModelSpec":
        if self.kind not in KINDS:
            raise ConfigError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if min(self.height, self.width, self.channels) < 1:
            raise ConfigError("input dimensions must be positive")
        if self.kind == "vit":
            if self.patch < 1 or self.height % self.patch or self.width % self.patch:
                raise ConfigError(f"patch {self.patch} must divide {self.height}x{self.width}")
            if self.heads < 1 or self.dim % self.heads:
                raise ConfigError(f"dim {self.dim} must be divisible by heads {self.heads}")
            if self.depth < 0 or self.mlp_dim < 1:
                raise ConfigError("depth must be >= 0 and mlp_dim >= 1")
        else:
            if not self.widths or len(self.widths) != len(self.blocks):
                raise ConfigError("widths and blocks must be non-empty and of equal length")
            if min(self.widths) < 1 or min(self.blocks) < (1 if self.kind == "cnn" else 0):
                raise ConfigError("widths must be positive; cnn stages need at least one conv")
            scale = 2 ** len(self.widths)
            if self.height % scale or self.width % scale:
                raise ConfigError(f"{len(self.widths)} pooling stages need input dims divisible by {scale}")
        return self

    # key=value text form used by checkpoints and config files
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelSpec":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown model field {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        values = {}
        for line in text.splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
        return cls.from_mapping(values)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("bool", bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if "tuple" in str(typ):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


@dataclass
class ModelState:
    spec: ModelSpec
    params: LayerParams
    metadata: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# parameter layout
# --------------------------------------------------------------------------

def _conv_entries(prefix, cin, cout, factorized):
    if factorized:
        return [
            (f"{prefix}.u", (3, 1, cin, cout), "weight", 3 * cin, 3 * cout),
            (f"{prefix}.v", (1, 3, cout, cout), "weight", 3 * cout, 3 * cout),
            (f"{prefix}.bias", (cout,), "zero", 0, 0),
        ]
    return [
        (f"{prefix}.kernel", (3, 3, cin, cout), "weight", 9 * cin, 9 * cout),
        (f"{prefix}.bias", (cout,), "zero", 0, 0),
    ]


def _flat_features(spec: ModelSpec) -> int:
    s = 2 ** len(spec.widths)
    return (spec.height // s) * (spec.width // s) * spec.widths[-1]


def param_layout(spec: ModelSpec) -> list[tuple]:
    """(name, shape, init, fan_in, fan_out) for every parameter, in build order."""
    entries: list[tuple] = []
    C = spec.num_classes
    if spec.kind == "cnn":
        cin = spec.channels
        for s, (w, nb) in enumerate(zip(spec.widths, spec.blocks)):
            for j in range(nb):
                entries += _conv_entries(f"stages.{s}.conv{j}", cin, w, spec.factorized)
                cin = w
        feat = _flat_features(spec)
    elif spec.kind == "resnet":
        entries += _conv_entries("stem", spec.channels, spec.widths[0], False)
        for s, (w, nb) in enumerate(zip(spec.widths, spec.blocks)):
            if s > 0:
                entries += _conv_entries(f"stages.{s}.proj", spec.widths[s - 1], w, False)
            for j in range(nb):
                entries += _conv_entries(f"stages.{s}.block{j}.conv1", w, w, False)
                entries += _conv_entries(f"stages.{s}.block{j}.conv2", w, w, False)
        feat = _flat_features(spec)
    else:
        d, m = spec.dim, spec.mlp_dim
        flat = spec.patch * spec.patch * spec.channels
        entries += [
            ("patch.proj", (flat, d), "weight", flat, d),
            ("patch.cls", (d,), "embed", 0, 0),
            ("patch.pos", (spec.num_tokens, d), "embed", 0, 0),
        ]
        for i in range(spec.depth):
            p = f"encoder.{i}"
            entries += [
                (f"{p}.ln1.gamma", (d,), "one", 0, 0),
                (f"{p}.ln1.beta", (d,), "zero", 0, 0),
                (f"{p}.attn.wq", (d, d), "weight", d, d),
                (f"{p}.attn.wk", (d, d), "weight", d, d),
                (f"{p}.attn.wv", (d, d), "weight", d, d),
                (f"{p}.attn.wo", (d, d), "weight", d, d),
                (f"{p}.ln2.gamma", (d,), "one", 0, 0),
                (f"{p}.ln2.beta", (d,), "zero", 0, 0),
                (f"{p}.mlp.fc1.w", (d, m), "weight", d, m),
                (f"{p}.mlp.fc1.b", (m,), "zero", 0, 0),
                (f"{p}.mlp.fc2.w", (m, d), "weight", m, d),
                (f"{p}.mlp.fc2.b", (d,), "zero", 0, 0),
            ]
        entries += [("norm.gamma", (d,), "one", 0, 0), ("norm.beta", (d,), "zero", 0, 0)]
        feat = d
    entries += [("head.w", (feat, C), "weight", feat, C), ("head.b", (C,), "zero", 0, 0)]
    return entries


def build(spec: ModelSpec) -> ModelState:
    """Seeded initialisation.

    Weights: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases and
    layer-norm shifts zero; layer-norm scales one; class token and positions
    N(0, 0.02^2).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dtype = spec.np_dtype
    params = LayerParams()
    for name, shape, init, fan_in, fan_out in param_layout(spec):
        if init == "weight":
            a = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-a, a, size=shape)
        elif init == "embed":
            arr = 0.02 * rng.standard_normal(shape)
        elif init == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params.add(name, Tensor._wrap(arr.astype(dtype)))
    return ModelState(spec=spec, params=params, metadata={"seed": spec.seed, "epoch": 0})


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def _conv_block(P, prefix, x, factorized=False):
    if factorized:
        y = factorized_conv(x, P[f"{prefix}.u"], P[f"{prefix}.v"])
    else:
        y = conv2d(x, P[f"{prefix}.kernel"], stride=1, padding=1)
    return y + P[f"{prefix}.bias"]


def _forward_cnn(spec, P, x):
    for s, nb in enumerate(spec.blocks):
        for j in range(nb):
            x = relu(_conv_block(P, f"stages.{s}.conv{j}", x, spec.factorized))
        x = maxpool2d(x, 2, 2)
    return x


def _forward_resnet(spec, P, x):
    x = relu(_conv_block(P, "stem", x))
    for s, nb in enumerate(spec.blocks):
        if s > 0:
            x = maxpool2d(x, 2, 2)
            x = relu(_conv_block(P, f"stages.{s}.proj", x))
        for j in range(nb):
            pre = f"stages.{s}.block{j}"
            x = residual(x, lambda t, pre=pre: _conv_block(
                P, f"{pre}.conv2", relu(_conv_block(P, f"{pre}.conv1", t))))
    return maxpool2d(x, 2, 2)


def _forward_vit(spec, P, x):
    h = patch_embed(x, spec.patch, P["patch.proj"], P["patch.pos"], P["patch.cls"])
    for i in range(spec.depth):
        p = f"encoder.{i}"
        h = residual(h, lambda t, p=p: multi_head_attention(
            layernorm(t, P[f"{p}.ln1.gamma"], P[f"{p}.ln1.beta"]),
            P[f"{p}.attn.wq"], P[f"{p}.attn.wk"], P[f"{p}.attn.wv"], P[f"{p}.attn.wo"],
            spec.heads))
        h = residual(h, lambda t, p=p: dense(
            gelu(dense(layernorm(t, P[f"{p}.ln2.gamma"], P[f"{p}.ln2.beta"]),
                       P[f"{p}.mlp.fc1.w"], P[f"{p}.mlp.fc1.b"])),
            P[f"{p}.mlp.fc2.w"], P[f"{p}.mlp.fc2.b"]))
    h = layernorm(h, P["norm.gamma"], P["norm.beta"])
    return h[:, 0, :]


def features(model: ModelState, batch) -> Tensor:
    """Representation fed to the classification head."""
    spec, P = model.spec, model.params
    x = as_tensor(batch)
    if x.dtype != spec.np_dtype:
        x = Tensor._wrap(x.data.astype(spec.np_dtype))
    expected = (spec.height, spec.width, spec.channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"batch shape {x.shape} does not match model input (B, {expected[0]}, "
                         f"{expected[1]}, {expected[2]})")
    if spec.kind == "cnn":
        return flatten(_forward_cnn(spec, P, x))
    if spec.kind == "resnet":
        return flatten(_forward_resnet(spec, P, x))
    return _forward_vit(spec, P, x)


def forward(model: ModelState, batch) -> Tensor:
    """Logits, B x num_classes."""
    return dense(features(model, batch), model.params["head.w"], model.params["head.b"])


def predict(model: ModelState, batch, batch_size: int = 64) -> np.ndarray:
    """Arg-max class per image, evaluated without recording a graph."""
    from .tensor import no_grad

    batch = np.asarray(batch)
    out = []
    with no_grad():
        for i in range(0, len(batch), batch_size):
            out.append(forward(model, batch[i:i + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------------------
# freezing
# --------------------------------------------------------------------------

def freeze(model: ModelState, pattern: str) -> ModelState:
    """Mark every parameter whose name starts with ``pattern`` as frozen."""
    hits = [n for n in model.params if n.startswith(pattern)]
    if not hits:
        raise ConfigError(f"freeze pattern {pattern!r} matches no parameter")
    for n in hits:
        model.params.set_trainable(n, False)
    return model


def freeze_except(model: ModelState, keep_prefix: str = "head.") -> ModelState:
    """Freeze everything but the parameters under ``keep_prefix``."""
    keep = [n for n in model.params if n.startswith(keep_prefix)]
    if not keep:
        raise ConfigError(f"prefix {keep_prefix!r} matches no parameter")
    for n in model.params:
        model.params.set_trainable(n, n.startswith(keep_prefix))
    return model


def unfreeze(model: ModelState, pattern: str = "") -> ModelState:
    for n in model.params:
        if n.startswith(pattern):
            model.params.set_trainable(n, True)
    return model
