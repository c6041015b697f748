"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"XRVT"                      magic
    u32                          version (1)
    u32 + bytes                  UTF-8 key=value text: model spec, then meta.* lines
    u32                          tensor count
    per tensor:
        u16 + bytes              UTF-8 name
        u8                       ndim
        u64 * ndim               dims
        u8                       dtype tag (1 = float32, 2 = float64)
        u8                       trainable flag
        raw                      little-endian data, row-major
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError
from .layers import LayerParams
from .models import ModelSpec, ModelState, param_layout
from .tensor import Tensor

MAGIC = b"XRVT"
VERSION = 1
_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def _header_text(model: ModelState) -> str:
    text = model.spec.to_text()
    for key in sorted(model.metadata):
        text += f"meta.{key}={json.dumps(model.metadata[key], sort_keys=True)}\n"
    return text


def to_bytes(model: ModelState) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = _header_text(model).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data)
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts += [struct.pack("<BB", tag, int(model.params.is_trainable(name))),
                  arr.astype(_TAGS[tag]).tobytes()]
    return b"".join(parts)


def save(model: ModelState, path) -> None:
    data = to_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                              f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> ModelState:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0: not an XRVT checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    (text_len,) = r.unpack("<I", "header length")
    text_at = r.pos
    try:
        text = r.take(text_len, "header").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"header at offset {text_at} is not valid UTF-8") from None
    spec_lines, meta = [], {}
    try:
        for line in text.splitlines():
            if line.startswith("meta."):
                key, _, val = line[5:].partition("=")
                meta[key] = json.loads(val)
            elif line.strip():
                spec_lines.append(line)
        spec = ModelSpec.from_text("\n".join(spec_lines)).validate()
    except (ValueError, TypeError) as exc:  # ConfigError and JSONDecodeError are ValueErrors
        raise FormatError(f"bad header at offset {text_at}: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    params = LayerParams()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        dims = r.unpack(f"<{ndim}Q", f"dims of {name}") if ndim else ()
        tag_at = r.pos
        tag, trainable = r.unpack("<BB", f"dtype of {name}")
        if tag not in _TAGS:
            raise FormatError(f"unknown dtype tag {tag} for {name} at offset {tag_at}")
        dt = _TAGS[tag]
        n = int(np.prod(dims)) if dims else 1
        raw = r.take(n * dt.itemsize, f"data of {name}")
        arr = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        params.add(name, Tensor._wrap(arr), trainable=bool(trainable))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")
    expected = {e[0]: tuple(e[1]) for e in param_layout(spec)}
    if sorted(expected) != sorted(params.names()):
        raise FormatError("parameter names do not match the stored model spec")
    for name, t in params.items():
        if t.shape != expected[name]:
            raise FormatError(f"{name} has shape {t.shape}, the stored spec needs {expected[name]}")
        if t.dtype != spec.np_dtype:
            raise FormatError(f"{name} is {t.dtype}, the stored spec says {spec.dtype}")
    return ModelState(spec=spec, params=params, metadata=meta)


def load(path) -> ModelState:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
