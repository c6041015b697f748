"""Neural-network building blocks on top of :mod:`xrvt.tensor`.

Conventions:
  * images and feature maps are channel-last (B x H x W x C);
  * convolution is cross-correlation (the kernel is not flipped);
  * max-pool routes the gradient to the first maximal element in row-major
    order within each window;
  * patches are taken in row-major grid order and flattened row, column,
    channel (channel fastest).
"""
from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, ShapeError
from .tensor import (
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    make_result,
    matmul,
    pad2d,
    reshape,
    softmax,
    transpose,
)


class LayerParams:
    """Ordered name -> Tensor store with a trainable flag per name.

    Trainable parameters have ``requires_grad`` set; frozen ones do not, so no
    gradient is ever accumulated for them.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        self._trainable[name] = bool(trainable)
        tensor.requires_grad = bool(trainable)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = bool(flag)
        self._tensors[name].requires_grad = bool(flag)
        if not flag:
            self._tensors[name].grad = None

    def trainable_items(self):
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.size for n, t in self._tensors.items()
                   if self._trainable[n] or not trainable_only)


# --------------------------------------------------------------------------
# dense / convolution / pooling
# --------------------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    y = matmul(x, W)
    if b is not None:
        if as_tensor(b).shape != (W.shape[1],):
            raise ShapeError(f"dense: bias shape {b.shape} != ({W.shape[1]},)")
        y = y + b
    return y


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _padding(p) -> tuple[tuple[int, int], tuple[int, int]]:
    """int | (ph, pw) | ((top, bottom), (left, right))."""
    if isinstance(p, (tuple, list)):
        ph, pw = p
        ph = tuple(ph) if isinstance(ph, (tuple, list)) else (int(ph), int(ph))
        pw = tuple(pw) if isinstance(pw, (tuple, list)) else (int(pw), int(pw))
        return ph, pw
    return (int(p), int(p)), (int(p), int(p))


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlate B x H x W x Cin with a kh x kw x Cin x Cout kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} != kernel channels {kernel.shape[2]}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ShapeError("conv2d stride must be positive")
    ph, pw = _padding(padding)
    kh, kw = kernel.shape[:2]
    Hp, Wp = x.shape[1] + sum(ph), x.shape[2] + sum(pw)
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}")
    xp = pad2d(x, ph, pw)
    xd, kd = xp.data, kernel.data
    out = _kernels.conv2d_forward(xd, kd, sh, sw)

    def bw(g):
        dxp, dk = _kernels.conv2d_backward(xd, kd, g, sh, sw)
        return dxp, dk

    return make_result(out, (xp, kernel), bw, "conv2d")


def maxpool2d(x: Tensor, window=2, stride=None) -> Tensor:
    x = as_tensor(x)
    wh, ww = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects B x H x W x C, got {x.shape}")
    if wh > x.shape[1] or ww > x.shape[2]:
        raise ShapeError(f"pool window {wh}x{ww} exceeds input {x.shape[1]}x{x.shape[2]}")
    out, arg = _kernels.maxpool_forward(x.data, wh, ww, sh, sw)
    in_shape = x.shape
    return make_result(out, (x,), lambda g: (_kernels.maxpool_backward(g, arg, in_shape),),
                       "maxpool2d")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# --------------------------------------------------------------------------
# normalisation, attention, patches
# --------------------------------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise the last axis with the population variance, then scale/shift."""
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine params must have shape ({d},)")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), bw, "layernorm")


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         heads: int, return_weights: bool = False):
    """Self-attention over B x T x d tokens (T x d is treated as a batch of one).

    Each head attends with softmax(Q K^T / sqrt(d / heads)) V on its slice of
    the projections; heads are concatenated and mixed by ``wo``.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"embedding dim {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(matmul(x, wq))
    k = split(matmul(x, wk))
    v = split(matmul(x, wv))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    out = matmul(reshape(ctx, (B, T, d)), wo)
    if squeeze:
        out = reshape(out, (T, d))
    return (out, weights) if return_weights else out


def patchify(images: Tensor, patch: int) -> Tensor:
    """Split (B x) H x W x C into (B x) N x (P*P*C) non-overlapping patches."""
    images = as_tensor(images)
    single = images.ndim == 3
    if single:
        images = reshape(images, (1,) + images.shape)
    B, H, W, C = images.shape
    if patch < 1 or H % patch or W % patch:
        raise ShapeError(f"patch size {patch} does not divide image {H}x{W}")
    gh, gw = H // patch, W // patch
    t = reshape(images, (B, gh, patch, gw, patch, C))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    t = reshape(t, (B, gh * gw, patch * patch * C))
    return reshape(t, t.shape[1:]) if single else t


def unpatchify(patches: np.ndarray, patch: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`patchify` on raw arrays."""
    patches = np.asarray(patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    B, N, L = patches.shape
    C = L // (patch * patch)
    gh, gw = height // patch, width // patch
    t = patches.reshape(B, gh, gw, patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    t = t.reshape(B, height, width, C)
    return t[0] if single else t


def patch_embed(image: Tensor, patch: int, Wp: Tensor, pos: Tensor, cls: Tensor) -> Tensor:
    """Project patches, prepend the class token at row 0, add positions."""
    image = as_tensor(image)
    single = image.ndim == 3
    patches = patchify(image, patch)
    if single:
        patches = reshape(patches, (1,) + patches.shape)
    B, N, L = patches.shape
    Wp, pos, cls = as_tensor(Wp), as_tensor(pos), as_tensor(cls)
    d = Wp.shape[1]
    if Wp.shape[0] != L:
        raise ShapeError(f"patch projection expects {L} inputs, has {Wp.shape[0]}")
    if pos.shape != (N + 1, d) or cls.shape != (d,):
        raise ShapeError(f"positional table must be ({N + 1}, {d}) and class token ({d},)")
    tokens = matmul(patches, Wp)
    cls_rows = broadcast_to(reshape(cls, (1, d)), (B, 1, d))
    seq = concat([cls_rows, tokens], axis=1) + pos
    return reshape(seq, (N + 1, d)) if single else seq


# --------------------------------------------------------------------------
# composites and loss
# --------------------------------------------------------------------------

def residual(x: Tensor, f: Callable[[Tensor], Tensor]) -> Tensor:
    x = as_tensor(x)
    fx = f(x)
    if fx.shape != x.shape:
        raise ShapeError(f"residual branch changed shape {x.shape} -> {fx.shape}")
    return fx + x


def factorized_conv(x: Tensor, u: Tensor, v: Tensor, stride=1, padding="same") -> Tensor:
    """An n x 1 convolution followed by a 1 x n one.

    With ``padding`` p (or ``"same"`` = n // 2) the first stage pads rows by p
    and the second pads columns by p, so the pair covers the same receptive
    field as one n x n convolution with kernel sum_m u[:, 0, :, m] v[0, :, m, :].
    """
    u, v = as_tensor(u), as_tensor(v)
    n = u.shape[0]
    if u.shape[1] != 1 or v.shape[0] != 1 or v.shape[1] != n:
        raise ShapeError(f"factorized kernels must be {n}x1 and 1x{n}, got {u.shape}, {v.shape}")
    p = n // 2 if padding == "same" else int(padding)
    sh, sw = _pair(stride)
    mid = conv2d(x, u, stride=(sh, 1), padding=((p, p), (0, 0)))
    return conv2d(mid, v, stride=(1, sw), padding=((0, 0), (p, p)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeError(f"logits {logits.shape} do not match {labels.size} labels")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(B)
    loss = np.asarray(np.mean(np.log(s[:, 0]) - z[rows, labels]), dtype=logits.dtype)

    def bw(g):
        grad = e / s
        grad[rows, labels] -= 1.0
        return (grad * (g / B),)

    return make_result(loss, (logits,), bw, "cross_entropy")
