"""Hot numeric loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports and ``XRVT_DISABLE_NUMBA`` is unset
(or ``0``).  Both paths accumulate convolution and warp results in the same
order, so they agree bit-for-bit on those; gradients and distances agree to
rounding.
"""
from __future__ import annotations

import contextlib
import math
import os

import numpy as np

ENV_FLAG = "XRVT_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() in ("1", "true", "yes", "on")


_use_numba = HAVE_NUMBA and not _env_disabled()


def get_backend() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> None:
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _use_numba = name == "numba"


@contextlib.contextmanager
def backend(name: str):
    """Temporarily switch the kernel backend."""
    previous = get_backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# --------------------------------------------------------------------------
# convolution (cross-correlation, channel-last, input already padded)
# --------------------------------------------------------------------------

def _conv_out_dims(H, W, kh, kw, sh, sw):
    return (H - kh) // sh + 1, (W - kw) // sw + 1


@_njit
def _conv2d_forward_nb(xp, k, sh, sw, out):
    B, H, W, C = xp.shape
    kh, kw, _, Co = k.shape
    OH, OW = out.shape[1], out.shape[2]
    for b in range(B):
        for oh in range(OH):
            for ow in range(OW):
                # taps in (i, j, c) order per output, like the numpy twin
                for i in range(kh):
                    for j in range(kw):
                        for c in range(C):
                            v = xp[b, oh * sh + i, ow * sw + j, c]
                            for co in range(Co):
                                out[b, oh, ow, co] += v * k[i, j, c, co]
    return out


def _conv2d_forward_np(xp, k, sh, sw, out):
    kh, kw, C, _ = k.shape
    OH, OW = out.shape[1], out.shape[2]
    for i in range(kh):
        for j in range(kw):
            window = xp[:, i:i + sh * (OH - 1) + 1:sh, j:j + sw * (OW - 1) + 1:sw, :]
            for c in range(C):
                out += window[..., c, None] * k[i, j, c]
    return out


def conv2d_forward(xp: np.ndarray, k: np.ndarray, sh: int, sw: int) -> np.ndarray:
    B, H, W, _ = xp.shape
    kh, kw, _, Co = k.shape
    OH, OW = _conv_out_dims(H, W, kh, kw, sh, sw)
    out = np.zeros((B, OH, OW, Co), dtype=np.result_type(xp, k))
    fn = _conv2d_forward_nb if _use_numba else _conv2d_forward_np
    return fn(np.ascontiguousarray(xp, out.dtype), np.ascontiguousarray(k, out.dtype), sh, sw, out)


def _conv2d_backward_np(xp, k, g, sh, sw, dxp, dk):
    kh, kw, C, _ = k.shape
    OH, OW = g.shape[1], g.shape[2]
    for i in range(kh):
        for j in range(kw):
            rs = slice(i, i + sh * (OH - 1) + 1, sh)
            cs = slice(j, j + sw * (OW - 1) + 1, sw)
            window = xp[:, rs, cs, :]
            dk[i, j] += np.tensordot(window, g, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, rs, cs, :] += g @ k[i, j].T
    return dxp, dk


def conv2d_backward(xp: np.ndarray, k: np.ndarray, g: np.ndarray, sh: int, sw: int):
    """Return (d loss/d padded input, d loss/d kernel)."""
    dtype = np.result_type(xp, k, g)
    dxp = np.zeros(xp.shape, dtype=dtype)
    dk = np.zeros(k.shape, dtype=dtype)
    # GEMM-bound: numpy's BLAS call beats a numba loop here, so both backends share it
    return _conv2d_backward_np(np.ascontiguousarray(xp, dtype), np.ascontiguousarray(k, dtype),
              np.ascontiguousarray(g, dtype), sh, sw, dxp, dk)


# --------------------------------------------------------------------------
# max pooling; argmax stored as flat (row * W + col) index, first max wins
# --------------------------------------------------------------------------

@_njit
def _maxpool_forward_nb(x, wh, ww, sh, sw, out, arg):
    B, H, W, C = x.shape
    OH, OW = out.shape[1], out.shape[2]
    for b in range(B):
        for oh in range(OH):
            for ow in range(OW):
                for c in range(C):
                    r0 = oh * sh
                    c0 = ow * sw
                    best = x[b, r0, c0, c]
                    best_idx = r0 * W + c0
                    for i in range(wh):
                        for j in range(ww):
                            v = x[b, r0 + i, c0 + j, c]
                            if v > best:
                                best = v
                                best_idx = (r0 + i) * W + (c0 + j)
                    out[b, oh, ow, c] = best
                    arg[b, oh, ow, c] = best_idx
    return out, arg


def _maxpool_forward_np(x, wh, ww, sh, sw, out, arg):
    B, H, W, C = x.shape
    OH, OW = out.shape[1], out.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, (wh, ww), axis=(1, 2))
    win = win[:, ::sh, ::sw][:, :OH, :OW]
    flat = win.reshape(B, OH, OW, C, wh * ww)
    local = flat.argmax(axis=-1)
    out[...] = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = (np.arange(OH) * sh)[None, :, None, None] + local // ww
    cols = (np.arange(OW) * sw)[None, None, :, None] + local % ww
    arg[...] = rows * W + cols
    return out, arg


def maxpool_forward(x: np.ndarray, wh: int, ww: int, sh: int, sw: int):
    B, H, W, C = x.shape
    OH, OW = (H - wh) // sh + 1, (W - ww) // sw + 1
    out = np.empty((B, OH, OW, C), dtype=x.dtype)
    arg = np.empty((B, OH, OW, C), dtype=np.int64)
    fn = _maxpool_forward_nb if _use_numba else _maxpool_forward_np
    return fn(np.ascontiguousarray(x), wh, ww, sh, sw, out, arg)


@_njit
def _maxpool_backward_nb(g, arg, W, dx):
    B, OH, OW, C = g.shape
    for b in range(B):
        for oh in range(OH):
            for ow in range(OW):
                for c in range(C):
                    idx = arg[b, oh, ow, c]
                    dx[b, idx // W, idx % W, c] += g[b, oh, ow, c]
    return dx


def _maxpool_backward_np(g, arg, W, dx):
    B, OH, OW, C = g.shape
    bi = np.broadcast_to(np.arange(B)[:, None, None, None], g.shape)
    ci = np.broadcast_to(np.arange(C)[None, None, None, :], g.shape)
    np.add.at(dx, (bi, arg // W, arg % W, ci), g)
    return dx


def maxpool_backward(g: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    dx = np.zeros(in_shape, dtype=g.dtype)
    fn = _maxpool_backward_nb if _use_numba else _maxpool_backward_np
    return fn(np.ascontiguousarray(g), arg, in_shape[2], dx)


# --------------------------------------------------------------------------
# affine warp with bilinear sampling; out-of-range taps read `fill`
# --------------------------------------------------------------------------

@_njit
def _warp_affine_nb(img, m, t, fill, out):
    H, W, C = img.shape
    OH, OW = out.shape[0], out.shape[1]
    for r in range(OH):
        for c in range(OW):
            sr = m[0, 0] * r + m[0, 1] * c + t[0]
            sc = m[1, 0] * r + m[1, 1] * c + t[1]
            fr0 = math.floor(sr)
            fc0 = math.floor(sc)
            fr = sr - fr0
            fc = sc - fc0
            r0 = int(fr0)
            c0 = int(fc0)
            r1 = r0 + 1
            c1 = c0 + 1
            in_r0 = 0 <= r0 < H
            in_r1 = 0 <= r1 < H
            in_c0 = 0 <= c0 < W
            in_c1 = 0 <= c1 < W
            for ch in range(C):
                v00 = img[r0, c0, ch] if in_r0 and in_c0 else fill
                v01 = img[r0, c1, ch] if in_r0 and in_c1 else fill
                v10 = img[r1, c0, ch] if in_r1 and in_c0 else fill
                v11 = img[r1, c1, ch] if in_r1 and in_c1 else fill
                top = v00 + fc * (v01 - v00)
                bot = v10 + fc * (v11 - v10)
                out[r, c, ch] = top + fr * (bot - top)
    return out


def _warp_affine_np(img, m, t, fill, out):
    H, W, C = img.shape
    r = np.arange(out.shape[0], dtype=np.float64)[:, None]
    c = np.arange(out.shape[1], dtype=np.float64)[None, :]
    sr = m[0, 0] * r + m[0, 1] * c + t[0]
    sc = m[1, 0] * r + m[1, 1] * c + t[1]
    fr0 = np.floor(sr)
    fc0 = np.floor(sc)
    fr = (sr - fr0)[..., None]
    fc = (sc - fc0)[..., None]
    r0 = fr0.astype(np.int64)
    c0 = fc0.astype(np.int64)

    def tap(ri, ci):
        ok = (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
        v = img[np.clip(ri, 0, H - 1), np.clip(ci, 0, W - 1)].astype(np.float64)
        return np.where(ok[..., None], v, fill)

    v00, v01 = tap(r0, c0), tap(r0, c0 + 1)
    v10, v11 = tap(r0 + 1, c0), tap(r0 + 1, c0 + 1)
    top = v00 + fc * (v01 - v00)
    bot = v10 + fc * (v11 - v10)
    out[...] = top + fr * (bot - top)
    return out


def warp_affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray, fill: float = 0.0,
                out_shape=None) -> np.ndarray:
    """Sample ``img`` (H, W, C) at source = matrix @ (row, col) + offset.

    ``out_shape`` (rows, cols) defaults to the input size.
    """
    H, W, C = img.shape
    oh, ow = out_shape if out_shape is not None else (H, W)
    out = np.empty((oh, ow, C), dtype=img.dtype)
    m = np.ascontiguousarray(matrix, dtype=np.float64)
    t = np.ascontiguousarray(offset, dtype=np.float64)
    if _use_numba:
        return _warp_affine_nb(np.ascontiguousarray(img), m, t, float(fill), out)
    return _warp_affine_np(img, m, t, float(fill), out)


# --------------------------------------------------------------------------
# squared Euclidean distances from one query to every row
# --------------------------------------------------------------------------

@_njit
def _sq_distances_nb(X, q, out):
    N, D = X.shape
    for n in range(N):
        acc = 0.0
        for d in range(D):
            diff = X[n, d] - q[d]
            acc += diff * diff
        out[n] = acc
    return out


def _sq_distances_np(X, q, out):
    diff = X.astype(np.float64) - q.astype(np.float64)
    out[...] = np.einsum("nd,nd->n", diff, diff)
    return out


def sq_distances(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    if _use_numba:
        return _sq_distances_nb(np.ascontiguousarray(X), np.ascontiguousarray(q), out)
    return _sq_distances_np(X, q, out)
