"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation on a tensor that requires a gradient returns a new tensor
holding a reference to its parents and a closure computing the adjoints.
``backward`` linearises that graph into a tape (reverse topological order)
and replays it once.

Broadcasting is restricted to the trailing-dimension rule: the shape of the
smaller operand must equal a suffix of the shape of the larger one.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

# tanh-approximation GELU constants
GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_A = 0.044715

_state = threading.local()

# Test-only fault hook: names of ops whose input gradients are doubled.
_FAULTY_OPS: set[str] = set()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return reduce(self, "sum", axis)

    def mean(self, axis=None):
        return reduce(self, "mean", axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return Tensor._wrap(arr)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op; record it on the graph if needed.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor._wrap(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

def _check_dims(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: need one or more positive dimensions")
    return shape


def create(shape, fill: str = "zero", *, value: float = 0.0, mean: float = 0.0, std: float = 1.0,
           seed: int | None = None, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Allocate a tensor.

    ``fill`` is one of ``zero``, ``one``, ``constant`` (uses ``value``) or
    ``normal`` (seeded draw from N(mean, std^2)).
    """
    shape = _check_dims(shape)
    if fill == "zero":
        arr = np.zeros(shape, dtype=dtype)
    elif fill == "one":
        arr = np.ones(shape, dtype=dtype)
    elif fill == "constant":
        arr = np.full(shape, value, dtype=dtype)
    elif fill == "normal":
        rng = np.random.default_rng(seed)
        arr = (mean + std * rng.standard_normal(shape)).astype(dtype)
    else:
        raise ValueError(f"unknown fill {fill!r}")
    t = Tensor._wrap(arr)
    t.requires_grad = requires_grad
    return t


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return create(shape, "zero", dtype=dtype, requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return create(shape, "one", dtype=dtype, requires_grad=requires_grad)


def randn(shape, mean=0.0, std=1.0, seed=None, dtype=np.float64, requires_grad=False) -> Tensor:
    return create(shape, "normal", mean=mean, std=std, seed=seed, dtype=dtype,
                  requires_grad=requires_grad)


# --------------------------------------------------------------------------
# elementwise arithmetic with trailing-dimension broadcasting
# --------------------------------------------------------------------------

def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if _is_suffix(b, a):
        return a
    if _is_suffix(a, b):
        return b
    raise ShapeError(f"shapes {a} and {b} are not trailing-dimension broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else g


def _binary(a, b, op: str) -> Tensor:
    # python scalars adopt the tensor operand's precision
    ref = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    dtype = ref.dtype if ref is not None else None
    a = a if isinstance(a, Tensor) else as_tensor(a, dtype=dtype)
    b = b if isinstance(b, Tensor) else as_tensor(b, dtype=dtype)
    _broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    if op == "add":
        out = x + y

        def bw(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)
    elif op == "sub":
        out = x - y

        def bw(g):
            return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)
    elif op == "mul":
        out = x * y

        def bw(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)
    elif op == "div":
        out = x / y

        def bw(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return make_result(out, (a, b), bw, op)


def elementwise(a, b, op: str) -> Tensor:
    """``op`` in {add, sub, mul, div}; ``b`` may broadcast over leading dims of ``a``."""
    return _binary(a, b, op)


def add(a, b) -> Tensor:
    return _binary(a, b, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, "div")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes of ``a`` and ``b`` must match exactly, or ``b`` may be
    a plain matrix shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = x @ y

    def bw(g):
        ga = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


# --------------------------------------------------------------------------
# pointwise nonlinearities
# --------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # maximum keeps NaN visible so a poisoned input surfaces in the loss
    return make_result(np.maximum(x.data, 0).astype(x.dtype), (x,),
                       lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715."""
    x = as_tensor(x)
    v = x.data
    inner = GELU_C * (v + GELU_A * v ** 3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * v ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * dinner),)

    return make_result(out, (x,), bw, "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.data
    return make_result(np.log(v), (x,), lambda g: (g / v,), "log")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out ** 2),), "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x: Tensor, op: str = "sum", axis=None) -> Tensor:
    """Sum or mean over ``axis`` (int, tuple, or None for all)."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    total = x.data.sum(axis=axes)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out = total / count if op == "mean" else total
    out = np.asarray(out, dtype=x.dtype)
    scale = 1.0 / count if op == "mean" else 1.0
    shape = x.shape

    def bw(g):
        g = np.asarray(g)
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape).astype(x.dtype),)

    return make_result(out, (x,), bw, op)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    in_shape = x.shape
    return make_result(out, (x,), lambda g: (g.reshape(in_shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),),
                       "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    out = x.data[idx]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] += g
        return (full,)

    return make_result(np.array(out, copy=True), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Repeat ``x`` over new leading dimensions (trailing-dimension rule)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if not _is_suffix(x.shape, shape):
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    out = np.broadcast_to(x.data, shape).copy()
    return make_result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def pad2d(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Zero-pad the two spatial axes of a B x H x W x C tensor."""
    x = as_tensor(x)
    (t, b), (l, r) = pad_h, pad_w
    if t == b == l == r == 0:
        return x
    out = np.pad(x.data, ((0, 0), (t, b), (l, r), (0, 0)))
    H, W = x.shape[1], x.shape[2]
    return make_result(out, (x,), lambda g: (g[:, t:t + H, l:l + W, :],), "pad")


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Recorded ops reachable from ``root`` in topological order (root last)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return [n for n in order if n._backward is not None]


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        if node.op in _FAULTY_OPS:
            parent_grads = tuple(None if pg is None else 2.0 * pg for pg in parent_grads)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1e-8, |a| + |n|) over components."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                 indices: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data`` (perturbed in place)."""
    flat = x.data.reshape(-1)
    num = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size) if indices is None else indices:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
    return num.reshape(x.shape)


def analytic_grads(f: Callable[[], Tensor], xs: Sequence[Tensor]) -> list[np.ndarray]:
    flags = [x.requires_grad for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    loss = f()
    backward(loss)
    out = [np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64) for x in xs]
    for x, flag in zip(xs, flags):
        x.grad = None
        x.requires_grad = flag
    return out


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is called with no arguments and must close over ``x`` (a tensor or
    a list of tensors). Returns the worst component over all of them.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    analytic = analytic_grads(f, xs)
    worst = 0.0
    for xi, a in zip(xs, analytic):
        worst = max(worst, relative_error(a, numeric_grad(f, xi, eps)))
    return worst
