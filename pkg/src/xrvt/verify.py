"""Self-check harness: finite-difference gradient checks and oracle equivalences.

Each check returns a :class:`Check`.  Oracles here are deliberately naive
(nested loops, explicit scans) and share no code with the paths they check.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels, layers as L, tensor as T
from .baselines import KNNClassifier, KnnConfig
from .metrics import confusion_matrix
from .models import ModelSpec, build, forward

GRAD_TOL = 1e-4
EPS = 1e-5


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return Check(name, bool(ok), detail, time.perf_counter() - t0)


def _p(rng, *shape, scale=1.0):
    return T.Tensor(scale * rng.standard_normal(shape))


def _grad(name: str, f, xs) -> Check:
    def run():
        err = T.grad_check(f, xs, EPS)
        return err <= GRAD_TOL, f"max rel err {err:.2e} (tol {GRAD_TOL:.0e})"
    return _timed(f"grad {name}", run)


# --------------------------------------------------------------------------
# gradient suite
# --------------------------------------------------------------------------

GRAD_MODEL_SPECS = {
    "cnn": ModelSpec(kind="cnn", height=8, width=8, channels=2, num_classes=3, widths=(3, 4),
                     blocks=(1, 1), seed=3),
    "cnn-factorized": ModelSpec(kind="cnn", height=8, width=8, channels=2, num_classes=3,
                                widths=(3, 4), blocks=(1, 1), factorized=True, seed=3),
    "resnet": ModelSpec(kind="resnet", height=8, width=8, channels=2, num_classes=3, widths=(3, 4),
                        blocks=(1, 1), seed=3),
    "vit": ModelSpec(kind="vit", height=8, width=8, channels=2, num_classes=3, patch=4, dim=8,
                     depth=2, heads=2, mlp_dim=16, seed=3),
}


def model_grad_check(spec: ModelSpec, seed: int = 1) -> float:
    rng = np.random.default_rng(seed)
    model = build(spec)
    x = rng.uniform(size=(2, spec.height, spec.width, spec.channels))
    y = rng.integers(0, spec.num_classes, size=2)
    params = [t for _, t in model.params.items()]
    return T.grad_check(lambda: L.cross_entropy(forward(model, x), y), params, EPS)


def gradient_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []

    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    w = _p(rng, 3, 2)
    out.append(_grad("matmul", lambda: (T.matmul(a, b) * w).sum(), [a, b]))

    e1, e2, r = _p(rng, 2, 3), _p(rng, 3), _p(rng, 2, 3)
    e3 = T.Tensor(rng.uniform(0.5, 2.0, size=3))
    out.append(_grad("elementwise", lambda: ((e1 + e2) * r + (e1 - e2) * (e1 * e2) + e1 / e3).sum(),
                     [e1, e2, e3]))

    s = _p(rng, 2, 5)
    ws = _p(rng, 2, 5)
    out.append(_grad("softmax", lambda: (T.softmax(s, axis=-1) * ws).sum(), [s]))

    g = T.Tensor(rng.uniform(-3, 3, size=(3, 4)))
    out.append(_grad("gelu", lambda: (T.gelu(g) * ws[0, :4]).sum(), [g]))
    rl = T.Tensor(rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)))
    out.append(_grad("relu", lambda: (T.relu(rl) * rl).sum(), [rl]))

    rd = _p(rng, 3, 4)
    out.append(_grad("reduce", lambda: (rd.sum(axis=0) * rd.mean(axis=1).sum()).sum() + rd.mean(), [rd]))

    x, W, bias = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    out.append(_grad("dense", lambda: (L.dense(x, W, bias) * w).sum(), [x, W, bias]))

    cx, ck = _p(rng, 2, 5, 5, 2), _p(rng, 3, 3, 2, 3)
    cw = _p(rng, 2, 3, 3, 3)
    out.append(_grad("conv2d", lambda: (L.conv2d(cx, ck, stride=2, padding=1) * cw).sum(), [cx, ck]))

    px = T.Tensor(rng.permutation(2 * 4 * 4 * 2).reshape(2, 4, 4, 2) / 7.0)
    pw = _p(rng, 2, 2, 2, 2)
    out.append(_grad("maxpool2d", lambda: (L.maxpool2d(px, 2, 2) * pw).sum(), [px]))

    lx, lg, lb = _p(rng, 2, 3, 5), _p(rng, 5), _p(rng, 5)
    lw = _p(rng, 2, 3, 5)
    out.append(_grad("layernorm", lambda: (L.layernorm(lx, lg, lb) * lw).sum(), [lx, lg, lb]))

    ax = _p(rng, 2, 3, 4)
    aws = [_p(rng, 4, 4, scale=0.5) for _ in range(4)]
    aw = _p(rng, 2, 3, 4)
    out.append(_grad("attention", lambda: (L.multi_head_attention(ax, *aws, heads=2) * aw).sum(),
                     [ax, *aws]))

    img = T.Tensor(rng.uniform(size=(4, 6, 2)))
    wp, pos, cls = _p(rng, 8, 3), _p(rng, 7, 3), _p(rng, 3)
    pe_w = _p(rng, 7, 3)
    out.append(_grad("patch_embed", lambda: (L.patch_embed(img, 2, wp, pos, cls) * pe_w).sum(),
                     [img, wp, pos, cls]))

    rx, rW, rw = _p(rng, 3, 4), _p(rng, 4, 4), _p(rng, 3, 4)
    out.append(_grad("residual", lambda: (L.residual(rx, lambda t: T.tanh(L.dense(t, rW))) * rw).sum(),
                     [rx, rW]))

    fx, fu, fv = _p(rng, 1, 5, 5, 2), _p(rng, 3, 1, 2, 3), _p(rng, 1, 3, 3, 2)
    fw = _p(rng, 1, 5, 5, 2)
    out.append(_grad("factorized_conv", lambda: (L.factorized_conv(fx, fu, fv) * fw).sum(), [fx, fu, fv]))

    logits = _p(rng, 4, 3)
    labels = rng.integers(0, 3, size=4)
    out.append(_grad("cross_entropy", lambda: L.cross_entropy(logits, labels), [logits]))

    for name, spec in GRAD_MODEL_SPECS.items():
        def run(spec=spec):
            err = model_grad_check(spec)
            return err <= GRAD_TOL, f"max rel err {err:.2e} over all parameters (tol {GRAD_TOL:.0e})"
        out.append(_timed(f"grad model {name}", run))
    return out


# --------------------------------------------------------------------------
# oracle suite
# --------------------------------------------------------------------------

def direct_conv_oracle(x, k, stride=1, pad=0):
    """Scalar nested-loop cross-correlation, accumulating taps in (i, j, c) order."""
    x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    B, H, W, C = x.shape
    kh, kw, _, Co = k.shape
    OH, OW = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((B, OH, OW, Co))
    for b in range(B):
        for oh in range(OH):
            for ow in range(OW):
                for co in range(Co):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(C):
                                acc += float(x[b, oh * stride + i, ow * stride + j, c]) * float(k[i, j, c, co])
                    out[b, oh, ow, co] = acc
    return out


def knn_oracle(train_x, train_y, q, k):
    """Scan every point, sort, vote; ties: distance-sum then label."""
    d = [(math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(row, q))), int(lab))
         for row, lab in zip(train_x, train_y)]
    d.sort()
    near = d[:min(k, len(d))]
    votes: dict[int, list[float]] = {}
    for dist, lab in near:
        votes.setdefault(lab, []).append(dist)
    return min(votes, key=lambda c: (-len(votes[c]), sum(votes[c]), c))


def oracle_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []

    def conv_exact():
        worst = 0.0
        for trial in range(6):
            H = int(rng.integers(3, 9))
            x = rng.standard_normal((1, H, H, 2))
            k = rng.standard_normal((3, 3, 2, 2))
            stride, pad = 1 + trial % 2, trial % 2
            for be in ("numba", "numpy") if _kernels.HAVE_NUMBA else ("numpy",):
                with _kernels.backend(be):
                    got = L.conv2d(T.Tensor(x), T.Tensor(k), stride=stride, padding=pad).data
                ref = direct_conv_oracle(x, k, stride, pad)
                if got.shape != ref.shape:
                    return False, f"shape {got.shape} vs {ref.shape}"
                worst = max(worst, float(np.max(np.abs(got - ref))))
        return worst == 0.0, f"max abs diff {worst:.1e} over 6 random inputs up to 8x8x2 (exact required)"
    out.append(_timed("oracle conv2d == nested-loop convolution", conv_exact))

    def factorized():
        worst = 0.0
        for _ in range(20):
            n = int(rng.choice([3, 5]))
            H = int(rng.integers(n, 9))
            x = rng.standard_normal((1, H, H + 1, 1))
            u, v = rng.standard_normal(n), rng.standard_normal(n)
            got = L.factorized_conv(T.Tensor(x), T.Tensor(u.reshape(n, 1, 1, 1)),
                                    T.Tensor(v.reshape(1, n, 1, 1))).data
            ref = direct_conv_oracle(x, np.outer(u, v).reshape(n, n, 1, 1), 1, n // 2)
            worst = max(worst, float(np.max(np.abs(got - ref))))
        return worst <= 1e-10, f"max abs diff {worst:.1e} over 20 rank-1 kernels (tol 1e-10)"
    out.append(_timed("oracle factorized_conv == full rank-1 convolution", factorized))

    def maxpool():
        for _ in range(10):
            x = rng.standard_normal((1, 8, 8, 2))
            got = L.maxpool2d(T.Tensor(x), 2, 2).data
            for r in range(4):
                for c in range(4):
                    for ch in range(2):
                        if got[0, r, c, ch] != max(x[0, 2 * r + i, 2 * c + j, ch]
                                                   for i in range(2) for j in range(2)):
                            return False, f"window ({r},{c},{ch}) differs"
        return True, "10 random 8x8x2 inputs match a brute-force window scan"
    out.append(_timed("oracle maxpool2d == window scan", maxpool))

    def knn():
        bad = 0
        for _ in range(100):
            n, d = int(rng.integers(1, 15)), int(rng.integers(1, 6))
            C = int(rng.integers(2, 5))
            X = rng.standard_normal((n, d))
            y = rng.integers(0, C, size=n)
            k = int(rng.integers(1, 8))
            q = rng.standard_normal(d)
            if KNNClassifier(KnnConfig(k)).fit(X, y, C).predict_one(q) != knn_oracle(X, y, q, k):
                bad += 1
        return bad == 0, f"{100 - bad}/100 random instances agree with scan-and-vote"
    out.append(_timed("oracle knn == brute-force scan and vote", knn))

    def confusion():
        for _ in range(50):
            C = int(rng.integers(2, 6))
            n = int(rng.integers(1, 200))
            labels = rng.integers(0, C, size=n)
            preds = rng.integers(0, C, size=n)
            cm = confusion_matrix(preds, labels, C)
            hist = [0] * C
            for lab in labels:
                hist[int(lab)] += 1
            if cm.counts.sum(axis=1).tolist() != hist:
                return False, "row sums differ from label histogram"
        return True, "row sums equal the label histogram on 50 random inputs"
    out.append(_timed("oracle confusion rows == label histogram", confusion))

    def backends():
        if not _kernels.HAVE_NUMBA:
            return True, "numba unavailable; single backend"
        x = rng.uniform(size=(12, 10, 3))
        m = np.array([[0.9, 0.2], [-0.3, 1.1]])
        t = np.array([0.7, -1.3])
        with _kernels.backend("numba"):
            a = _kernels.warp_affine(x, m, t, 0.0)
        with _kernels.backend("numpy"):
            b = _kernels.warp_affine(x, m, t, 0.0)
        return bool(np.array_equal(a, b)), "numba and numpy warps are bit-identical"
    out.append(_timed("oracle kernel backends agree", backends))
    return out


@contextlib.contextmanager
def injected_fault(op: str):
    """Double the input gradients of ``op`` (test hook)."""
    T._FAULTY_OPS.add(op)
    try:
        yield
    finally:
        T._FAULTY_OPS.discard(op)


def run_all(seed: int = 0) -> list[Check]:
    return gradient_checks(seed) + oracle_checks(seed)
