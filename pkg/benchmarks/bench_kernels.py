"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N] [--size S]

Each kernel is called once per backend before timing so JIT compilation is
excluded.  Prints best-of-N wall time per call and the speedup.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from xrvt import _kernels as K


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size, rng):
    x = rng.normal(size=(8, size + 2, size + 2, 16))
    k = rng.normal(size=(3, 3, 16, 16))
    y = K.conv2d_forward(x, k, 1, 1)
    g = rng.normal(size=y.shape)
    pool_in = rng.normal(size=(8, size, size, 16))
    _, arg = K.maxpool_forward(pool_in, 2, 2, 2, 2)
    pool_g = rng.normal(size=arg.shape)
    img = rng.uniform(size=(4 * size, 4 * size, 3))
    m = np.array([[0.96, -0.26], [0.26, 0.96]])
    t = np.array([3.0, -2.0])
    X = rng.normal(size=(447, size * size * 3))
    q = rng.normal(size=size * size * 3)
    return {
        "conv2d forward": lambda: K.conv2d_forward(x, k, 1, 1),
        "maxpool forward": lambda: K.maxpool_forward(pool_in, 2, 2, 2, 2),
        "maxpool backward": lambda: K.maxpool_backward(pool_g, arg, pool_in.shape),
        "warp affine": lambda: K.warp_affine(img, m, t),
        "sq distances": lambda: K.sq_distances(X, q),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=32, help="spatial side of the test inputs")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    table = cases(args.size, rng)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in table.items():
        times = {}
        for b in ("numpy", "numba"):
            with K.backend(b):
                fn()  # warm-up / compile
                times[b] = best_of(fn, args.repeat)
        print(f"{name:<18} {times['numpy'] * 1e3:10.3f} {times['numba'] * 1e3:10.3f} "
              f"{times['numpy'] / times['numba']:7.1f}x")


if __name__ == "__main__":
    main()
