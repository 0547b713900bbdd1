"""Timing of the compiled and numpy Volterra kernels.

Run ``python benchmarks/bench_kernels.py``; prints one row per problem size.
"""

import argparse
import time

import numpy as np

from svie_mp import kernels


def _case(N, S, n, rng):
    A = np.zeros((N + 1, N + 1, S, n, n))
    B = np.zeros_like(A)
    for i in range(N + 1):
        A[i, :i] = 0.3 * rng.standard_normal((i, S, n, n))
        B[i, :i] = 0.3 * rng.standard_normal((i, S, n, n))
    psi = rng.standard_normal((N + 1, S, n))
    dW = rng.standard_normal((S, N)) * np.sqrt(1.0 / N)
    return psi, A, B, dW, 1.0 / N


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"compiled backend available: {kernels.BACKEND == 'compiled'}")
    print(f"{'N':>4} {'S':>6} {'n':>2} {'python[s]':>10} {'compiled[s]':>12} {'speedup':>8} {'max|diff|':>10}")
    for N, S, n in ((8, 256, 1), (16, 1024, 1), (32, 512, 2), (64, 256, 2), (128, 64, 1)):
        psi, A, B, dW, dt = _case(N, S, n, rng)
        tp, xp = _best(lambda: kernels.linear_volterra(psi, A, B, dW, dt, 0, backend="python"), args.repeat)
        if kernels.BACKEND == "compiled":
            tc, xc = _best(lambda: kernels.linear_volterra(psi, A, B, dW, dt, 0, backend="compiled"), args.repeat)
            diff = float(np.abs(xp - xc).max())
            print(f"{N:>4} {S:>6} {n:>2} {tp:>10.4f} {tc:>12.4f} {tp / tc:>8.2f} {diff:>10.2e}")
        else:
            print(f"{N:>4} {S:>6} {n:>2} {tp:>10.4f} {'-':>12} {'-':>8} {'-':>10}")


if __name__ == "__main__":
    main()
