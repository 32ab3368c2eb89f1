#!/usr/bin/env python3
"""Benchmark the compiled Jacobi kernel against the pure-numpy fallback.

Times the raw rotation sweeps plus the two operations built on them
(symmetric eigendecomposition and projection construction) across matrix
sizes, and verifies that both backends produce bit-identical results.

Run:  python benchmarks/bench_kernels.py [--sizes 16,32,64,128] [--repeats 3]
"""

import argparse
import importlib
import time

import numpy as np

from ftensemble import _kernels_py
from ftensemble.linalg import JACOBI_MAX_SWEEPS, JACOBI_TOL_FACTOR, RngStream, random_symmetric

try:
    _kernels = importlib.import_module("ftensemble._kernels")
except ImportError:
    _kernels = None


def time_backend(kernel, matrices, repeats):
    best = float("inf")
    for _ in range(repeats):
        total = 0.0
        for s in matrices:
            a = np.ascontiguousarray(s.copy())
            v = np.eye(s.shape[0])
            tol = JACOBI_TOL_FACTOR * float(np.abs(a).max())
            start = time.perf_counter()
            sweeps = kernel.jacobi_sweeps(a, v, tol, JACOBI_MAX_SWEEPS)
            total += time.perf_counter() - start
            assert sweeps >= 0
        best = min(best, total / len(matrices))
    return best


def check_parity(matrices):
    worst_equal = True
    for s in matrices:
        a1 = np.ascontiguousarray(s.copy())
        v1 = np.eye(s.shape[0])
        a2 = a1.copy()
        v2 = v1.copy()
        tol = JACOBI_TOL_FACTOR * float(np.abs(a1).max())
        _kernels.jacobi_sweeps(a1, v1, tol, JACOBI_MAX_SWEEPS)
        _kernels_py.jacobi_sweeps(a2, v2, tol, JACOBI_MAX_SWEEPS)
        worst_equal = worst_equal and np.array_equal(a1, a2) and np.array_equal(v1, v2)
    return worst_equal


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="16,32,64,128")
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--matrices", type=int, default=5, help="matrices per size")
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if _kernels is None:
        print("compiled kernel unavailable; showing the pure backend only")

    print(f"{'m':>5} {'pure (ms)':>12} {'compiled (ms)':>14} {'speedup':>9} {'parity':>7}")
    for m in sizes:
        matrices = [
            random_symmetric(m, RngStream(1234, i)) for i in range(args.matrices)
        ]
        t_pure = time_backend(_kernels_py, matrices, args.repeats)
        if _kernels is not None:
            t_comp = time_backend(_kernels, matrices, args.repeats)
            parity = "exact" if check_parity(matrices) else "DIFFER"
            print(
                f"{m:>5} {t_pure * 1e3:>12.2f} {t_comp * 1e3:>14.3f} "
                f"{t_pure / t_comp:>8.1f}x {parity:>7}"
            )
        else:
            print(f"{m:>5} {t_pure * 1e3:>12.2f} {'-':>14} {'-':>9} {'-':>7}")


if __name__ == "__main__":
    main()
