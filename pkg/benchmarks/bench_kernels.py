"""Compare the compiled kernels against the numpy fallback.

The three kernels are the hot spots of the attention path: pairwise
bucket-table gathers in the forward pass and their scatter-add adjoints
in the backward pass (the numpy fallback for scatter-add is np.add.at,
which is notoriously slow). Run:

    python3 benchmarks/bench_kernels.py [n] [repeats]
"""

from __future__ import annotations

import sys
import time

import numpy as np

from vrdu import _kernels_py, kernels


def bench(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 512
    repeats = int(sys.argv[2]) if len(sys.argv) > 2 else 20
    rows_bucket = 256

    rng = np.random.default_rng(0)
    table = rng.normal(size=(n, rows_bucket))
    rows = rng.integers(0, n, size=(n, n)).astype(np.int64)
    cols = rng.integers(0, rows_bucket, size=(n, n)).astype(np.int64)
    grad = rng.normal(size=(n, n))
    row_ids = rng.integers(0, n, size=4 * n).astype(np.int64)
    row_grad = rng.normal(size=(4 * n, rows_bucket))

    print(f"active backend: {kernels.BACKEND}; n={n}, repeats={repeats}")
    if not kernels.HAVE_EXT:
        print("compiled extension unavailable; timing the fallback only")

    cases = [
        ("gather_pair",
         lambda: kernels.gather_pair(table, rows, cols),
         lambda: _kernels_py.gather_pair(table, rows, cols)),
        ("scatter_add_pair",
         lambda: kernels.scatter_add_pair(np.zeros_like(table), rows, cols, grad),
         lambda: _kernels_py.scatter_add_pair(np.zeros_like(table), rows, cols, grad)),
        ("scatter_add_rows",
         lambda: kernels.scatter_add_rows(np.zeros((n, rows_bucket)), row_ids, row_grad),
         lambda: _kernels_py.scatter_add_rows(np.zeros((n, rows_bucket)), row_ids, row_grad)),
    ]

    header = f"{'kernel':<18}{'compiled (ms)':>15}{'numpy (ms)':>13}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, fast, slow in cases:
        t_fast = bench(fast, repeats) * 1e3
        t_slow = bench(slow, repeats) * 1e3
        ratio = t_slow / t_fast if t_fast > 0 else float("inf")
        print(f"{name:<18}{t_fast:>15.3f}{t_slow:>13.3f}{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
