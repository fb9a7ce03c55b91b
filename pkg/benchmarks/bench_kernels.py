"""Compare the compiled oracle kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel and size: best-of-N seconds for each backend and
the speedup.  Both backends must return the same result; a mismatch aborts.
"""
import argparse
import sys
import time

import numpy as np

from lehd.kernels import _pure
from lehd.routing import distance_matrix

try:
    from lehd.kernels import _fast
except ImportError:
    sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats, best is kept (default 5)")
    ap.add_argument("--seed", type=int, default=0, help="instance seed (default 0)")
    args = ap.parse_args(argv)
    g = np.random.default_rng(args.seed)

    cases = []
    for n in (8, 10, 12):
        D = distance_matrix(g.random((n, 2)))
        cases.append(("held_karp", n, lambda m, D=D: m.held_karp(D, 0, 0)))
    for n in (100, 1000):
        D = distance_matrix(g.random((n, 2)))
        order = np.asarray(g.permutation(n), dtype=np.int64)
        cases.append(("nearest_neighbor_tour", n, lambda m, D=D: list(m.nearest_neighbor_tour(D, 0))))
        cases.append(("closed_length", n, lambda m, D=D, o=order: m.closed_length(D, o)))

    print(f"{'kernel':<22} {'n':>5} {'compiled s':>12} {'python s':>12} {'speedup':>8}")
    for name, n, run in cases:
        t_fast, a = best_of(lambda: run(_fast), args.repeat)
        t_pure, b = best_of(lambda: run(_pure), args.repeat)
        if name == "held_karp":
            same = a[1] == b[1] and abs(a[0] - b[0]) < 1e-12
        elif name == "closed_length":
            same = abs(a - b) < 1e-12
        else:
            same = a == b
        if not same:
            sys.exit(f"{name} n={n}: backends disagree")
        print(f"{name:<22} {n:>5} {t_fast:>12.6f} {t_pure:>12.6f} {t_pure / t_fast:>7.1f}x")


if __name__ == "__main__":
    main()
