"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--csv out.csv]

Cases cover the two call patterns seen in practice: long streams (dataset
noise, Monte-Carlo checks) and many short per-sample streams (tape draws
inside attacks and ADDT batches).
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from dbplab import _kernels_py

try:
    from dbplab import _kernels as _compiled
except ImportError:
    _compiled = None

KEY = 0x243F6A8885A308D3


def cases(impl):
    rows = np.random.default_rng(0).normal(size=(64, 256))
    ties = np.round(rows, 1)
    return {
        "uniform_stream 1e6": lambda: impl.uniform_stream(KEY, 1_000_000),
        "gaussian_fill 1e6": lambda: impl.gaussian_fill(KEY, 1_000_000),
        "gaussian_fill 256 x 512 calls": lambda: [impl.gaussian_fill(KEY + i, 256) for i in range(512)],
        "argsort_rows 64x256": lambda: impl.stable_argsort_rows(rows),
        "argsort_rows 64x256 ties": lambda: impl.stable_argsort_rows(ties),
    }


def best_time(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--csv", help="also write results to this CSV file")
    args = parser.parse_args(argv)

    py = cases(_kernels_py)
    cy = cases(_compiled) if _compiled is not None else {}
    if _compiled is None:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)

    results = []
    print(f"{'case':34s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in py.items():
        t_py = best_time(fn, args.repeat) * 1e3
        t_cy = best_time(cy[name], args.repeat) * 1e3 if name in cy else float("nan")
        results.append((name, t_py, t_cy, t_py / t_cy))
        print(f"{name:34s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:8.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("case", "numpy_ms", "cython_ms", "speedup"))
            w.writerows(results)
    return 0


if __name__ == "__main__":
    sys.exit(main())
