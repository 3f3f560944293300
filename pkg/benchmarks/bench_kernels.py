"""Compare the compiled and numpy im2col/col2im kernels.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--csv out.csv]

Prints one row per (shape, kernel, backend) with the median wall time and
the speedup of the compiled backend over numpy.
"""
import argparse
import csv
import statistics
import sys
import time

import numpy as np

from magtac import kernels

CASES = [
    # name, (N, C, H, W), kernel, stride, pad
    ("desk CBR1 batch64", (64, 3, 64, 64), 7, 2, 3),
    ("desk CBR2 batch64", (64, 16, 32, 32), 5, 2, 2),
    ("desk CBR3 batch64", (64, 32, 16, 16), 3, 2, 1),
    ("paper CBR1 batch8", (8, 3, 224, 224), 7, 2, 3),
    ("paper CBR2 batch8", (8, 16, 112, 112), 5, 2, 2),
]


def median_ms(fn, repeats, warmup=2):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def run(repeats, dtype=np.float32):
    backends = ["python"] + (["cython"] if kernels.HAVE_CYTHON else [])
    rng = np.random.default_rng(0)
    rows = []
    for name, shape, k, s, p in CASES:
        x = rng.standard_normal(shape).astype(dtype)
        cols = kernels.im2col(x, k, k, s, p, backend="python")
        timings = {}
        for b in backends:
            timings[("im2col", b)] = median_ms(lambda: kernels.im2col(x, k, k, s, p, backend=b), repeats)
            timings[("col2im", b)] = median_ms(lambda: kernels.col2im(cols, shape, k, k, s, p, backend=b), repeats)
        for op in ("im2col", "col2im"):
            base = timings[(op, "python")]
            for b in backends:
                rows.append([name, op, b, f"{timings[(op, b)]:.3f}", f"{base / timings[(op, b)]:.2f}"])
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--csv", help="also write the table to this file")
    args = ap.parse_args(argv)
    header = ["case", "op", "backend", "median_ms", "speedup_vs_numpy"]
    rows = run(args.repeats)
    if not kernels.HAVE_CYTHON:
        print("compiled extension not built; numpy rows only", file=sys.stderr)
    writer = csv.writer(sys.stdout)
    writer.writerow(header)
    writer.writerows(rows)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            csv.writer(fh).writerows([header] + rows)


if __name__ == "__main__":
    main()
