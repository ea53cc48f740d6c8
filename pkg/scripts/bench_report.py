#!/usr/bin/env python3
"""Accumulation benchmark sweep: matrix form vs the per-element loop.

Usage: python scripts/bench_report.py [--sizes 128,256,512,1024]
"""

import argparse

from nlcov.bench import run_bench


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="128,256,512,1024")
    parser.add_argument("--batch-size", type=int, default=256)
    args = parser.parse_args()

    print(f"{'neurons':>8} {'matrix (s)':>11} {'loop (s)':>9} {'speedup':>8} "
          f"{'rel err':>9} {'cost ratio':>10}")
    for m in (int(v) for v in args.sizes.split(",")):
        r = run_bench(m=m, batches=2, batch_size=args.batch_size)
        print(f"{m:>8} {r['matrix_seconds']:>11.4f} {r['loop_seconds']:>9.3f} "
              f"{r['speedup']:>7.1f}x {r['relative_error']:>9.1e} "
              f"{r['constant_cost']['ratio']:>10.2f}")


if __name__ == "__main__":
    main()
