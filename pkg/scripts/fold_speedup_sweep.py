"""Sweep the fold factor B1 for a few scan shapes and append to a CSV.

    python scripts/fold_speedup_sweep.py --out sweep.csv --workers 4
"""

import argparse

from foldscan.bench import run_bench, write_csv
from foldscan.tensor import precision

SHAPES = [(256, 64, 8, 49), (128, 64, 8, 196), (64, 64, 8, 784)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="sweep.csv")
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--sweep", choices=("all", "pow2"), default="all")
    args = ap.parse_args()

    with precision("f32"):
        records, skipped = run_bench(SHAPES, args.sweep, args.trials, workers=args.workers)
    write_csv(args.out, records, skipped, records[0].run_id if records else "")
    for r in records:
        print(f"B={r.B:4d} L={r.L:4d} B1={r.B1:4d} B1/B={r.B1 / r.B:.4f} "
              f"median={r.median_ns / 1e6:8.2f} ms speedup={r.speedup:.2f}x")


if __name__ == "__main__":
    main()
