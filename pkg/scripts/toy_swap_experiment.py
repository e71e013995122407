"""Train the last-patch-cue model with and without auxiliary-token swapping.

Writes one row per (swap, seed) with the best evaluation accuracy reached.
"""

import argparse
import csv
import sys

from foldscan.model import LastPatchCueTask, SequenceClassifier, ToyConfig, train_toy


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--aux-init", choices=("mean", "learnable"), default="mean")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["swap", "aux_init", "seed", "steps", "best_eval_acc", "final_eval_acc"])
    for swap in (True, False):
        for seed in range(args.seeds):
            model = SequenceClassifier.build(ToyConfig(swap=swap, aux_init=args.aux_init, seed=seed))
            trace = train_toy(model, LastPatchCueTask(seed=seed), args.steps, lr=args.lr, seed=seed)
            evals = [r["eval_acc"] for r in trace if r["eval_acc"] is not None]
            w.writerow([swap, args.aux_init, seed, args.steps, max(evals), evals[-1]])
            fh.flush()
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
