"""Command-line entry point: ``foldscan {verify,tune,bench,erf,train}``.

Exit status is 0 on success, 1 when a check or a run fails, 2 on bad usage.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import bench, verify
from .fold import TuneLUT, tune
from .model import (ModelConfig, LastPatchCueTask, SequenceClassifier, ToyConfig, CUTS, build,
                    erf_map, loads_config, parse_fold_policy, resolve_b1, train_toy)
from .blocks import DISCARD_POLICIES
from .scan import WORKERS_ENV
from .tensor import get_precision, precision

DEFAULT_SHAPES = ((256, 64, 8, 49),)


class UsageError(ValueError):
    pass


def parse_shape(text: str) -> tuple[int, int, int, int]:
    """``B,D,S,L`` or ``BxDxSxL``."""
    parts = text.replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        vals = ()
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected B,D,S,L, got {text!r}")
    return vals


def _fold_arg(text: str) -> str:
    try:
        parse_fold_policy(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return text


def _common(p: argparse.ArgumentParser, *, trials: Optional[int] = None) -> None:
    p.add_argument("--workers", type=int, default=None,
                   help=f"scan worker threads (default: ${WORKERS_ENV}, else 1)")
    p.add_argument("--seed", type=int, default=None, help="default 0; overrides a config file")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--lanes", type=int, default=None, help="parallel-scan chunk count")
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    if trials is not None:
        p.add_argument("--trials", type=int, default=trials)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="foldscan", description=__doc__.splitlines()[0])
    cmds = ap.add_subparsers(dest="command", required=True)

    p = cmds.add_parser("verify", help="run the verification suites")
    _common(p)
    p.add_argument("--scope", action="append", choices=verify.SUITES,
                   help="suite to run (repeatable; default: all)")
    p.add_argument("--inject-fault", action="store_true", help="perturb kernels (self-test)")
    p.add_argument("--quick", action="store_true", help="fewer instances per suite")

    p = cmds.add_parser("tune", help="measure fold factors into a LUT file")
    _common(p, trials=5)
    p.add_argument("--shape", action="append", type=parse_shape, help="B,D,S,L (repeatable)")
    p.add_argument("--lut", default=None, help="existing LUT to merge into")
    p.add_argument("--max-spread", type=float, default=0.25)

    p = cmds.add_parser("bench", help="sweep B1 and write BenchRecord CSV")
    _common(p, trials=5)
    p.add_argument("--shape", action="append", type=parse_shape, help="B,D,S,L (repeatable)")
    p.add_argument("--sweep", choices=bench.SWEEPS, default="all")
    p.add_argument("--fold", type=_fold_arg, default=None,
                   help="fixed:<B1> or adaptive: time only that B1 against B1=B")
    p.add_argument("--lut", default=None)

    p = cmds.add_parser("erf", help="write an ERF heat map as a text matrix")
    _common(p)
    p.add_argument("--config", default=None, help="model config file (key = value lines)")
    p.add_argument("--cut", choices=CUTS, default="stage3_mamba")
    p.add_argument("--probes", type=int, default=4)
    p.add_argument("--fold", type=_fold_arg, default=None)
    p.add_argument("--swap", choices=("on", "off"), default=None)
    p.add_argument("--discard", choices=DISCARD_POLICIES, default=None)
    p.add_argument("--lut", default=None)

    p = cmds.add_parser("train", help="train the toy sequence model, write a CSV trace")
    _common(p)
    p.add_argument("--config", default=None, help="toy config file (key = value lines)")
    p.add_argument("--swap", choices=("on", "off"), default=None)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--eval-every", type=int, default=100)
    return ap


# --- helpers --------------------------------------------------------------

def _open_out(path: Optional[str]):
    return open(path, "w", newline="") if path else _Stdout()


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()


def _load_lut(path: Optional[str], must_exist: bool = True) -> Optional[TuneLUT]:
    if path is None:
        return None
    if not os.path.exists(path):
        if must_exist:
            raise UsageError(f"LUT file {path} not found")
        return None
    try:
        return TuneLUT.load(path)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}")


def _load_config(cls, path: Optional[str]):
    if path is None:
        return cls()
    try:
        with open(path) as fh:
            return loads_config(cls, fh.read())
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"config {path}: {exc}")


def _override(cfg, **kw):
    return dataclasses.replace(cfg, **{k: v for k, v in kw.items() if v is not None})


def _swap(flag: Optional[str]) -> Optional[bool]:
    return None if flag is None else flag == "on"


# --- commands -------------------------------------------------------------

def cmd_verify(args) -> int:
    results = verify.run_suites(args.scope or verify.SUITES, workers=args.workers,
                                seed=args.seed or 0, fault=args.inject_fault, quick=args.quick)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} [{r.suite}] {r.name}: max_error={r.max_error:.3e} "
              f"tol={r.tolerance:.1e} cases={r.cases}")
    ok = all(r.passed for r in results)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"passed": ok, "results": [r.to_dict() for r in results]}, fh, indent=2)
    return 0 if ok else 1


def cmd_tune(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    base = _load_lut(args.lut, must_exist=False)
    shapes = args.shape or DEFAULT_SHAPES
    lut = tune(shapes, args.trials, lanes=args.lanes or 32, workers=args.workers,
               max_spread=args.max_spread, lut=base, seed=args.seed or 0)
    out = args.out or args.lut
    if out:
        lut.save(out)
    else:
        sys.stdout.write(lut.dumps())
    for key in shapes:
        ratio, reliable = lut.cells[tuple(key)]
        print(f"tuned {key}: ratio={ratio!r} reliable={reliable}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    if args.trials < 3:
        raise UsageError("--trials must be >= 3")
    lut = _load_lut(args.lut)
    shapes = args.shape or DEFAULT_SHAPES
    run_id = bench.new_run_id()
    records, skipped = [], []
    for shape in shapes:
        b1_values = None
        if args.fold is not None:
            B, D, S, L = shape
            try:
                b1 = resolve_b1(args.fold, B, D, S, L, lut)
            except ValueError as exc:
                raise UsageError(str(exc))
            print(f"selected B1={b1} for {shape}", file=sys.stderr)
            b1_values = [b1]
        r, s = bench.run_bench([shape], args.sweep, args.trials, args.lanes or 32, args.workers,
                               seed=args.seed or 0, b1_values=b1_values, run_id=run_id)
        records += r
        skipped += s
    if args.out:
        bench.write_csv(args.out, records, skipped, run_id)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(bench.COLUMNS)
        for rec in records:
            w.writerow(dataclasses.astuple(rec))
        for cfg, reason in skipped:
            print(f"# warning run_id={run_id} skipped config {cfg!r}: {reason}")
    return 0


def cmd_erf(args) -> int:
    if args.probes < 1:
        raise UsageError("--probes must be >= 1")
    cfg = _override(_load_config(ModelConfig, args.config), fold=args.fold, swap=_swap(args.swap),
                    discard=args.discard, seed=args.seed, lanes=args.lanes)
    lut = _load_lut(args.lut)
    try:
        model = build(cfg, lut=lut, workers=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc))
    rng = np.random.default_rng(cfg.seed)
    probes = rng.standard_normal((args.probes, cfg.in_channels, cfg.image_size, cfg.image_size))
    heat = erf_map(model, probes, cut=args.cut)
    with _open_out(args.out) as fh:
        np.savetxt(fh, heat, fmt="%.10e")
    return 0


def cmd_train(args) -> int:
    if args.steps < 0 or args.batch < 1 or args.eval_every < 1:
        raise UsageError("--steps must be >= 0, --batch and --eval-every >= 1")
    cfg = _override(_load_config(ToyConfig, args.config), swap=_swap(args.swap), lanes=args.lanes,
                    seed=args.seed)
    model = SequenceClassifier.build(cfg, workers=args.workers)
    task = LastPatchCueTask(patch_dim=cfg.patch_dim, classes=cfg.classes, seed=cfg.seed)
    trace = train_toy(model, task, args.steps, lr=args.lr, batch=args.batch,
                      eval_every=args.eval_every, seed=cfg.seed)
    with _open_out(args.out) as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "accuracy", "eval_acc"],
                           lineterminator="\n")
        w.writeheader()
        for rec in trace:
            w.writerow({k: ("" if v is None else repr(v)) for k, v in rec.items()})
    return 0


COMMANDS = {"verify": cmd_verify, "tune": cmd_tune, "bench": cmd_bench,
            "erf": cmd_erf, "train": cmd_train}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.workers is not None and args.workers < 1:
        parser.print_usage(sys.stderr)
        print("foldscan: error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        with precision(args.precision or get_precision()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"foldscan: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any runtime failure maps to exit 1
        print(f"foldscan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
