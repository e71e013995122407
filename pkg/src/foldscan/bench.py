"""Fold-factor sweeps written as append-safe CSV."""

from __future__ import annotations

import csv
import os
import statistics
import uuid
import warnings
from dataclasses import astuple, dataclass
from typing import Iterable, Optional

from .fold import FoldWarning, divisors, measure_config

COLUMNS = ("B", "D", "S", "L", "B1", "median_ns", "speedup", "trials", "run_id")
SWEEPS = ("all", "pow2")


@dataclass(frozen=True)
class BenchRecord:
    B: int
    D: int
    S: int
    L: int
    B1: int
    median_ns: int
    speedup: float
    trials: int
    run_id: str

    def __post_init__(self):
        if self.trials < 3:
            raise ValueError("a bench record needs at least 3 trials")


def sweep_values(B: int, sweep: str = "all") -> list[int]:
    """B1 candidates: every divisor, or the power-of-two divisors plus B."""
    if sweep not in SWEEPS:
        raise ValueError(f"sweep must be one of {SWEEPS}, got {sweep!r}")
    ds = divisors(B)
    if sweep == "pow2":
        ds = sorted({d for d in ds if d & (d - 1) == 0} | {B})
    return ds


def check_config(B: int, D: int, S: int, L: int) -> None:
    for name, v in zip("BDSL", (B, D, S, L)):
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


def run_bench(configs: Iterable[tuple], sweep: str = "all", trials: int = 5, lanes: int = 32,
              workers: Optional[int] = None, warmup: int = 1, seed: int = 0,
              b1_values: Optional[Iterable[int]] = None, run_id: Optional[str] = None):
    """Time every swept B1 per config.

    Returns (records, skipped) where ``skipped`` lists (config, reason) for
    configurations that were rejected. B1 = B is always measured since it
    defines speedup 1.0.
    """
    if trials < 3:
        raise ValueError("trials must be >= 3")
    run_id = run_id or new_run_id()
    records, skipped = [], []
    for cfg in configs:
        try:
            B, D, S, L = cfg
            check_config(B, D, S, L)
            cand = sweep_values(B, sweep) if b1_values is None else list(b1_values)
            bad = [b for b in cand if b < 1 or B % b]
            if bad:
                raise ValueError(f"B1 values {bad} do not divide B={B}")
        except (TypeError, ValueError) as exc:
            warnings.warn(f"skipping bench config {cfg!r}: {exc}", FoldWarning, stacklevel=2)
            skipped.append((cfg, str(exc)))
            continue
        cand = sorted(set(cand) | {B})
        timings = measure_config(B, D, S, L, cand, trials, lanes, workers, warmup, seed)
        med = {b1: int(statistics.median(ts)) for b1, ts in timings.items()}
        for b1 in cand:
            speedup = 1.0 if b1 == B else med[B] / med[b1]
            records.append(BenchRecord(B, D, S, L, b1, med[b1], speedup, trials, run_id))
    return records, skipped


def write_csv(path: str, records: list[BenchRecord], skipped=(), run_id: str = "") -> None:
    """Append to ``path``; the header is written only for a new or empty file.

    Skipped configs become ``#``-prefixed warning rows.
    """
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    if not fresh:
        with open(path, newline="") as fh:
            first = fh.readline().strip()
        if first != ",".join(COLUMNS):
            raise ValueError(f"{path} has an unexpected header: {first!r}")
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(COLUMNS)
        for r in records:
            w.writerow(astuple(r))
        for cfg, reason in skipped:
            fh.write(f"# warning run_id={run_id} skipped config {cfg!r}: {reason}\n")


def read_csv(path: str) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [BenchRecord(int(r["B"]), int(r["D"]), int(r["S"]), int(r["L"]), int(r["B1"]),
                            int(r["median_ns"]), float(r["speedup"]), int(r["trials"]),
                            r["run_id"]) for r in rows]
