"""Batch folding, the closest-divisor rule and the fold-ratio lookup table.

Folding reshapes ``[B, D, L]`` into ``[B1, D, B2*L]`` with ``B = B1*B2`` by
concatenating ``B2`` consecutive rows along the sequence axis. Scanning the
folded tensor with a state reset at every multiple of ``L`` gives exactly the
per-row result.
"""

from __future__ import annotations

import datetime as _dt
import math
import os
import platform
import statistics
import time
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .scan import ScanInputs, random_inputs, scan_parallel
from .tensor import Tensor3, as_tensor3, finalize

LUT_MAGIC = "foldscan-lut"
LUT_VERSION = "v1"


class FoldWarning(UserWarning):
    """Folding was requested but could not be applied."""


@dataclass(frozen=True)
class FoldPlan:
    B: int
    B1: int
    L_seg: int

    def __post_init__(self):
        if self.B < 1 or self.B1 < 1 or self.L_seg < 1:
            raise ValueError(f"invalid fold plan {self}")
        if self.B % self.B1:
            raise ValueError(f"B1={self.B1} does not divide B={self.B}")

    @classmethod
    def identity(cls, B: int, L_seg: int) -> "FoldPlan":
        return cls(B, B, L_seg)

    @property
    def B2(self) -> int:
        return self.B // self.B1

    @property
    def folded_T(self) -> int:
        return self.B2 * self.L_seg

    @property
    def reset_positions(self) -> tuple[int, ...]:
        return tuple(k * self.L_seg for k in range(self.B2))

    def reset_mask(self) -> np.ndarray:
        mask = np.zeros(self.folded_T, dtype=bool)
        mask[:: self.L_seg] = True
        return mask

    def with_seg_len(self, L_seg: int) -> "FoldPlan":
        return FoldPlan(self.B, self.B1, L_seg)


def fold(z, plan: FoldPlan) -> Tensor3:
    """[B, D, L_seg] -> [B1, D, B2*L_seg]; out[i, d, k*L + t] = z[i*B2 + k, d, t]."""
    z = as_tensor3(z, "z")
    B, D, L = z.shape
    if (B, L) != (plan.B, plan.L_seg):
        raise ValueError(f"tensor {z.shape} does not match plan {plan}")
    out = z.reshape(plan.B1, plan.B2, D, L).transpose(0, 2, 1, 3).reshape(plan.B1, D, plan.folded_T)
    return finalize(np.ascontiguousarray(out))


def unfold(z, plan: FoldPlan) -> Tensor3:
    """Exact inverse of :func:`fold`."""
    z = as_tensor3(z, "z")
    B1, D, T = z.shape
    if (B1, T) != (plan.B1, plan.folded_T):
        raise ValueError(f"tensor {z.shape} does not match plan {plan}")
    out = z.reshape(B1, D, plan.B2, plan.L_seg).transpose(0, 2, 1, 3).reshape(plan.B, D, plan.L_seg)
    return finalize(np.ascontiguousarray(out))


def divisors(a: int) -> list[int]:
    if a < 1:
        raise ValueError("a must be >= 1")
    small, large = [], []
    for d in range(1, math.isqrt(a) + 1):
        if a % d == 0:
            small.append(d)
            if d != a // d:
                large.append(a // d)
    return small + large[::-1]


def closest_divisor(a: int, b: float) -> int:
    """Divisor of ``a`` closest to ``b``; ties go to the smaller divisor."""
    return min(divisors(a), key=lambda d: (abs(d - b), d))


# --- lookup table ---------------------------------------------------------

Key = tuple[int, int, int, int]


def hardware_tag() -> str:
    tag = f"{platform.machine()}-{os.cpu_count()}cpu-{platform.processor() or 'unknown'}"
    return "_".join(tag.split())


@dataclass
class TuneLUT:
    """Coarse (B, D, S, L) -> best B1/B table.

    ``cells`` maps a grid point to ``(ratio, reliable)``. Unreliable cells
    always hold ratio 1.0.
    """

    cells: dict[Key, tuple[float, bool]] = field(default_factory=dict)
    hardware: str = field(default_factory=hardware_tag)
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))

    def __len__(self) -> int:
        return len(self.cells)

    def axes(self) -> tuple[list[int], ...]:
        return tuple(sorted({k[i] for k in self.cells}) for i in range(4))

    def set(self, key: Key, ratio: float, reliable: bool = True) -> None:
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {ratio}")
        self.cells[tuple(int(v) for v in key)] = (1.0 if not reliable else float(ratio), bool(reliable))

    def merge(self, other: "TuneLUT") -> "TuneLUT":
        merged = TuneLUT(dict(self.cells), other.hardware, other.timestamp)
        merged.cells.update(other.cells)
        return merged

    def dumps(self) -> str:
        lines = [f"{LUT_MAGIC} {LUT_VERSION} {self.hardware}", f"# created {self.timestamp}"]
        for (B, D, S, L), (ratio, reliable) in sorted(self.cells.items()):
            lines.append(f"{B} {D} {S} {L} {ratio!r} {int(reliable)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TuneLUT":
        lines = text.splitlines()
        if not lines:
            raise ValueError("empty LUT file")
        head = lines[0].split()
        if len(head) != 3 or head[0] != LUT_MAGIC or head[1] != LUT_VERSION:
            raise ValueError(f"bad LUT header: {lines[0]!r}")
        lut = cls(hardware=head[2])
        for n, line in enumerate(lines[1:], start=2):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# created "):
                    lut.timestamp = line[len("# created "):]
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"line {n}: expected 'B D S L ratio reliable', got {line!r}")
            key = tuple(int(p) for p in parts[:4])
            if parts[5] not in ("0", "1"):
                raise ValueError(f"line {n}: reliable flag must be 0 or 1")
            lut.set(key, float(parts[4]), parts[5] == "1")
        return lut

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path) -> "TuneLUT":
        with open(path) as f:
            return cls.loads(f.read())


def _snap(value: int, grid: list[int]) -> int:
    # nearest in log2 space, ties toward the smaller grid value
    lv = math.log2(value)
    return min(grid, key=lambda g: (abs(math.log2(g) - lv), g))


def lut_lookup(lut: TuneLUT, B: int, D: int, S: int, L: int) -> int:
    """B1 = closest_divisor(B, B * ratio) for the nearest grid cell."""
    if not lut.cells:
        warnings.warn("empty fold LUT; folding disabled", FoldWarning, stacklevel=2)
        return B
    query = (B, D, S, L)
    key = tuple(_snap(v, axis) for v, axis in zip(query, lut.axes()))
    if key not in lut.cells:
        # sparse grid: nearest stored cell by summed squared log2 distance
        lq = [math.log2(v) for v in query]
        key = min(lut.cells, key=lambda k: (sum((math.log2(a) - b) ** 2 for a, b in zip(k, lq)), k))
    ratio, _ = lut.cells[key]
    return closest_divisor(B, B * ratio)


# --- measurement and tuning ----------------------------------------------

def folded_inputs(inputs: ScanInputs, plan: FoldPlan) -> ScanInputs:
    """Fold every per-step stream of ``inputs`` and set resets from ``plan``."""
    return ScanInputs(
        x=fold(inputs.x, plan),
        delta=fold(inputs.delta, plan),
        a_log=inputs.a_log,
        b_gate=fold(inputs.b_gate, plan),
        c_gate=fold(inputs.c_gate, plan),
        reset_mask=plan.reset_mask(),
    )


def time_scan(inputs: ScanInputs, trials: int, lanes: int = 32,
              workers: Optional[int] = None, warmup: int = 1) -> list[int]:
    """Wall times (ns) of ``trials`` forward-only scans after ``warmup`` runs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    for _ in range(warmup):
        scan_parallel(inputs, lanes=lanes, workers=workers)
    out = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        scan_parallel(inputs, lanes=lanes, workers=workers)
        out.append(time.perf_counter_ns() - t0)
    return out


def measure_config(B: int, D: int, S: int, L: int, b1_values: Iterable[int], trials: int,
                   lanes: int = 32, workers: Optional[int] = None, warmup: int = 1,
                   seed: int = 0) -> dict[int, list[int]]:
    """Timings per B1 for one (B, D, S, L) configuration on shared random data."""
    base = random_inputs(np.random.default_rng(seed), B, D, S, L)
    timings = {}
    for B1 in b1_values:
        plan = FoldPlan(B, B1, L)
        timings[B1] = time_scan(folded_inputs(base, plan), trials, lanes, workers, warmup)
    return timings


def spread(times: list[int]) -> float:
    """Interquartile range relative to the median."""
    if len(times) < 4:
        return (max(times) - min(times)) / statistics.median(times)
    q = statistics.quantiles(times, n=4)
    return (q[2] - q[0]) / statistics.median(times)


def tune(configs: Iterable[Key], trials: int, lanes: int = 32, workers: Optional[int] = None,
         warmup: int = 1, max_spread: float = 0.25, lut: Optional[TuneLUT] = None,
         seed: int = 0) -> TuneLUT:
    """Benchmark every divisor B1 per config and record the fastest ratio.

    A cell whose winning timings spread more than ``max_spread`` (IQR over
    median) is stored as unreliable with ratio 1.0.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    fresh = TuneLUT()
    for B, D, S, L in configs:
        timings = measure_config(B, D, S, L, divisors(B), trials, lanes, workers, warmup, seed)
        best = min(timings, key=lambda b1: (statistics.median(timings[b1]), b1))
        reliable = spread(timings[best]) <= max_spread
        fresh.set((B, D, S, L), best / B, reliable)
    return fresh if lut is None else lut.merge(fresh)
