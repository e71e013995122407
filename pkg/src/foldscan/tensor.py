"""Rank-3 tensors laid out as [batch, channel, sequence].

A ``Tensor3`` here is simply a C-contiguous ``numpy.ndarray`` of shape
``(B, D, T)``. Element ``(b, d, t)`` lives at flat offset ``b*D*T + d*T + t``;
every other module depends on that contract. Library operations return
read-only arrays so results can be shared freely between workers.

Precision is a global, explicit setting: ``f64`` for verification (default)
and ``f32`` for benchmarks.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

Tensor3 = np.ndarray

_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_dtype: type = np.float64
_check_finite = False


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


def get_precision() -> str:
    return next(k for k, v in _PRECISIONS.items() if v is _dtype)


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global precision."""
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def set_finite_checks(enabled: bool) -> None:
    """Enable NaN/Inf checks on library outputs (verification mode)."""
    global _check_finite
    _check_finite = bool(enabled)


def finalize(a: np.ndarray, what: str = "output") -> np.ndarray:
    if _check_finite and not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
    a.flags.writeable = False
    return a


def tensor3(data, B: int, D: int, T: int) -> Tensor3:
    """Build a tensor from flat data in (b, d, t) linear order."""
    if min(B, D, T) < 1:
        raise ValueError(f"all dims must be >= 1, got {(B, D, T)}")
    flat = np.asarray(data, dtype=_dtype).ravel()
    if flat.size != B * D * T:
        raise ValueError(f"data length {flat.size} != B*D*T = {B * D * T}")
    return finalize(flat.reshape(B, D, T).copy())


def as_tensor3(x, name: str = "x") -> Tensor3:
    """Validate ``x`` as a rank-3 tensor in the current precision."""
    a = np.ascontiguousarray(x, dtype=_dtype)
    if a.ndim != 3:
        raise ValueError(f"{name} must be rank 3 [B, D, T], got shape {a.shape}")
    if min(a.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {a.shape}")
    return a


def linear_index(b: int, d: int, t: int, shape: tuple[int, int, int]) -> int:
    B, D, T = shape
    if not (0 <= b < B and 0 <= d < D and 0 <= t < T):
        raise IndexError((b, d, t))
    return b * D * T + d * T + t


def seq_mean(x) -> Tensor3:
    """Mean over the sequence axis; output has T=1."""
    x = as_tensor3(x)
    return finalize(x.mean(axis=2, keepdims=True))


def concat_ends(head, x, tail) -> Tensor3:
    """Place ``head`` before and ``tail`` after ``x`` along the sequence axis."""
    head, x, tail = as_tensor3(head, "head"), as_tensor3(x), as_tensor3(tail, "tail")
    for name, t in (("head", head), ("tail", tail)):
        if t.shape != (x.shape[0], x.shape[1], 1):
            raise ValueError(f"{name} shape {t.shape} incompatible with x {x.shape}")
    return finalize(np.concatenate([head, x, tail], axis=2))


def swap_permutation(T: int, i: int, j: int, segment_stride: int) -> np.ndarray:
    """Index permutation exchanging offsets i and j inside every segment."""
    if segment_stride < 1:
        raise ValueError("segment_stride must be >= 1")
    if not (0 <= i < segment_stride and 0 <= j < segment_stride):
        raise ValueError(f"offsets {(i, j)} outside segment of length {segment_stride}")
    starts = np.arange(0, T, segment_stride)
    if starts[-1] + max(i, j) >= T:
        raise ValueError(f"offset {max(i, j)} out of range in final segment starting at {starts[-1]}")
    perm = np.arange(T)
    perm[starts + i], perm[starts + j] = starts + j, starts + i
    return perm


def swap_positions(x, i: int, j: int, segment_stride: int) -> Tensor3:
    """Exchange tokens at offsets i and j within each segment; an involution."""
    x = as_tensor3(x)
    perm = swap_permutation(x.shape[2], i, j, segment_stride)
    return finalize(x[:, :, perm])
