"""Graph-based reverse-mode differentiation over numpy arrays.

Each op records its parents and a closure mapping the output gradient to
parent gradients; :func:`backward` walks the graph in reverse topological
order. The closures call the analytic kernels in :mod:`foldscan.layers` and
:mod:`foldscan.scan`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import layers as L
from . import scan as S
from .fold import FoldPlan, fold as _fold, unfold as _unfold
from .tensor import swap_permutation

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = old


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents: Sequence["Var"] = (),
                 backward: Optional[Callable] = None):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _op(value, parents, backward) -> Var:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Var(value, True, parents, backward)
    return Var(value)


def backward(out: Var, grad=None) -> None:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents)
    grads = {id(out): np.ones_like(out.value) if grad is None else np.asarray(grad)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- elementwise / structural ---------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _op(a.value + b.value, (a, b), lambda g: (g, g))


def silu(x) -> Var:
    x = as_var(x)
    return _op(L.silu_fwd(x.value), (x,), lambda g: (L.silu_bwd(g, x.value),))


def softplus(x) -> Var:
    x = as_var(x)
    return _op(L.softplus_fwd(x.value), (x,), lambda g: (L.softplus_bwd(g, x.value),))


def concat(xs, axis: int) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _op(np.concatenate([x.value for x in xs], axis=axis), xs,
               lambda g: tuple(np.split(g, sizes, axis=axis)))


def reshape(x, shape) -> Var:
    x = as_var(x)
    old = x.shape
    return _op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def mean(x, axis: int, keepdims: bool = False) -> Var:
    x = as_var(x)
    n = x.shape[axis]

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / n,)

    return _op(x.value.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def take_seq(x, idx) -> Var:
    """Gather positions ``idx`` along the last axis."""
    x = as_var(x)
    idx = np.asarray(idx)

    def bwd(g):
        out = np.zeros_like(x.value)
        np.add.at(out, (..., idx), g)
        return (out,)

    return _op(x.value[..., idx], (x,), bwd)


def permute_seq(x, perm) -> Var:
    x = as_var(x)
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return _op(x.value[..., perm], (x,), lambda g: (g[..., inv],))


def seq_mean(x) -> Var:
    return mean(x, axis=2, keepdims=True)


def concat_ends(head, x, tail) -> Var:
    return concat([head, x, tail], axis=2)


def swap_positions(x, i: int, j: int, segment_stride: int) -> Var:
    x = as_var(x)
    return permute_seq(x, swap_permutation(x.shape[2], i, j, segment_stride))


def fold(x, plan: FoldPlan) -> Var:
    x = as_var(x)
    return _op(np.array(_fold(x.value, plan)), (x,), lambda g: (np.array(_unfold(g, plan)),))


def unfold(x, plan: FoldPlan) -> Var:
    x = as_var(x)
    return _op(np.array(_unfold(x.value, plan)), (x,), lambda g: (np.array(_fold(g, plan)),))


def broadcast_to(x, shape) -> Var:
    x = as_var(x)
    lead = len(shape) - x.value.ndim
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def bwd(g):
        return (g.sum(axis=axes, keepdims=True).reshape(x.shape),)

    return _op(np.broadcast_to(x.value, shape).copy(), (x,), bwd)


def weighted_sum(x, w) -> Var:
    """sum(x * w) for a constant ``w``; a scalar probe for gradient checks."""
    x = as_var(x)
    w = np.asarray(w)
    return _op(np.asarray(float((x.value * w).sum())), (x,), lambda g: (g * w,))


# --- layers ---------------------------------------------------------------

def linear(x, w, b=None) -> Var:
    x, w = as_var(x), as_var(w)
    parents = (x, w) if b is None else (x, w, as_var(b))
    y = L.linear_fwd(x.value, w.value, None if b is None else parents[2].value)

    def bwd(g):
        dx, dw, db = L.linear_bwd(g, x.value, w.value)
        return (dx, dw) if b is None else (dx, dw, db)

    return _op(y, parents, bwd)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Var:
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    y, cache = L.layernorm_fwd(x.value, gamma.value, beta.value, eps)
    return _op(y, (x, gamma, beta), lambda g: L.layernorm_bwd(g, cache))


def dwconv1d(x, kernel, bias, seg_len: int) -> Var:
    x, kernel, bias = as_var(x), as_var(kernel), as_var(bias)
    y = L.dwconv1d_folded(x.value, kernel.value, seg_len, bias.value)
    return _op(y, (x, kernel, bias),
               lambda g: L.dwconv1d_folded_bwd(g, x.value, kernel.value, seg_len))


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Var:
    x, w, b = as_var(x), as_var(w), as_var(b)
    y = L.conv2d_fwd(x.value, w.value, b.value, stride, pad)
    return _op(y, (x, w, b), lambda g: L.conv2d_bwd(g, x.value, w.value, stride, pad))


_MHA_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def mha(x, params: dict, heads: int) -> Var:
    x = as_var(x)
    pv = [as_var(params[k]) for k in _MHA_KEYS]
    raw = {k: v.value for k, v in zip(_MHA_KEYS, pv)}
    y, cache = L.mha_fwd(x.value, raw, heads)

    def bwd(g):
        dx, grads = L.mha_bwd(g, cache, raw)
        return (dx,) + tuple(grads[k] for k in _MHA_KEYS)

    return _op(y, (x, *pv), bwd)


def selective_scan(x, delta, a_log, b_gate, c_gate, reset_mask, lanes: int = 32,
                   workers: Optional[int] = None, training: bool = True) -> Var:
    vs = [as_var(v) for v in (x, delta, a_log, b_gate, c_gate)]
    inputs = S.ScanInputs(*(v.value for v in vs), reset_mask=reset_mask)
    keep = training and _grad_enabled and any(v.requires_grad for v in vs)
    out = S.scan_parallel(inputs, lanes=lanes, training=keep, workers=workers)
    return _op(np.array(out.y), vs, lambda g: tuple(S.scan_backward(inputs, g, out)))


def cross_entropy(logits, labels) -> Var:
    logits = as_var(logits)
    labels = np.asarray(labels)
    loss, probs = L.cross_entropy_fwd(logits.value, labels)
    return _op(np.asarray(loss), (logits,), lambda g: (g * L.cross_entropy_bwd(probs, labels),))
