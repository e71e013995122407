"""Mixer, Mamba/attention blocks and the auxiliary-token lifecycle.

Everything here runs on folded ``[B1, D, B2*L_seg]`` layouts: per-token ops
are oblivious to folding, the depthwise conv pads at every segment start and
the scan resets its state there.

Auxiliary tokens sit at offsets 0 (head) and ``L_seg - 1`` (tail) of every
segment. Between consecutive Mamba blocks they are exchanged, so the tail,
which has seen the whole sequence, becomes the next block's head.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np

from . import autograd as ag
from .autograd import Var
from .fold import FoldPlan

DISCARD_POLICIES = ("before_attn", "after_first_attn", "after_attn")
AUX_INITS = ("mean", "learnable")

Params = Mapping[str, object]


@dataclass(frozen=True)
class AuxState:
    present: bool = False
    discard_policy: str = "after_first_attn"
    head_offset: int = 0

    def __post_init__(self):
        if self.discard_policy not in DISCARD_POLICIES:
            raise ValueError(f"unknown discard policy {self.discard_policy!r}")

    def tail_offset(self, plan: FoldPlan) -> int:
        return plan.L_seg - 1


def sub(params: Params, prefix: str) -> dict:
    """View of ``params`` with ``prefix + '.'`` stripped from matching keys."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


# --- initialization -------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_linear(rng, d_out: int, d_in: int, bias: bool = True) -> dict:
    p = {"w": _uniform(rng, (d_out, d_in), d_in)}
    if bias:
        p["b"] = _uniform(rng, (d_out,), d_in)
    return p


def init_norm(d: int) -> dict:
    return {"g": np.ones(d), "b": np.zeros(d)}


def _prefixed(prefix: str, p: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in p.items()}


def init_mixer(rng, d: int, state_dim: int, kernel: int = 3,
               dt_min: float = 1e-3, dt_max: float = 1e-1) -> dict:
    p = {}
    for branch in ("ssm", "gate"):
        p.update(_prefixed(f"{branch}_in", init_linear(rng, d, d)))
        p[f"{branch}_conv.k"] = _uniform(rng, (d, kernel), kernel)
        p[f"{branch}_conv.b"] = _uniform(rng, (d,), kernel)
    p.update(_prefixed("dt", init_linear(rng, d, d)))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d))
    p["dt.b"] = dt + np.log(-np.expm1(-dt))  # softplus^-1
    p["B.w"] = _uniform(rng, (state_dim, d), d)
    p["C.w"] = _uniform(rng, (state_dim, d), d)
    p["a_log"] = np.tile(np.log(np.arange(1, state_dim + 1, dtype=float)), (d, 1))
    p.update(_prefixed("out", init_linear(rng, d, 2 * d)))
    return p


def init_mlp(rng, d: int, ratio: int = 4) -> dict:
    return {**_prefixed("fc1", init_linear(rng, ratio * d, d)),
            **_prefixed("fc2", init_linear(rng, d, ratio * d))}


def init_mamba_block(rng, d: int, state_dim: int, kernel: int = 3) -> dict:
    return {**_prefixed("norm1", init_norm(d)),
            **_prefixed("mixer", init_mixer(rng, d, state_dim, kernel)),
            **_prefixed("norm2", init_norm(d)),
            **_prefixed("mlp", init_mlp(rng, d))}


def init_attention_block(rng, d: int) -> dict:
    attn = {}
    for name in "qkvo":
        lin = init_linear(rng, d, d)
        attn[f"w{name}"], attn[f"b{name}"] = lin["w"], lin["b"]
    return {**_prefixed("norm1", init_norm(d)),
            **_prefixed("attn", attn),
            **_prefixed("norm2", init_norm(d)),
            **_prefixed("mlp", init_mlp(rng, d))}


# --- forward --------------------------------------------------------------

def _check_layout(x: Var, plan: FoldPlan) -> None:
    if x.shape[0] != plan.B1 or x.shape[2] != plan.folded_T:
        raise ValueError(f"tensor {x.shape} not laid out for plan {plan}")


def mixer_fwd(x, p: Params, plan: FoldPlan, lanes: int = 32, workers: Optional[int] = None,
              training: bool = True) -> Var:
    """Two-branch mixer: SSM over a conv path, plus a gated conv path."""
    x = ag.as_var(x)
    _check_layout(x, plan)
    u = ag.linear(x, p["ssm_in.w"], p["ssm_in.b"])
    u = ag.silu(ag.dwconv1d(u, p["ssm_conv.k"], p["ssm_conv.b"], plan.L_seg))
    delta = ag.softplus(ag.linear(u, p["dt.w"], p["dt.b"]))
    x1 = ag.selective_scan(u, delta, p["a_log"], ag.linear(u, p["B.w"]), ag.linear(u, p["C.w"]),
                           plan.reset_mask(), lanes=lanes, workers=workers, training=training)
    g = ag.linear(x, p["gate_in.w"], p["gate_in.b"])
    x2 = ag.silu(ag.dwconv1d(g, p["gate_conv.k"], p["gate_conv.b"], plan.L_seg))
    return ag.linear(ag.concat([x1, x2], axis=1), p["out.w"], p["out.b"])


def mlp_fwd(x, p: Params) -> Var:
    return ag.linear(ag.silu(ag.linear(x, p["fc1.w"], p["fc1.b"])), p["fc2.w"], p["fc2.b"])


def _norm(x, p: Params, name: str) -> Var:
    return ag.layernorm(x, p[f"{name}.g"], p[f"{name}.b"])


def aux_init(x, state: Optional[AuxState] = None, learnable=None) -> tuple[Var, AuxState]:
    """Prepend/append auxiliary tokens to an unfolded [B, D, T] sequence.

    Both tokens default to the sequence mean. ``learnable=(head, tail)``
    uses fixed per-channel vectors instead (ablation only).
    """
    state = state or AuxState()
    if state.present:
        raise ValueError("auxiliary tokens already present")
    x = ag.as_var(x)
    B, D, _ = x.shape
    if learnable is None:
        head = tail = ag.seq_mean(x)
    else:
        head, tail = (ag.broadcast_to(ag.reshape(t, (1, D, 1)), (B, D, 1)) for t in learnable)
    return ag.concat_ends(head, x, tail), replace(state, present=True)


def aux_swap(y, state: AuxState, plan: FoldPlan) -> Var:
    """Exchange head and tail tokens inside every folded segment."""
    if not state.present:
        raise ValueError("no auxiliary tokens to swap")
    return ag.swap_positions(y, state.head_offset, state.tail_offset(plan), plan.L_seg)


def aux_discard(x, state: AuxState, plan: FoldPlan) -> tuple[Var, FoldPlan]:
    """Drop both auxiliary tokens from every segment; L_seg shrinks by 2."""
    x = ag.as_var(x)
    _check_layout(x, plan)
    L = plan.L_seg
    if L < 3:
        raise ValueError(f"segment length {L} too short to hold auxiliary tokens")
    offs = np.arange(1, L - 1)
    idx = (np.arange(plan.B2)[:, None] * L + offs[None, :]).ravel()
    return ag.take_seq(x, idx), plan.with_seg_len(L - 2)


def mamba_block_fwd(x, p: Params, plan: FoldPlan, state: AuxState, swap_after: bool = False,
                    lanes: int = 32, workers: Optional[int] = None, training: bool = True) -> Var:
    """Pre-norm residual Mamba block; optionally swaps aux tokens afterwards."""
    x = ag.as_var(x)
    h = ag.add(x, mixer_fwd(_norm(x, p, "norm1"), sub(p, "mixer"), plan, lanes, workers, training))
    h = ag.add(h, mlp_fwd(_norm(h, p, "norm2"), sub(p, "mlp")))
    if swap_after:
        h = aux_swap(h, state, plan)
    return h


def attention_block_fwd(x, p: Params, heads: int) -> Var:
    x = ag.as_var(x)
    h = ag.add(x, ag.mha(_norm(x, p, "norm1"), sub(p, "attn"), heads))
    return ag.add(h, mlp_fwd(_norm(h, p, "norm2"), sub(p, "mlp")))


@dataclass(frozen=True)
class StageSettings:
    """How a hybrid stage runs: folding, aux tokens and scan execution."""

    swap: bool = True
    aux_init: str = "mean"
    discard: str = "after_first_attn"
    B1: Optional[int] = None  # None: no folding
    lanes: int = 32
    workers: Optional[int] = None
    training: bool = True

    @property
    def uses_aux(self) -> bool:
        # Without swapping, mean-initialized tokens would be the plain
        # baseline plus a leak of global context; only learnable tokens
        # are kept as an ablation.
        return self.swap or self.aux_init == "learnable"


def stage_fwd(x, p: Params, n_mamba: int, n_attn: int, heads: int,
              settings: StageSettings) -> Var:
    """Mamba blocks (folded) followed by attention blocks on a [B, D, T] sequence."""
    x = ag.as_var(x)
    B = x.shape[0]
    state = AuxState(discard_policy=settings.discard)
    if settings.uses_aux:
        learn = None
        if settings.aux_init == "learnable":
            learn = (p["aux.head"], p["aux.tail"])
        x, state = aux_init(x, state, learnable=learn)
    plan = FoldPlan(B, settings.B1 or B, x.shape[2])
    if plan.B2 > 1:
        x = ag.fold(x, plan)
    for i in range(n_mamba):
        swap = settings.swap and state.present and i < n_mamba - 1
        x = mamba_block_fwd(x, sub(p, f"mamba{i}"), plan, state, swap,
                            settings.lanes, settings.workers, settings.training)
    if plan.B2 > 1:
        x = ag.unfold(x, plan)
        plan = FoldPlan.identity(B, plan.L_seg)

    def discard(x, plan, state):
        x, plan = aux_discard(x, state, plan)
        return x, plan, replace(state, present=False)

    if state.present and settings.discard == "before_attn":
        x, plan, state = discard(x, plan, state)
    for j in range(n_attn):
        x = attention_block_fwd(x, sub(p, f"attn{j}"), heads)
        if j == 0 and state.present and settings.discard == "after_first_attn":
            x, plan, state = discard(x, plan, state)
    if state.present:
        x, plan, state = discard(x, plan, state)
    return x


def init_stage(rng, d: int, state_dim: int, n_mamba: int, n_attn: int, kernel: int = 3,
               aux_init: str = "mean") -> dict:
    p = {}
    for i in range(n_mamba):
        p.update(_prefixed(f"mamba{i}", init_mamba_block(rng, d, state_dim, kernel)))
    for j in range(n_attn):
        p.update(_prefixed(f"attn{j}", init_attention_block(rng, d)))
    if aux_init == "learnable":
        p["aux.head"] = 0.02 * rng.standard_normal(d)
        p["aux.tail"] = 0.02 * rng.standard_normal(d)
    return p
