"""Desk-scale hybrid vision model, ERF maps and a toy sequence task.

The backbone has four stages: a stride-4 stem followed by conv stages at
widths D and 2D, then two hybrid stages (Mamba blocks, then attention
blocks) at 4D and 8D, then pooling and a linear classifier. Hybrid stages
fold the batch at entry, stay folded across all Mamba blocks and unfold
before attention.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Var
from .blocks import (AUX_INITS, DISCARD_POLICIES, StageSettings, init_linear, init_norm,
                     init_stage, stage_fwd, sub)
from .fold import FoldWarning, TuneLUT, closest_divisor, lut_lookup
from .tensor import get_dtype

CUTS = ("stage3_mamba", "full")


class TrainingDiverged(RuntimeError):
    pass


# --- config ---------------------------------------------------------------

def parse_fold_policy(policy: str) -> tuple[str, Optional[int]]:
    if policy in ("off", "adaptive"):
        return policy, None
    if policy.startswith("fixed:"):
        try:
            b1 = int(policy.split(":", 1)[1])
        except ValueError:
            b1 = 0
        if b1 >= 1:
            return "fixed", b1
    raise ValueError(f"fold policy must be off, fixed:<B1> or adaptive, got {policy!r}")


def resolve_b1(policy: str, B: int, D: int, S: int, L: int, lut: Optional[TuneLUT]) -> int:
    kind, b1 = parse_fold_policy(policy)
    if kind == "off":
        return B
    if kind == "fixed":
        return closest_divisor(B, b1)
    if lut is None or not lut.cells:
        warnings.warn("adaptive folding without a LUT; folding disabled", FoldWarning, stacklevel=3)
        return B
    return lut_lookup(lut, B, D, S, L)


@dataclass
class ModelConfig:
    image_size: int = 32
    in_channels: int = 3
    width: int = 16
    depths: tuple[int, int, int, int] = (1, 1, 2, 2)
    state_dim: int = 4
    heads: int = 2
    kernel: int = 3
    classes: int = 10
    lanes: int = 32
    fold: str = "off"
    swap: bool = True
    aux_init: str = "mean"
    discard: str = "after_first_attn"
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if len(self.depths) != 4 or min(self.depths) < 0:
            raise ValueError(f"depths must be four non-negative ints, got {self.depths}")
        for n in self.depths[2:]:
            if n < 2 or n % 2:
                raise ValueError(f"hybrid stage depths must be even and >= 2, got {self.depths}")
        for d in (4 * self.width, 8 * self.width):
            if d % self.heads:
                raise ValueError(f"width {d} not divisible by {self.heads} heads")
        if self.aux_init not in AUX_INITS:
            raise ValueError(f"aux_init must be one of {AUX_INITS}")
        if self.discard not in DISCARD_POLICIES:
            raise ValueError(f"discard must be one of {DISCARD_POLICIES}")
        parse_fold_policy(self.fold)
        if self.kernel < 1 or self.state_dim < 1 or self.lanes < 1:
            raise ValueError("kernel, state_dim and lanes must be >= 1")
        for stage, div in ((3, 16), (4, 32)):
            T = (self.image_size // div) ** 2
            L = T + 2 if self.swap or self.aux_init == "learnable" else T
            if L <= self.kernel:
                warnings.warn(f"stage {stage} segments ({L} tokens) are no longer than the "
                              f"conv kernel ({self.kernel})", stacklevel=2)

    def stage_width(self, stage: int) -> int:
        return self.width * 2 ** (stage - 1)


def dumps_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def loads_config(cls, text: str):
    """Parse ``key = value`` lines into dataclass ``cls``; '#' starts a comment."""
    types = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {n}: unknown key {key!r}")
        default = types[key].default
        if isinstance(default, bool):
            if val.lower() not in ("true", "false", "on", "off", "1", "0"):
                raise ValueError(f"line {n}: {key} must be boolean")
            kwargs[key] = val.lower() in ("true", "on", "1")
        elif isinstance(default, int):
            kwargs[key] = int(val)
        elif isinstance(default, float):
            kwargs[key] = float(val)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(int(x) for x in val.split(","))
        else:
            kwargs[key] = val
    return cls(**kwargs)


# --- vision model ---------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    lut: Optional[TuneLUT] = None
    workers: Optional[int] = None

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def _conv_params(rng, c_out, c_in, k):
    fan = c_in * k * k
    bound = 1.0 / math.sqrt(fan)
    return {"w": rng.uniform(-bound, bound, (c_out, c_in, k, k)),
            "b": rng.uniform(-bound, bound, c_out)}


def _put(p: dict, prefix: str, items: dict) -> None:
    p.update({f"{prefix}.{k}": v for k, v in items.items()})


def build(config: ModelConfig, lut: Optional[TuneLUT] = None, workers: Optional[int] = None) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    D = config.width
    n1, n2, n3, n4 = config.depths
    p: dict[str, np.ndarray] = {}
    _put(p, "stem", _conv_params(rng, D, config.in_channels, 4))
    _put(p, "stem_norm", init_norm(D))
    for stage, n in ((1, n1), (2, n2)):
        c = config.stage_width(stage)
        for i in range(n):
            for j in (1, 2):
                _put(p, f"stage{stage}.block{i}.conv{j}", _conv_params(rng, c, c, 3))
                _put(p, f"stage{stage}.block{i}.norm{j}", init_norm(c))
    for stage in (2, 3, 4):
        _put(p, f"down{stage}", _conv_params(rng, config.stage_width(stage), config.stage_width(stage - 1), 3))
        _put(p, f"down{stage}_norm", init_norm(config.stage_width(stage)))
    for stage, n in ((3, n3), (4, n4)):
        _put(p, f"stage{stage}", init_stage(rng, config.stage_width(stage), config.state_dim,
                                            n // 2, n // 2, config.kernel, config.aux_init))
    _put(p, "head_norm", init_norm(8 * D))
    _put(p, "head", init_linear(rng, config.classes, 8 * D))
    return Model(config, p, lut, workers)


def _norm(x, P, name):
    return ag.layernorm(x, P[f"{name}.g"], P[f"{name}.b"])


def _conv_block(x, P):
    h = _norm(ag.conv2d(x, P["conv1.w"], P["conv1.b"], 1, 1), P, "norm1")
    h = _norm(ag.conv2d(ag.silu(h), P["conv2.w"], P["conv2.b"], 1, 1), P, "norm2")
    return ag.add(x, h)


def _backbone(model: Model, x: Var, P: dict, training: bool, cut: str = "full") -> Var:
    """Feature map [N, C, h, w] at ``cut``."""
    cfg = model.config
    x = _norm(ag.conv2d(x, P["stem.w"], P["stem.b"], 4, 0), P, "stem_norm")
    for i in range(cfg.depths[0]):
        x = _conv_block(x, sub(P, f"stage1.block{i}"))
    for stage in (2, 3, 4):
        x = _norm(ag.conv2d(x, P[f"down{stage}.w"], P[f"down{stage}.b"], 2, 1), P, f"down{stage}_norm")
        if stage == 2:
            for i in range(cfg.depths[1]):
                x = _conv_block(x, sub(P, f"stage2.block{i}"))
            continue
        if stage == 3 and cut == "stage3_in":  # receptive-field probe for tests
            return x
        N, C, h, w = x.shape
        n = cfg.depths[stage - 1] // 2
        L = h * w + (2 if cfg.swap or cfg.aux_init == "learnable" else 0)
        settings = StageSettings(
            swap=cfg.swap, aux_init=cfg.aux_init, discard=cfg.discard,
            B1=resolve_b1(cfg.fold, N, C, cfg.state_dim, L, model.lut),
            lanes=cfg.lanes, workers=model.workers, training=training)
        stop = stage == 3 and cut == "stage3_mamba"
        seq = stage_fwd(ag.reshape(x, (N, C, h * w)), sub(P, f"stage{stage}"), n,
                        0 if stop else n, cfg.heads, settings)
        x = ag.reshape(seq, (N, C, h, w))
        if stop:
            return x
    return x


def _vars(params: dict, requires_grad: bool) -> dict[str, Var]:
    dt = get_dtype()
    return {k: Var(v.astype(dt, copy=False), requires_grad) for k, v in params.items()}


def _logits(model: Model, x: Var, P: dict, training: bool) -> Var:
    feats = _backbone(model, x, P, training)
    N, C = feats.shape[:2]
    pooled = ag.mean(ag.reshape(_norm(feats, P, "head_norm"), (N, C, -1)), axis=2)
    return ag.linear(pooled, P["head.w"], P["head.b"])


def _check_images(model: Model, images) -> np.ndarray:
    cfg = model.config
    x = np.asarray(images, dtype=get_dtype())
    want = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ValueError(f"images must be [N, {want[0]}, {want[1]}, {want[2]}], got {x.shape}")
    return x


def forward(model: Model, images, mode: str = "infer") -> np.ndarray:
    """Class logits [N, classes]. ``mode`` only controls hidden-state retention."""
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    x = _check_images(model, images)
    with ag.no_grad():
        return _logits(model, Var(x), _vars(model.params, False), mode == "train").value


def loss_and_grads(model: Model, images, labels) -> tuple[float, dict[str, np.ndarray]]:
    x = _check_images(model, images)
    P = _vars(model.params, True)
    loss = ag.cross_entropy(_logits(model, Var(x), P, True), labels)
    ag.backward(loss)
    return float(loss.value), {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                               for k, v in P.items()}


def erf_map(model: Model, probe, cut: str = "stage3_mamba") -> np.ndarray:
    """Mean squared input gradient of the centre output feature, summed over channels.

    The centre feature is the channel sum at the middle spatial position of
    the feature map at ``cut``. Returns an [H, W] heat map.
    """
    if cut not in CUTS:
        raise ValueError(f"cut must be one of {CUTS}, got {cut!r}")
    x = Var(_check_images(model, probe), requires_grad=True)
    feats = _backbone(model, x, _vars(model.params, False), True, cut)
    N, C, h, w = feats.shape
    probe_w = np.zeros(feats.shape)
    probe_w[:, :, h // 2, w // 2] = 1.0
    ag.backward(ag.weighted_sum(feats, probe_w))
    g = np.zeros(x.shape) if x.grad is None else x.grad
    return (g ** 2).sum(axis=1).mean(axis=0)


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    for k, g in grads.items():
        params[k] = params[k] - lr * g


# --- toy sequence task ----------------------------------------------------

@dataclass
class LastPatchCueTask:
    """Noise patches on a grid; the class is encoded only in one cue patch.

    Patches are [patch_dim] vectors in row-major scan order. The cue patch
    (default: the last one) carries ``amplitude`` times a class prototype.
    """

    grid: int = 4
    cue_position: Optional[int] = None
    classes: int = 2
    seed: int = 0
    patch_dim: int = 8
    amplitude: float = 3.0
    noise: float = 1.0
    prototypes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.cue_position is None:
            self.cue_position = self.grid * self.grid - 1
        if not 0 <= self.cue_position < self.grid * self.grid:
            raise ValueError("cue_position outside the grid")
        protos = np.random.default_rng(self.seed).standard_normal((self.classes, self.patch_dim))
        self.prototypes = protos / np.linalg.norm(protos, axis=1, keepdims=True)

    @property
    def length(self) -> int:
        return self.grid * self.grid

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, self.classes, n)
        x = self.noise * rng.standard_normal((n, self.patch_dim, self.length))
        x[:, :, self.cue_position] += self.amplitude * self.prototypes[labels]
        return x, labels


@dataclass
class ToyConfig:
    patch_dim: int = 8
    width: int = 16
    state_dim: int = 4
    blocks: int = 2
    classes: int = 2
    kernel: int = 3
    lanes: int = 32
    swap: bool = True
    aux_init: str = "mean"
    seed: int = 0


@dataclass
class SequenceClassifier:
    """Mamba-only stack that classifies from the first patch token."""

    config: ToyConfig
    params: dict[str, np.ndarray]
    workers: Optional[int] = None

    @classmethod
    def build(cls, config: ToyConfig, workers: Optional[int] = None) -> "SequenceClassifier":
        if config.blocks < 1:
            raise ValueError("need at least one Mamba block")
        if config.aux_init not in AUX_INITS:
            raise ValueError(f"aux_init must be one of {AUX_INITS}")
        rng = np.random.default_rng(config.seed)
        p: dict[str, np.ndarray] = {}
        _put(p, "embed", init_linear(rng, config.width, config.patch_dim))
        _put(p, "stage", init_stage(rng, config.width, config.state_dim, config.blocks, 0,
                                    config.kernel, config.aux_init))
        _put(p, "head_norm", init_norm(config.width))
        _put(p, "head", init_linear(rng, config.classes, config.width))
        return cls(config, p, workers)

    def logits_var(self, tokens, P: dict, training: bool = True, B1: Optional[int] = None) -> Var:
        cfg = self.config
        x = ag.linear(Var(np.asarray(tokens, dtype=get_dtype())), P["embed.w"], P["embed.b"])
        settings = StageSettings(swap=cfg.swap, aux_init=cfg.aux_init, B1=B1, lanes=cfg.lanes,
                                 workers=self.workers, training=training)
        seq = stage_fwd(x, sub(P, "stage"), cfg.blocks, 0, 1, settings)
        first = ag.reshape(ag.take_seq(seq, [0]), (seq.shape[0], cfg.width, 1))
        first = ag.reshape(_norm(first, P, "head_norm"), (seq.shape[0], cfg.width))
        return ag.linear(first, P["head.w"], P["head.b"])

    def predict(self, tokens) -> np.ndarray:
        with ag.no_grad():
            return self.logits_var(tokens, _vars(self.params, False), training=False).value

    def loss_and_grads(self, tokens, labels) -> tuple[float, float, dict[str, np.ndarray]]:
        P = _vars(self.params, True)
        logits = self.logits_var(tokens, P)
        loss = ag.cross_entropy(logits, labels)
        ag.backward(loss)
        acc = float((logits.value.argmax(axis=1) == labels).mean())
        return float(loss.value), acc, {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                                        for k, v in P.items()}


def train_toy(model: SequenceClassifier, task: LastPatchCueTask, steps: int, lr: float = 0.1,
              batch: int = 32, eval_size: int = 2000, eval_every: int = 100,
              seed: int = 0, target_acc: Optional[float] = None) -> list[dict]:
    """Plain SGD on cross-entropy. Returns one record per step (step 0 = init).

    Records hold the batch loss and accuracy; ``eval_acc`` is filled in on
    evaluation steps (every ``eval_every`` steps and the last one). With
    ``target_acc`` set, training stops at the first evaluation reaching it.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    rng = np.random.default_rng(seed)
    eval_x, eval_y = task.sample(eval_size, np.random.default_rng([seed, 1]))

    def evaluate():
        return float((model.predict(eval_x).argmax(axis=1) == eval_y).mean())

    trace = []
    x, y = task.sample(batch, rng)
    loss, acc, grads = model.loss_and_grads(x, y)
    trace.append({"step": 0, "loss": loss, "accuracy": acc, "eval_acc": evaluate()})
    for step in range(1, steps + 1):
        sgd_step(model.params, grads, lr)
        bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
        if bad:
            raise TrainingDiverged(f"non-finite parameters {bad[:3]} at step {step} (lr={lr})")
        x, y = task.sample(batch, rng)
        try:
            loss, acc, grads = model.loss_and_grads(x, y)
        except ValueError as exc:  # e.g. step sizes collapsing to zero
            raise TrainingDiverged(f"forward broke down at step {step} (lr={lr}): {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step} (lr={lr}, batch={batch})")
        rec = {"step": step, "loss": loss, "accuracy": acc, "eval_acc": None}
        if step % eval_every == 0 or step == steps:
            rec["eval_acc"] = evaluate()
        trace.append(rec)
        if target_acc is not None and rec["eval_acc"] is not None and rec["eval_acc"] >= target_acc:
            break
    return trace
