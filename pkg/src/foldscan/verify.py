"""Verification suites: each check compares an implementation to an oracle.

Oracles used here are independent of the code they check: the sequential
scan for the parallel executor, per-row scans for folded scans, a scalar
loop for the folded conv, central finite differences for every backward,
and brute-force enumeration for the divisor rule.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import autograd as ag
from . import layers as L
from .blocks import StageSettings, init_stage, stage_fwd
from .fold import FoldPlan, closest_divisor, divisors, fold, folded_inputs, unfold
from .gradcheck import directional_fd, numeric_grad, rel_error, unit_direction
from .scan import ScanInputs, random_inputs, scan_backward, scan_parallel, scan_sequential
from .tensor import precision

SUITES = ("scan", "fold", "conv", "grad", "erf", "divisor")
GRAD_ATOL = 1e-6  # gradients below this are compared absolutely


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    max_error: float
    tolerance: float
    cases: int

    def to_dict(self) -> dict:
        return asdict(self)


# --- instance generators --------------------------------------------------

def scan_instances(n: int, seed: int, max_B: int = 64, max_D: int = 16,
                   states=(1, 4, 8), max_T: int = 64):
    """Random (B, D, S, T) shapes with B log-uniform so that folds vary."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        B = int(np.clip(round(2 ** rng.uniform(0, math.log2(max_B))), 1, max_B))
        yield (B, int(rng.integers(1, max_D + 1)), int(rng.choice(states)),
               int(rng.integers(1, max_T + 1)), rng)


# --- scan -----------------------------------------------------------------

def check_parallel_vs_sequential(n: int = 200, seed: int = 0, lanes_set=(1, 2, 7, 32, 64),
                                 workers: Optional[int] = None, fault: bool = False) -> list[CheckResult]:
    errs = {lanes: 0.0 for lanes in lanes_set}
    lane1_exact = True
    for B, D, S, T, rng in scan_instances(n, seed):
        mask = rng.random(T) < 0.1
        mask[0] = True
        inp = random_inputs(rng, B, D, S, T, mask)
        ref = scan_sequential(inp, workers=workers).y
        for lanes in lanes_set:
            y = scan_parallel(inp, lanes=lanes, workers=workers).y
            if fault:
                y = y + 1e-6 * np.abs(ref).max()
            errs[lanes] = max(errs[lanes], rel_error(y, ref))
            if lanes == 1 and not np.array_equal(y, ref):
                lane1_exact = False
    out = [CheckResult("scan", f"parallel_vs_sequential[lanes={k}]", v <= 1e-12, v, 1e-12, n)
           for k, v in errs.items()]
    if 1 in lanes_set:
        out.append(CheckResult("scan", "lanes=1 bit-exact", lane1_exact, 0.0 if lane1_exact else 1.0, 0.0, n))
    return out


def check_reset_equivalence(n: int = 200, seed: int = 1, lanes: int = 32,
                            workers: Optional[int] = None, fault: bool = False) -> list[CheckResult]:
    """Folded scan with periodic resets, unfolded, vs. the unfolded scan."""
    exact, worst, cases = True, 0.0, 0
    for B, D, S, T, rng in scan_instances(n, seed):
        base = random_inputs(rng, B, D, S, T)
        ref_seq = scan_sequential(base, workers=workers).y
        ref_par = scan_parallel(base, lanes=lanes, workers=workers).y
        for B1 in divisors(B):
            plan = FoldPlan(B, B1, T)
            finp = folded_inputs(base, plan)
            y_seq = unfold(scan_sequential(finp, workers=workers).y, plan)
            y_par = unfold(scan_parallel(finp, lanes=lanes, workers=workers).y, plan)
            if fault:
                y_seq = y_seq + 1e-6
            exact &= bool(np.array_equal(y_seq, ref_seq))
            worst = max(worst, rel_error(y_par, ref_par), rel_error(y_par, ref_seq))
            cases += 1
    return [CheckResult("scan", "reset equivalence (sequential, bit-exact)", exact,
                        0.0 if exact else 1.0, 0.0, cases),
            CheckResult("scan", "reset equivalence (parallel)", worst <= 1e-12, worst, 1e-12, cases)]


# --- fold -----------------------------------------------------------------

def check_fold_roundtrip(n: int = 100, seed: int = 2) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    ok_round, ok_once = True, True
    for _ in range(n):
        B = int(rng.integers(1, 33))
        D, Ls = int(rng.integers(1, 5)), int(rng.integers(1, 10))
        B1 = int(rng.choice(divisors(B)))
        plan = FoldPlan(B, B1, Ls)
        z = rng.standard_normal((B, D, Ls))
        ok_round &= bool(np.array_equal(unfold(fold(z, plan), plan), z))
        ids = np.arange(z.size, dtype=float).reshape(z.shape)  # sentinel: each index once
        f = fold(ids, plan)
        ok_once &= bool(np.array_equal(np.sort(f.ravel()), ids.ravel()))
        b1, d, t = rng.integers(0, plan.B1), rng.integers(0, D), rng.integers(0, plan.folded_T)
        ok_once &= bool(f[b1, d, t] == ids[b1 * plan.B2 + t // Ls, d, t % Ls])
    return [CheckResult("fold", "unfold(fold(z)) bit-exact", ok_round, 0.0 if ok_round else 1.0, 0.0, n),
            CheckResult("fold", "fold writes every index once", ok_once, 0.0 if ok_once else 1.0, 0.0, n)]


# --- conv -----------------------------------------------------------------

def conv_reference(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Scalar-loop causal depthwise conv of an unfolded [B, D, T] tensor."""
    B, D, T = x.shape
    K = kernel.shape[1]
    out = np.zeros_like(x)
    for b in range(B):
        for d in range(D):
            for t in range(T):
                acc = 0.0
                for k in range(K):
                    src = t - K + 1 + k
                    acc += kernel[d, k] * (x[b, d, src] if src >= 0 else 0.0)
                out[b, d, t] = acc
    return out


def check_conv_boundary(n: int = 100, seed: int = 3, fault: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    exact, long_kernel_cases = True, 0
    for i in range(n):
        B = int(rng.integers(1, 9))
        D, Ls = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        K = int(rng.choice([1, 2, 3, 5]))
        if i % 4 == 0:
            K = Ls + int(rng.integers(0, 3))  # K >= L_seg
        long_kernel_cases += K >= Ls
        plan = FoldPlan(B, int(rng.choice(divisors(B))), Ls)
        z = rng.standard_normal((B, D, Ls))
        kern = rng.standard_normal((D, K))
        got = L.dwconv1d_folded(np.array(fold(z, plan)), kern, Ls)
        want = np.array(fold(conv_reference(z, kern), plan))
        if fault:
            got = got + 1e-9
        exact &= bool(np.array_equal(got, want))
    return [CheckResult("conv", f"folded conv == fold(per-row conv) ({long_kernel_cases} with K>=L)",
                        exact, 0.0 if exact else 1.0, 0.0, n)]


# --- gradients ------------------------------------------------------------

def _fd_vs_analytic(f, arrays: dict, analytic: dict, eps: float) -> float:
    worst = 0.0
    for name, arr in arrays.items():
        def fk(v, name=name):
            return f({**arrays, name: v})
        worst = max(worst, rel_error(numeric_grad(fk, arr, eps), analytic[name], GRAD_ATOL))
    return worst


def scan_grad_error(rng, eps: float = 1e-5) -> float:
    B, D, S, T = (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
                  int(rng.integers(1, 5)), int(rng.integers(1, 10)))
    mask = rng.random(T) < 0.25
    mask[0] = True
    inp = random_inputs(rng, B, D, S, T, mask)
    w = rng.standard_normal((B, D, T))
    names = ("x", "delta", "a_log", "b_gate", "c_gate")
    arrays = {k: np.array(getattr(inp, k)) for k in names}

    def f(a):
        return float((scan_sequential(ScanInputs(**a, reset_mask=mask)).y * w).sum())

    saved = scan_sequential(inp, training=True)
    grads = scan_backward(inp, w, saved)._asdict()
    return _fd_vs_analytic(f, arrays, grads, eps)


def _layer_case(kind: str, rng):
    """(forward f(arrays)->array, arrays, backward(dy)->dict) for one random case."""
    B, T = int(rng.integers(1, 3)), int(rng.integers(1, 6))
    if kind == "linear":
        di, do = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        arrays = {"x": rng.standard_normal((B, di, T)), "w": rng.standard_normal((do, di)),
                  "b": rng.standard_normal(do)}
        fwd = lambda a: L.linear_fwd(a["x"], a["w"], a["b"])
        bwd = lambda dy: dict(zip("xwb", L.linear_bwd(dy, arrays["x"], arrays["w"])))
    elif kind == "layernorm":
        D = int(rng.integers(2, 6))
        arrays = {"x": rng.standard_normal((B, D, T)), "g": rng.standard_normal(D),
                  "b": rng.standard_normal(D)}
        fwd = lambda a: L.layernorm_fwd(a["x"], a["g"], a["b"])[0]
        bwd = lambda dy: dict(zip("xgb", L.layernorm_bwd(dy, L.layernorm_fwd(arrays["x"], arrays["g"], arrays["b"])[1])))
    elif kind == "silu":
        arrays = {"x": 3 * rng.standard_normal((B, 3, T))}
        fwd = lambda a: L.silu_fwd(a["x"])
        bwd = lambda dy: {"x": L.silu_bwd(dy, arrays["x"])}
    elif kind == "conv":
        Bb = int(rng.integers(1, 5))
        Ls, D, K = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.choice([1, 2, 3, 5]))
        B1 = int(rng.choice(divisors(Bb)))
        seg = Ls
        arrays = {"x": rng.standard_normal((B1, D, (Bb // B1) * Ls)), "k": rng.standard_normal((D, K)),
                  "b": rng.standard_normal(D)}
        fwd = lambda a: L.dwconv1d_folded(a["x"], a["k"], seg, a["b"])
        bwd = lambda dy: dict(zip("xkb", L.dwconv1d_folded_bwd(dy, arrays["x"], arrays["k"], seg)))
    elif kind == "attention":
        H = int(rng.integers(1, 3))
        D = H * int(rng.integers(1, 3))
        arrays = {"x": rng.standard_normal((B, D, T))}
        for n in "qkvo":
            arrays[f"w{n}"] = rng.standard_normal((D, D)) / np.sqrt(D)
            arrays[f"b{n}"] = 0.1 * rng.standard_normal(D)
        fwd = lambda a: L.mha_fwd(a["x"], a, H)[0]

        def bwd(dy):
            dx, g = L.mha_bwd(dy, L.mha_fwd(arrays["x"], arrays, H)[1], arrays)
            return {"x": dx, **g}
    else:
        raise ValueError(kind)
    return fwd, arrays, bwd


LAYER_KINDS = ("linear", "layernorm", "silu", "conv", "attention")


def layer_grad_error(kind: str, rng, eps: float = 1e-5) -> float:
    fwd, arrays, bwd = _layer_case(kind, rng)
    w = rng.standard_normal(fwd(arrays).shape)
    return _fd_vs_analytic(lambda a: float((fwd(a) * w).sum()), arrays, bwd(w), eps)


def tiny_model_grad_error(seed: int, eps: float = 1e-5) -> float:
    """Directional finite difference of the full model loss vs. the analytic gradient."""
    from .model import ModelConfig, _logits, _vars, build, loss_and_grads
    import warnings
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = build(ModelConfig(width=4, state_dim=2, heads=2, depths=(1, 1, 4, 2), classes=3,
                                  fold="fixed:2", seed=seed))
    images = rng.standard_normal((2, 3, 32, 32))
    labels = rng.integers(0, 3, 2)
    _, grads = loss_and_grads(model, images, labels)
    direction = unit_direction(rng, model.params)

    def f(params):
        with ag.no_grad():
            logits = _logits(model, ag.Var(images), _vars(params, False), False)
        return float(ag.cross_entropy(logits, labels).value)

    fd = directional_fd(f, model.params, direction, eps)
    an = sum(float((grads[k] * direction[k]).sum()) for k in grads)
    return rel_error(fd, an, GRAD_ATOL)


def check_gradients(n: int = 50, seed: int = 4, model_cases: Optional[int] = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    with precision("f64"):
        e = max(scan_grad_error(rng) for _ in range(n))
        out.append(CheckResult("grad", "scan backward vs FD", e < 1e-4, e, 1e-4, n))
        for kind in LAYER_KINDS:
            e = max(layer_grad_error(kind, rng) for _ in range(n))
            out.append(CheckResult("grad", f"{kind} backward vs FD", e < 1e-4, e, 1e-4, n))
        m = n if model_cases is None else model_cases
        e = max(tiny_model_grad_error(seed * 1000 + i) for i in range(m))
        out.append(CheckResult("grad", "tiny model backward vs directional FD", e < 1e-4, e, 1e-4, m))
    return out


# --- information flow -----------------------------------------------------

def two_block_stack(x: np.ndarray, params: dict, swap: bool, aux_init: str = "mean"):
    settings = StageSettings(swap=swap, aux_init=aux_init, training=True)
    with ag.no_grad():
        return stage_fwd(ag.Var(x), params, 2, 0, 1, settings).value


def first_token_sensitivity(seed: int, swap: bool, D: int = 8, S: int = 4, T: int = 9,
                            eps: float = 1e-5, aux_init: str = "mean") -> np.ndarray:
    """Finite-difference d(sum_d y[:, d, 0]) / d x[:, :, u] for every u, shape [T]."""
    rng = np.random.default_rng(seed)
    params = init_stage(rng, D, S, 2, 0, aux_init=aux_init)
    x = rng.standard_normal((1, D, T))
    sens = np.zeros(T)
    for u in range(T):
        g = numeric_grad(lambda v: float(two_block_stack(
            np.concatenate([x[:, :, :u], v, x[:, :, u + 1:]], axis=2), params, swap, aux_init)[:, :, 0].sum()),
            x[:, :, u:u + 1], eps)
        sens[u] = np.abs(g).max()
    return sens


def check_information_flow(seeds: int = 20) -> list[CheckResult]:
    on = [first_token_sensitivity(s, True) for s in range(seeds)]
    off = [first_token_sensitivity(s, False) for s in range(seeds)]
    frac = float(np.mean([v[-1] > 1e-8 for v in on]))
    leak = float(max(v[1:].max() for v in off))
    return [CheckResult("erf", "swap: |dy_1/dx_T| > 1e-8", frac >= 0.95, 1.0 - frac, 0.05, seeds),
            CheckResult("erf", "no swap: dy_1/dx_u == 0 for u > 1", leak == 0.0, leak, 0.0, seeds)]


# --- divisor --------------------------------------------------------------

def check_divisor(limit: int = 10_000, seed: int = 5, fault: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    bad = 0
    for a in range(1, limit + 1):
        cand = np.arange(1, a + 1)
        divs = cand[a % cand == 0]
        bs = [rng.uniform(0, a + 1), a * rng.random(), float(rng.integers(0, a + 2))]
        if len(divs) > 1:
            i = rng.integers(0, len(divs) - 1)
            bs.append((divs[i] + divs[i + 1]) / 2)  # exact tie
        for b in bs:
            dist = np.abs(divs - b)
            want = int(divs[dist == dist.min()].min())
            got = closest_divisor(a, b) + (1 if fault and a == limit else 0)
            bad += got != want or a % got != 0
    return [CheckResult("divisor", f"closest_divisor exhaustive a<={limit}", bad == 0, float(bad), 0.0, limit)]


# --- driver ---------------------------------------------------------------

def run_suites(scopes: Iterable[str] = SUITES, workers: Optional[int] = None, seed: int = 0,
               fault: bool = False, quick: bool = False) -> list[CheckResult]:
    """Run the selected suites; ``quick`` shrinks instance counts."""
    scopes = list(scopes)
    unknown = set(scopes) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown verify scope(s): {sorted(unknown)}")
    k = 0.2 if quick else 1.0
    n = lambda full: max(2, int(full * k))
    runners: dict[str, Callable[[], list[CheckResult]]] = {
        "scan": lambda: (check_parallel_vs_sequential(n(200), seed, workers=workers, fault=fault)
                         + check_reset_equivalence(n(200), seed + 1, workers=workers, fault=fault)),
        "fold": lambda: check_fold_roundtrip(n(100), seed + 2),
        "conv": lambda: check_conv_boundary(n(100), seed + 3, fault=fault),
        "grad": lambda: check_gradients(n(50), seed + 4),
        "erf": lambda: check_information_flow(n(20)),
        "divisor": lambda: check_divisor(2_000 if quick else 10_000, seed + 5, fault=fault),
    }
    results = []
    with precision("f64"):
        for s in SUITES:
            if s in scopes:
                results.extend(runners[s]())
    return results
