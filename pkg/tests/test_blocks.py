import numpy as np
import pytest

from foldscan import autograd as ag
from foldscan.blocks import (AuxState, StageSettings, aux_discard, aux_init, aux_swap,
                             init_mamba_block, init_mixer, init_stage, mamba_block_fwd, mixer_fwd,
                             stage_fwd, sub)
from foldscan.fold import FoldPlan, fold, unfold
from foldscan.layers import linear_fwd, silu_fwd
from foldscan.verify import first_token_sensitivity


def val(v):
    return v.value if isinstance(v, ag.Var) else v


def test_aux_init_examples():
    x, state = aux_init(np.array([[[2.0, 4.0]]]))
    assert val(x).ravel().tolist() == [3, 2, 4, 3]
    assert state.present
    c, _ = aux_init(np.full((1, 2, 3), 5.0))
    assert np.array_equal(val(c), np.full((1, 2, 5), 5.0))
    rows, _ = aux_init(np.array([[[1.0, 3.0]], [[10.0, 20.0]]]))
    assert val(rows)[:, 0, 0].tolist() == [2.0, 15.0]


def test_aux_init_twice_rejected():
    with pytest.raises(ValueError):
        aux_init(np.ones((1, 1, 2)), AuxState(present=True))


def test_aux_swap_examples():
    state = AuxState(present=True)
    y = aux_swap(np.array([[[9.0, 1, 2, 8]]]), state, FoldPlan.identity(1, 4))
    assert val(y).ravel().tolist() == [8, 1, 2, 9]
    twice = aux_swap(y, state, FoldPlan.identity(1, 4))
    assert val(twice).ravel().tolist() == [9, 1, 2, 8]
    folded = np.arange(8.0).reshape(1, 1, 8)
    out = aux_swap(folded, state, FoldPlan(2, 1, 4))
    assert val(out).ravel().tolist() == [3, 1, 2, 0, 7, 5, 6, 4]
    with pytest.raises(ValueError):
        aux_swap(folded, AuxState(), FoldPlan(2, 1, 4))


def test_aux_swap_touches_only_aux(rng):
    plan = FoldPlan(6, 2, 5)
    x = rng.standard_normal((2, 3, plan.folded_T))
    out = val(aux_swap(x, AuxState(present=True), plan))
    patch = np.ones(plan.folded_T, bool)
    patch[0::5] = patch[4::5] = False
    assert np.array_equal(out[:, :, patch], x[:, :, patch])


def test_aux_discard_examples(rng):
    state = AuxState(present=True)
    x, plan = aux_discard(np.array([[[9.0, 1, 2, 8]]]), state, FoldPlan.identity(1, 4))
    assert val(x).ravel().tolist() == [1, 2] and plan.L_seg == 2
    plan = FoldPlan(6, 2, 5)
    x, new = aux_discard(rng.standard_normal((2, 3, plan.folded_T)), state, plan)
    assert new.folded_T == plan.folded_T - 2 * plan.B2 == val(x).shape[2]
    z = rng.standard_normal((3, 2, 4))
    again, _ = aux_init(val(aux_discard(aux_init(z)[0], state, FoldPlan.identity(3, 6))[0]))
    assert val(again).shape == (3, 2, 6)


def _identity_mixer(D, S):
    p = init_mixer(np.random.default_rng(0), D, S)
    for branch in ("ssm", "gate"):
        p[f"{branch}_in.w"], p[f"{branch}_in.b"] = np.eye(D), np.zeros(D)
        p[f"{branch}_conv.k"] = np.tile([0.0, 0.0, 1.0], (D, 1))
        p[f"{branch}_conv.b"] = np.zeros(D)
    p["C.w"] = np.zeros((S, D))
    return p


def test_mixer_silenced_ssm(rng):
    D, S = 3, 2
    p = _identity_mixer(D, S)
    x = rng.standard_normal((2, D, 5))
    y = val(mixer_fwd(x, p, FoldPlan.identity(2, 5)))
    want = linear_fwd(np.concatenate([np.zeros_like(x), silu_fwd(x)], axis=1), p["out.w"], p["out.b"])
    np.testing.assert_allclose(y, want, rtol=1e-14, atol=1e-15)


def test_mixer_shape_and_plan_check(rng):
    p = init_mixer(rng, 4, 3)
    x = rng.standard_normal((2, 4, 7))
    assert val(mixer_fwd(x, p, FoldPlan.identity(2, 7))).shape == x.shape
    with pytest.raises(ValueError):
        mixer_fwd(x, p, FoldPlan(2, 1, 7))


@pytest.mark.parametrize("B, B1", [(4, 1), (4, 2), (6, 3), (6, 1)])
def test_mixer_folded_matches_unfolded(rng, B, B1):
    p = init_mixer(rng, 4, 3)
    x = rng.standard_normal((B, 4, 6))
    plan = FoldPlan(B, B1, 6)
    ref = val(mixer_fwd(x, p, FoldPlan.identity(B, 6)))
    out = unfold(val(mixer_fwd(fold(x, plan), p, plan)), plan)
    assert np.abs(out - ref).max() <= 1e-12 * np.abs(ref).max()


def test_zero_block_is_identity_plus_swap(rng):
    p = init_mamba_block(rng, 4, 2)
    for k in ("mixer.out.w", "mixer.out.b", "mlp.fc2.w", "mlp.fc2.b"):
        p[k] = np.zeros_like(p[k])
    x = rng.standard_normal((2, 4, 6))
    plan, state = FoldPlan.identity(2, 6), AuxState(present=True)
    assert np.array_equal(val(mamba_block_fwd(x, p, plan, state)), x)
    swapped = val(mamba_block_fwd(x, p, plan, state, swap_after=True))
    assert np.array_equal(swapped, val(aux_swap(x, state, plan)))


@pytest.mark.parametrize("discard", ["before_attn", "after_first_attn", "after_attn"])
def test_stage_output_length(rng, discard):
    p = init_stage(rng, 4, 2, 2, 2)
    x = rng.standard_normal((4, 4, 5))
    for B1 in (None, 2, 1):
        out = stage_fwd(x, p, 2, 2, 2, StageSettings(discard=discard, B1=B1))
        assert out.shape == x.shape


@pytest.mark.parametrize("swap, aux", [(True, "mean"), (False, "mean"), (True, "learnable"),
                                       (False, "learnable")])
def test_stage_fold_equivalence(rng, swap, aux):
    p = init_stage(rng, 4, 2, 2, 1, aux_init=aux)
    x = rng.standard_normal((6, 4, 4))
    ref = val(stage_fwd(x, p, 2, 1, 2, StageSettings(swap=swap, aux_init=aux)))
    for B1 in (1, 2, 3):
        out = val(stage_fwd(x, p, 2, 1, 2, StageSettings(swap=swap, aux_init=aux, B1=B1)))
        assert np.abs(out - ref).max() <= 1e-12 * np.abs(ref).max()


def test_discard_policies_differ(rng):
    p = init_stage(rng, 4, 2, 2, 2)
    x = rng.standard_normal((2, 4, 5))
    outs = [val(stage_fwd(x, p, 2, 2, 2, StageSettings(discard=d)))
            for d in ("before_attn", "after_first_attn", "after_attn")]
    assert not np.allclose(outs[0], outs[1]) and not np.allclose(outs[1], outs[2])


def test_swap_routes_future_to_first_token():
    on = first_token_sensitivity(0, swap=True)
    off = first_token_sensitivity(0, swap=False)
    assert on[-1] > 1e-8
    assert off[0] > 0 and not off[1:].any()


def test_learnable_aux_needs_swap_for_flow():
    on = first_token_sensitivity(1, swap=True, aux_init="learnable")
    off = first_token_sensitivity(1, swap=False, aux_init="learnable")
    assert on[-1] > 1e-8
    assert not off[1:].any()


def test_stage_gradients_reach_all_params(rng):
    p = init_stage(rng, 4, 2, 2, 1)
    P = {k: ag.Var(v, requires_grad=True) for k, v in p.items()}
    out = stage_fwd(rng.standard_normal((2, 4, 5)), P, 2, 1, 2, StageSettings(B1=1))
    ag.backward(ag.weighted_sum(out, rng.standard_normal(out.shape)))
    missing = [k for k, v in P.items() if v.grad is None or not np.abs(v.grad).max() > 0]
    # the final block's key bias is softmax-invariant and gets no gradient
    assert set(missing) <= {"attn0.attn.bk"}
    assert sub(p, "mamba1").keys() == sub(p, "mamba0").keys()
