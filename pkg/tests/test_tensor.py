import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from foldscan.tensor import (concat_ends, finalize, get_dtype, linear_index, precision,
                             seq_mean, set_finite_checks, set_precision, swap_positions, tensor3)

dims = st.integers(1, 5)


def test_seq_mean_examples():
    assert seq_mean(tensor3([1, 2, 3], 1, 1, 3)).ravel().tolist() == [2.0]
    assert seq_mean(tensor3([1, 1, 4, 6], 1, 2, 2)).ravel().tolist() == [1.0, 5.0]
    assert seq_mean(tensor3([7, -7], 2, 1, 1)).ravel().tolist() == [7.0, -7.0]


def test_concat_ends_examples():
    x = tensor3([1, 2], 1, 1, 2)
    out = concat_ends(tensor3([9], 1, 1, 1), x, tensor3([8], 1, 1, 1))
    assert out.ravel().tolist() == [9, 1, 2, 8]
    x = tensor3([2, 4], 1, 1, 2)
    m = seq_mean(x)
    assert concat_ends(m, x, m).ravel().tolist() == [3, 2, 4, 3]


def test_concat_ends_rows_independent():
    x = tensor3([1, 2, 3, 4], 2, 1, 2)
    h = tensor3([0, 10], 2, 1, 1)
    out = concat_ends(h, x, h)
    assert out[0, 0].tolist() == [0, 1, 2, 0]
    assert out[1, 0].tolist() == [10, 3, 4, 10]


def test_concat_ends_rejects_mismatch():
    with pytest.raises(ValueError):
        concat_ends(np.zeros((1, 2, 1)), np.zeros((1, 1, 3)), np.zeros((1, 1, 1)))


def test_swap_examples():
    assert swap_positions(tensor3([9, 1, 2, 8], 1, 1, 4), 0, 3, 4).ravel().tolist() == [8, 1, 2, 9]
    out = swap_positions(tensor3(np.arange(6), 1, 1, 6), 0, 2, 3)
    assert out.ravel().tolist() == [2, 1, 0, 5, 4, 3]


def test_swap_same_offset_is_noop():
    x = tensor3(np.arange(6), 1, 1, 6)
    assert np.array_equal(swap_positions(x, 1, 1, 3), x)


@pytest.mark.parametrize("i, j, stride", [(0, 3, 3), (-1, 0, 3), (0, 4, 5)])
def test_swap_rejects_out_of_range(i, j, stride):
    with pytest.raises(ValueError):
        swap_positions(np.zeros((1, 1, 6)), i, j, stride)


def test_construction_contract():
    with pytest.raises(ValueError):
        tensor3([], 1, 1, 0)
    with pytest.raises(ValueError):
        tensor3([1, 2], 1, 1, 3)
    t = tensor3(np.arange(6), 1, 2, 3)
    assert not t.flags.writeable


def test_precision_is_global_and_explicit():
    assert get_dtype() is np.float64
    with precision("f32"):
        assert tensor3([1], 1, 1, 1).dtype == np.float32
    assert tensor3([1], 1, 1, 1).dtype == np.float64
    with pytest.raises(ValueError):
        set_precision("f16")


def test_finite_checks():
    set_finite_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            finalize(np.array([np.nan]))
    finally:
        set_finite_checks(False)


@given(dims, dims, dims, st.data())
def test_index_contract(B, D, T, data):
    flat = np.arange(B * D * T, dtype=float)
    x = tensor3(flat, B, D, T)
    b, d, t = (data.draw(st.integers(0, n - 1)) for n in (B, D, T))
    assert x[b, d, t] == flat[linear_index(b, d, t, (B, D, T))] == b * D * T + d * T + t


@given(dims, dims, st.integers(1, 4), st.integers(1, 4), st.data())
def test_swap_is_involution(B, D, stride, segs, data):
    i = data.draw(st.integers(0, stride - 1))
    j = data.draw(st.integers(0, stride - 1))
    x = data.draw(arrays(np.float64, (B, D, stride * segs), elements=st.floats(-1e6, 1e6)))
    once = swap_positions(x, i, j, stride)
    assert np.array_equal(swap_positions(once, i, j, stride), x)
    starts = np.arange(0, stride * segs, stride)
    assert np.array_equal(once[:, :, starts + i], x[:, :, starts + j])


@given(dims, dims, dims, st.floats(-1e3, 1e3))
def test_seq_mean_of_constant(B, D, T, c):
    out = seq_mean(np.full((B, D, T), c))
    assert out.shape == (B, D, 1)
    np.testing.assert_allclose(out, c, rtol=1e-12, atol=1e-12)
