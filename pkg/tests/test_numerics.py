import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from placetext.errors import InvalidInputError, NumericError, ShapeError
from placetext.numerics import AttentionParams, finite_diff_grad, linear, make_rng, mha, softmax_rows, xavier_uniform

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_single_element():
    assert softmax_rows([[5.0]]).tolist() == [[1.0]]


def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_matches_high_precision():
    got = softmax_rows([[1.0, 2.0, 3.0]])[0]
    np.testing.assert_allclose(got, oracles.softmax_row_mp([1.0, 2.0, 3.0]), rtol=1e-14, atol=0)


def test_softmax_survives_large_inputs():
    out = softmax_rows([[1000.0, 1000.0, -1000.0]])
    np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]], atol=1e-15)


@pytest.mark.parametrize("bad", [[[np.nan, 1.0]], [[np.inf]]])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        softmax_rows(bad)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=9), elements=finite))
def test_softmax_rows_sum_to_one(m):
    out = softmax_rows(m)
    assert out.shape == m.shape
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((out > 0) & (out <= 1))


def test_linear_identity_and_zero():
    x = make_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(linear(x, np.eye(4), np.zeros(4)), x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(linear(x, np.zeros((2, 4)), b), np.tile(b, (3, 1)))


def test_linear_matches_triple_loop():
    rng = make_rng(3)
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    np.testing.assert_allclose(linear(x, w, b), oracles.linear(x.tolist(), w.tolist(), b.tolist()), atol=1e-13)


def test_linear_shape_errors():
    with pytest.raises(ShapeError):
        linear(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        linear(np.ones((2, 3)), np.ones((2, 3)), np.ones(3))


@given(st.integers(0, 10_000))
def test_linear_composition(seed):
    rng = make_rng(seed)
    x, w1, w2 = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal((6, 3))
    np.testing.assert_allclose(linear(linear(x, w1), w2), linear(x, w2 @ w1), atol=1e-10)


def test_xavier_is_seeded_and_bounded():
    a = xavier_uniform(make_rng(5), 6, 4)
    b = xavier_uniform(make_rng(5), 6, 4)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (6, 4)
    assert np.all(np.abs(a) <= math.sqrt(6 / 10))


def test_attention_params_validation():
    with pytest.raises(ShapeError):
        AttentionParams.seeded(10, 3, 0)
    p = AttentionParams.seeded(8, 2, 0)
    assert p.head_dim == 4 and p.w_q.shape == (2, 4, 8)
    with pytest.raises(ShapeError):
        AttentionParams(2, 8, p.w_q[:1], p.w_k, p.w_v, p.w_o)
    with pytest.raises(ValueError):
        p.w_q[0, 0, 0] = 1.0


def test_mha_single_key_returns_value_row():
    p = AttentionParams.identity(4, 2)
    q = make_rng(1).standard_normal((3, 4))
    v = np.array([[0.5, -1.0, 2.0, 3.0]])
    np.testing.assert_allclose(mha(q, v, v, p), np.tile(v, (3, 1)), atol=1e-15)


def test_mha_two_tokens_hand_evaluated():
    p = AttentionParams.identity(2, 1)
    q = np.array([[1.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[2.0, 0.0], [0.0, 4.0]])
    w = oracles.softmax_row_mp([1 / math.sqrt(2), 0.0])
    np.testing.assert_allclose(mha(q, k, v, p), [[2 * w[0], 4 * w[1]]], atol=1e-15)


def test_mha_matches_loop_oracle():
    rng = make_rng(9)
    p = AttentionParams.seeded(6, 3, 4)
    q, k, v = rng.standard_normal((2, 6)), rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    want = oracles.mha(q.tolist(), k.tolist(), v.tolist(), *oracles.mha_params(p))
    np.testing.assert_allclose(mha(q, k, v, p), want, atol=1e-13)


def test_mha_shape_errors():
    p = AttentionParams.seeded(4, 2, 0)
    with pytest.raises(ShapeError):
        mha(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)), p)
    with pytest.raises(ShapeError):
        mha(np.ones((2, 4)), np.ones((3, 4)), np.ones((2, 4)), p)
    with pytest.raises(ShapeError):
        mha(np.ones((2, 4)), np.ones((0, 4)), np.ones((0, 4)), p)


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 7), st.sampled_from([(4, 1), (4, 2), (6, 3), (8, 4)]))
def test_mha_kv_permutation_invariance(seed, nq, nk, dims):
    model_dim, heads = dims
    rng = make_rng(seed)
    p = AttentionParams.seeded(model_dim, heads, seed)
    q, k, v = (rng.standard_normal((n, model_dim)) for n in (nq, nk, nk))
    perm = rng.permutation(nk)
    out = mha(q, k, v, p)
    assert out.shape == (nq, model_dim)
    assert np.max(np.abs(out - mha(q, k[perm], v[perm], p))) < 1e-10


def test_finite_diff_constant_and_quadratic():
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 3.0, np.ones(3)), np.zeros(3))
    g = finite_diff_grad(lambda x: float(np.sum(x**2)), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)


def test_finite_diff_errors():
    with pytest.raises(InvalidInputError):
        finite_diff_grad(lambda x: 0.0, np.ones(2), 0.0)
    with pytest.raises(NumericError):
        finite_diff_grad(lambda x: float("nan"), np.ones(2))


def test_finite_diff_leaves_input_untouched():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    before = x.copy()
    g = finite_diff_grad(lambda v: float(v[0, 1] * v[1, 0]), x)
    np.testing.assert_array_equal(x, before)
    np.testing.assert_allclose(g, [[0.0, 3.0], [2.0, 0.0]], atol=1e-8)
