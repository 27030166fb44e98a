import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from placetext.errors import InvalidInputError, ParameterError, ShapeError
from placetext.loss import (
    LabeledBatch,
    LossHyperparams,
    cosine_similarity,
    ms_loss,
    ms_loss_from_similarities,
    ms_loss_grad,
    ms_loss_grad_raw,
    ms_loss_raw,
    pair_masks,
    relative_gradient_error,
)
from placetext.numerics import finite_diff_grad, make_rng


def unit_batch(seed, n, d, classes):
    x = make_rng(seed).standard_normal((n, d))
    return LabeledBatch.normalized(x, np.arange(n) % classes)


def test_hyperparam_validation():
    with pytest.raises(ParameterError):
        LossHyperparams(alpha=0.0)
    with pytest.raises(ParameterError):
        LossHyperparams(beta=-1.0)
    with pytest.raises(ParameterError):
        LossHyperparams(lam=float("nan"))


def test_batch_validation():
    with pytest.raises(InvalidInputError):
        LabeledBatch(np.ones((2, 2)), np.array([0, 1]))
    with pytest.raises(InvalidInputError):
        LabeledBatch(np.eye(2), np.array([0]))
    with pytest.raises(InvalidInputError):
        LabeledBatch(np.zeros((0, 3)), np.array([]))


def test_cosine_similarity_cases():
    assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(32 / math.sqrt(14 * 77), abs=1e-15)
    with pytest.raises(InvalidInputError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeError):
        cosine_similarity([1.0], [1.0, 2.0])


def test_pair_masks():
    pos, neg = pair_masks(np.array([0, 0, 1]))
    assert pos.tolist() == [[False, True, False], [True, False, False], [False, False, False]]
    assert neg.tolist() == [[False, False, True], [False, False, True], [True, True, False]]


def test_single_descriptor_loss_is_zero():
    batch = LabeledBatch(np.array([[1.0, 0.0]]), np.array([0]))
    assert ms_loss(batch) == 0.0
    np.testing.assert_array_equal(ms_loss_grad(batch), np.zeros((1, 2)))


def test_similarities_at_margin_closed_form():
    labels = np.array([0, 0, 1, 1, 2, 2])
    h = LossHyperparams(alpha=2.0, beta=40.0, lam=0.3)
    s = np.full((6, 6), 0.3)
    # p = 1 positive and n = 4 negatives per row
    assert ms_loss_from_similarities(s, labels, h) == pytest.approx(math.log(2) / 2 + math.log(5) / 40, abs=1e-15)


def test_similarity_matrix_shape_error():
    with pytest.raises(ShapeError):
        ms_loss_from_similarities(np.ones((3, 2)), [0, 1, 2])


def test_loss_matches_high_precision_oracle(golden_dir):
    for c in json.loads((golden_dir / "ms_loss_cases.json").read_text()):
        x = make_rng(c["seed"]).standard_normal((c["n"], c["dim"]))
        h = LossHyperparams(c["alpha"], c["beta"], c["lam"])
        assert ms_loss_raw(x, np.array(c["labels"]), h) == pytest.approx(c["loss"], rel=1e-13, abs=1e-15)


def test_four_descriptor_two_class_batch():
    batch = unit_batch(21, 4, 8, 2)
    want = oracles.ms_loss(batch.descriptors, batch.labels.tolist(), 1.0, 50.0, 0.5)
    assert ms_loss(batch) == pytest.approx(want, rel=1e-13)


def test_loss_is_stable_for_large_beta():
    x = np.array([[1.0, 0.0], [1.0, 1e-9], [-1.0, 0.0]])
    val = ms_loss_raw(x, np.array([0, 1, 0]), LossHyperparams(beta=5000.0))
    assert math.isfinite(val)
    assert val == pytest.approx(oracles.ms_loss(x, [0, 1, 0], 1.0, 5000.0, 0.5), rel=1e-10)


def test_gradient_matches_finite_differences_4x8():
    batch = unit_batch(22, 4, 8, 2)
    h = LossHyperparams()
    analytic = ms_loss_grad(batch, h)
    numeric = finite_diff_grad(lambda v: ms_loss_raw(v, batch.labels, h), batch.descriptors, 1e-5)
    assert relative_gradient_error(analytic, numeric) < 1e-4


@pytest.mark.parametrize("seed, n, d, classes, beta", [(31, 4, 3, 2, 50.0), (32, 5, 4, 3, 10.0)])
def test_gradient_matches_high_precision_oracle(seed, n, d, classes, beta):
    x = make_rng(seed).standard_normal((n, d))
    labels = np.arange(n) % classes
    h = LossHyperparams(2.0, beta, 0.5)
    want = np.array(oracles.ms_loss_grad(x, labels.tolist(), h.alpha, h.beta, h.lam))
    got = ms_loss_grad_raw(x, labels, h)
    scale = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-12)
    assert (np.abs(got - want) / scale).max() < 1e-8


def test_symmetric_pair_gradient_is_antisymmetric():
    theta = 0.4
    x = np.array([[math.cos(theta), math.sin(theta)], [math.cos(theta), -math.sin(theta)]])
    g = ms_loss_grad(LabeledBatch(x, np.array([0, 0])))
    np.testing.assert_allclose(g[0], [g[1][0], -g[1][1]], atol=1e-15)
    assert abs(g[0][1]) > 0


def test_grad_is_tangent_and_scale_aware():
    x = make_rng(23).standard_normal((5, 6))
    labels = np.array([0, 0, 1, 1, 2])
    g = ms_loss_grad_raw(x, labels)
    np.testing.assert_allclose(np.sum(g * x, axis=1), 0.0, atol=1e-14)
    np.testing.assert_allclose(ms_loss_grad_raw(3.0 * x, labels), g / 3.0, atol=1e-14)


def test_relative_error_floor():
    assert relative_gradient_error(np.array([1e-9]), np.array([5e-9])) == 0.0
    assert relative_gradient_error(np.array([1.0]), np.array([2.0])) == 0.5


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(2, 8), st.integers(1, 4))
def test_loss_nonnegative_and_permutation_invariant(seed, n, d, classes):
    batch = unit_batch(seed, n, d, classes)
    perm = make_rng(seed + 1).permutation(n)
    permuted = LabeledBatch(batch.descriptors[perm], batch.labels[perm])
    loss = ms_loss(batch)
    assert loss >= 0.0
    assert ms_loss(permuted) == pytest.approx(loss, rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(ms_loss_grad(permuted), ms_loss_grad(batch)[perm], atol=1e-13)


@settings(max_examples=60)
@given(st.integers(0, 2**31), st.floats(1e-3, 0.2))
def test_similarity_monotonicity(seed, bump):
    rng = make_rng(seed)
    n = 6
    labels = np.array([0, 0, 1, 1, 2, 2])
    h = LossHyperparams(alpha=2.0, beta=10.0, lam=0.5)
    s = rng.uniform(-0.5, 0.8, size=(n, n))
    s = (s + s.T) / 2
    base = ms_loss_from_similarities(s, labels, h)
    pos, neg = pair_masks(labels)
    i, j = map(int, np.argwhere(neg)[rng.integers(0, neg.sum())])
    up = s.copy()
    up[i, j] += bump
    assert ms_loss_from_similarities(up, labels, h) > base
    i, j = map(int, np.argwhere(pos)[rng.integers(0, pos.sum())])
    up = s.copy()
    up[i, j] += bump
    assert ms_loss_from_similarities(up, labels, h) < base


def test_zero_loss_only_without_pairs():
    assert ms_loss_raw(np.eye(3), np.array([0, 1, 2])) > 0.0
