"""Tests for summary networks and the embedding regularizer."""

import numpy as np
import pytest

from jointsbi.errors import DimensionMismatchError
from jointsbi.kernel import make_rng, value_and_grad
from jointsbi.kernel import tensor as T
from jointsbi.summaries import (
    MMD_BANDWIDTHS,
    DeepSetSpec,
    IdentitySummarySpec,
    RecurrentSummarySpec,
    init_summary_params,
    mmd_penalty,
    summarize,
)

from helpers import finite_difference_grad, mmd_unbiased_reference, relative_error


def test_identity_summary_passes_vectors_through():
    spec = IdentitySummarySpec(input_dim=6)
    x = make_rng(1).normal(size=(4, 6))
    out = summarize(spec, {}, x)
    assert np.array_equal(out.data, x)


def test_identity_summary_flattens_series_row_major():
    spec = IdentitySummarySpec(input_dim=6)
    x = make_rng(2).normal(size=(4, 3, 2))
    out = summarize(spec, {}, x)
    assert np.array_equal(out.data, x.reshape(4, 6))


def test_deep_set_is_permutation_invariant_bitwise():
    spec = DeepSetSpec(point_dim=2, summary_dim=5, equivariant_dim=8, equivariant_hidden=(8,), post_hidden=(8,))
    params = init_summary_params(spec, make_rng(3))
    rng = make_rng(4)
    x = rng.normal(size=(3, 11, 2))
    base = summarize(spec, params, x).data
    shuffled = x[:, rng.permutation(11), :]
    assert np.array_equal(base, summarize(spec, params, shuffled).data)


def test_deep_set_mean_pooling_is_stable_across_set_sizes():
    # duplicating every element leaves a mean-pooled embedding unchanged
    spec = DeepSetSpec(point_dim=2, summary_dim=4, equivariant_dim=8, equivariant_hidden=(8,), post_hidden=())
    params = init_summary_params(spec, make_rng(5))
    x = make_rng(6).normal(size=(2, 7, 2))
    doubled = np.concatenate([x, x], axis=1)
    np.testing.assert_allclose(
        summarize(spec, params, x).data, summarize(spec, params, doubled).data, atol=1e-12
    )


def test_deep_set_output_shape_and_gradient_flow():
    spec = DeepSetSpec(point_dim=3, summary_dim=6, equivariant_dim=8, equivariant_hidden=(8,), post_hidden=(8,))
    params = init_summary_params(spec, make_rng(7))
    x = make_rng(8).normal(size=(5, 9, 3))
    out = summarize(spec, params, x)
    assert out.shape == (5, 6)

    def loss(p):
        return T.tsum(T.square(summarize(spec, p, x)))

    _, grads = value_and_grad(loss, params)
    assert all(np.abs(g).sum() > 0 for g in grads.values())


def test_recurrent_summary_is_order_sensitive():
    spec = RecurrentSummarySpec(channel_dim=1, summary_dim=3, hidden_dim=8)
    params = init_summary_params(spec, make_rng(9))
    x = make_rng(10).normal(size=(1, 12, 1))
    forward = summarize(spec, params, x).data
    backward = summarize(spec, params, x[:, ::-1, :]).data
    assert np.abs(forward - backward).max() > 1e-6
    assert forward.shape == (1, 3)


def test_empty_inputs_are_rejected():
    deep = DeepSetSpec(point_dim=2, summary_dim=2, equivariant_dim=4, equivariant_hidden=(), post_hidden=())
    rec = RecurrentSummarySpec(channel_dim=2, summary_dim=2, hidden_dim=4)
    with pytest.raises(DimensionMismatchError):
        summarize(deep, init_summary_params(deep, make_rng(0)), np.zeros((3, 0, 2)))
    with pytest.raises(DimensionMismatchError):
        summarize(rec, init_summary_params(rec, make_rng(0)), np.zeros((3, 0, 2)))
    with pytest.raises(DimensionMismatchError):
        summarize(IdentitySummarySpec(input_dim=4), {}, np.zeros((3, 5)))


# -- mmd penalty --------------------------------------------------------


def test_mmd_matches_independent_reimplementation():
    rng = make_rng(11)
    a = rng.normal(size=(40, 3))
    b = rng.normal(size=(40, 3))
    ours = mmd_penalty(a, rng, reference=b)
    assert float(ours.data) == pytest.approx(mmd_unbiased_reference(a, b, MMD_BANDWIDTHS), rel=1e-10)


def test_mmd_on_identical_sets_is_nonpositive():
    a = make_rng(12).normal(size=(64, 4))
    value = float(mmd_penalty(a, make_rng(0), reference=a.copy()).data)
    assert value <= 0.0


def test_mmd_separates_shifted_embeddings():
    rng = make_rng(13)
    far = 5.0 + rng.normal(size=(256, 3))
    value = float(mmd_penalty(far, rng).data)
    assert value > 0.5


def test_mmd_near_zero_for_matching_distributions():
    rng = make_rng(14)
    a = rng.normal(size=(512, 3))
    value = float(mmd_penalty(a, rng).data)
    assert abs(value) < 0.05


def test_mmd_gradient_matches_finite_differences():
    rng = make_rng(15)
    a = rng.normal(size=(12, 2))
    reference = rng.normal(size=(12, 2))

    def loss_t(params):
        return mmd_penalty(params["a"], rng, reference=reference)

    _, grads = value_and_grad(loss_t, {"a": a})
    fd = finite_difference_grad(lambda v: mmd_unbiased_reference(v, reference, MMD_BANDWIDTHS), a)
    assert relative_error(grads["a"], fd) < 1e-3


def test_mmd_is_deterministic_given_seed():
    a = make_rng(16).normal(size=(32, 3))
    v1 = float(mmd_penalty(a, make_rng(500)).data)
    v2 = float(mmd_penalty(a, make_rng(500)).data)
    assert v1 == v2


def test_mmd_rejects_single_row():
    with pytest.raises(DimensionMismatchError):
        mmd_penalty(np.zeros((1, 3)), make_rng(0))
