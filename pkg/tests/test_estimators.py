"""Estimator checks against conjugate closed forms.

The exchangeable fixture trains the normal-normal set model at its default
budget once per module; the flat fixture uses a shorter budget that is
accurate enough for coarse log-marginal checks.  Tolerances were chosen
from repeated runs with roughly 3-4x margin over observed error.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from jointsbi.errors import (
    ConfigError,
    DimensionMismatchError,
    FilterReferenceError,
    ModelMismatchError,
    NonFiniteError,
)
from jointsbi.estimators import (
    CriticReference,
    ElpdEstimate,
    LmlEstimate,
    LooResult,
    build_critic_reference,
    estimate_elpd,
    estimate_lml,
    loo_cv,
    save_estimate,
    surrogate_simulate_filtered,
)
from jointsbi.kernel.rng import make_rng
from jointsbi.simulators import benchmarks
from jointsbi.training import (
    Standardizer,
    TrainingConfig,
    build_approximator,
    build_specs,
    default_architecture,
    default_training_config,
    init_joint_params,
    train,
)


@pytest.fixture(scope="module")
def toy_model():
    return benchmarks.gaussian_exchangeable_1d()


@pytest.fixture(scope="module")
def toy_approx(toy_model):
    config = default_training_config("gaussian_exchangeable_1d", seed=0)
    approx, trace = train(toy_model, config, default_architecture(toy_model))
    return approx.with_params(trace.best_params)


@pytest.fixture(scope="module")
def flat_model():
    return benchmarks.gaussian_linear()


@pytest.fixture(scope="module")
def flat_approx(flat_model):
    config = TrainingConfig(budget=3000, epochs=15, batch_size=64,
                            initial_lr=2e-3, weight_decay=1.0, seed=0)
    approx, trace = train(flat_model, config, default_architecture(flat_model))
    return approx.with_params(trace.best_params)


@pytest.fixture(scope="module")
def untrained_flat(flat_model):
    arch = default_architecture(flat_model)
    specs = build_specs(flat_model.theta_dim, flat_model.data_shape, arch)
    params = init_joint_params(*specs, seed=0)
    return build_approximator(flat_model.name, flat_model.theta_dim,
                              flat_model.data_shape, arch, params,
                              Standardizer.identity(flat_model.theta_dim),
                              Standardizer.identity(10))


def _toy_dataset(toy_model, seed, n_new=5):
    rng = make_rng(seed)
    theta = toy_model.prior_sampler(rng)
    x_fit = toy_model.simulator(theta, rng)
    x_new = theta[0] + rng.standard_normal((n_new, 1))
    return theta, x_fit, x_new


class TestLml:

    def test_model_mismatch(self, flat_approx, toy_model):
        with pytest.raises(ModelMismatchError):
            estimate_lml(flat_approx, np.zeros((20, 1)), toy_model, 10,
                         make_rng(0))

    def test_rejects_zero_draws(self, flat_approx, flat_model):
        with pytest.raises(ConfigError):
            estimate_lml(flat_approx, np.zeros(10), flat_model, 0, make_rng(0))

    def test_single_draw_has_no_spread(self, flat_approx, flat_model):
        rng = make_rng(11)
        x = flat_model.simulator(flat_model.prior_sampler(rng), rng)
        est = estimate_lml(flat_approx, x, flat_model, 1, make_rng(1))
        assert est.spread is None
        assert est.per_theta_values.shape == (1,)
        assert est.point_estimate == pytest.approx(est.per_theta_values[0])

    def test_untrained_spread_exceeds_one_nat(self, untrained_flat, flat_model):
        rng = make_rng(1)
        x = flat_model.simulator(flat_model.prior_sampler(rng), rng)
        est = estimate_lml(untrained_flat, x, flat_model, 100, make_rng(5))
        assert est.spread > 1.0

    def test_mid_trained_tracks_conjugate_marginal(self, flat_approx, flat_model):
        oracle = flat_model.analytic_oracles
        errs = []
        for rep in range(10):
            rng = make_rng(2000 + rep)
            x = flat_model.simulator(flat_model.prior_sampler(rng), rng)
            est = estimate_lml(flat_approx, x, flat_model, 100,
                               make_rng(3000 + rep))
            errs.append(abs(est.point_estimate - oracle.log_marginal(x)))
            assert est.spread < 1.0
            assert est.n_excluded == 0
        assert np.mean(errs) < 0.5
        assert max(errs) < 1.0

    def test_nonfinite_values_excluded_and_counted(self, flat_approx, flat_model):
        base = flat_model.prior_log_density

        def poisoned(theta):
            vals = np.atleast_1d(np.asarray(base(theta), dtype=np.float64))
            arr = np.atleast_2d(np.asarray(theta, dtype=np.float64))
            return np.where(arr[:, 0] > 0.0, np.nan, vals)

        bad_model = replace(flat_model, prior_log_density=poisoned)
        rng = make_rng(7)
        x = flat_model.simulator(flat_model.prior_sampler(rng), rng)
        est = estimate_lml(flat_approx, x, bad_model, 100, make_rng(8))
        assert 0 < est.n_excluded < 100
        assert est.per_theta_values.shape == (100,)
        assert np.isnan(est.per_theta_values).sum() == est.n_excluded
        assert np.isfinite(est.point_estimate)

    def test_all_nonfinite_refused(self, flat_approx, flat_model):
        bad_model = replace(
            flat_model,
            prior_log_density=lambda theta: np.full(
                np.atleast_2d(theta).shape[0], np.nan))
        rng = make_rng(7)
        x = flat_model.simulator(flat_model.prior_sampler(rng), rng)
        with pytest.raises(NonFiniteError):
            estimate_lml(flat_approx, x, bad_model, 20, make_rng(8))


class TestElpd:

    def test_needs_exchangeable_head(self, flat_approx):
        with pytest.raises(ConfigError, match="exchangeable"):
            estimate_elpd(flat_approx, np.zeros(10), np.zeros((2, 1)), 50,
                          make_rng(0))

    def test_rejects_few_draws(self, toy_approx, toy_model):
        _, x_fit, x_new = _toy_dataset(toy_model, 100)
        with pytest.raises(ConfigError):
            estimate_elpd(toy_approx, x_fit, x_new, 9, make_rng(0))

    def test_no_new_points(self, toy_approx, toy_model):
        _, x_fit, _ = _toy_dataset(toy_model, 100)
        est = estimate_elpd(toy_approx, x_fit, np.zeros((0, 1)), 50, make_rng(0))
        assert est.total == 0.0
        assert est.per_point_log_densities.size == 0
        assert est.n_excluded == 0

    def test_matches_conjugate_predictive(self, toy_approx, toy_model):
        oracle = toy_model.analytic_oracles
        for rep in range(4):
            _, x_fit, x_new = _toy_dataset(toy_model, 100 + rep)
            est = estimate_elpd(toy_approx, x_fit, x_new, 500,
                                make_rng(200 + rep))
            exact = sum(
                oracle.posterior_predictive_log_density(x_new[k], x_fit)
                for k in range(x_new.shape[0]))
            assert est.total == pytest.approx(exact, abs=0.2)

    def test_doubling_draws_barely_moves_total(self, toy_approx, toy_model):
        _, x_fit, x_new = _toy_dataset(toy_model, 100)
        for seed in (301, 303):
            half = estimate_elpd(toy_approx, x_fit, x_new, 500, make_rng(seed))
            full = estimate_elpd(toy_approx, x_fit, x_new, 1000, make_rng(seed))
            assert abs(half.total - full.total) < 0.05

    @pytest.mark.parametrize("level", [700.0, -700.0])
    def test_extreme_log_likelihoods_stay_finite(self, toy_approx, toy_model,
                                                 level):
        _, x_fit, x_new = _toy_dataset(toy_model, 100)
        stub = toy_approx.with_params(toy_approx.params)
        stub.likelihood_point_log_prob = (
            lambda pts, ths: np.full(np.atleast_2d(pts).shape[0], level))
        with np.errstate(over="raise"):
            est = estimate_elpd(stub, x_fit, x_new, 10, make_rng(0))
        assert np.allclose(est.per_point_log_densities, level)

    def test_partial_nonfinite_excluded(self, toy_approx, toy_model):
        _, x_fit, x_new = _toy_dataset(toy_model, 100)
        stub = toy_approx.with_params(toy_approx.params)

        def half_nan(pts, ths):
            vals = np.full(np.atleast_2d(pts).shape[0], -1.0)
            vals[::2] = np.nan
            return vals

        stub.likelihood_point_log_prob = half_nan
        est = estimate_elpd(stub, x_fit, x_new, 10, make_rng(0))
        assert est.n_excluded == 5 * x_new.shape[0]
        assert np.allclose(est.per_point_log_densities, -1.0)

    def test_all_nonfinite_refused(self, toy_approx, toy_model):
        _, x_fit, x_new = _toy_dataset(toy_model, 100)
        stub = toy_approx.with_params(toy_approx.params)
        stub.likelihood_point_log_prob = (
            lambda pts, ths: np.full(np.atleast_2d(pts).shape[0], np.nan))
        with pytest.raises(NonFiniteError):
            estimate_elpd(stub, x_fit, x_new, 10, make_rng(0))


class TestLooCv:

    def test_needs_two_points(self, toy_approx):
        with pytest.raises(DimensionMismatchError):
            loo_cv(toy_approx, np.zeros((1, 1)), 50, make_rng(0))

    def test_two_folds(self, toy_approx):
        x_set = np.array([[0.3], [-0.8]])
        res = loo_cv(toy_approx, x_set, 10, make_rng(0))
        assert res.per_point_elpds.shape == (2,)
        assert np.all(np.isfinite(res.per_point_elpds))
        assert res.total == pytest.approx(res.per_point_elpds.sum(), abs=1e-9)

    def test_permutation_leaves_result_bit_identical(self, toy_approx, toy_model):
        _, x_set, _ = _toy_dataset(toy_model, 42)
        x_set = x_set[:8]
        perm = make_rng(3).permutation(8)
        res = loo_cv(toy_approx, x_set, 50, make_rng(7))
        res_perm = loo_cv(toy_approx, x_set[perm], 50, make_rng(7))
        assert res.total == res_perm.total
        assert np.array_equal(np.sort(res.per_point_elpds),
                              np.sort(res_perm.per_point_elpds))

    def test_never_mutates_approximator(self, toy_approx, toy_model):
        _, x_set, _ = _toy_dataset(toy_model, 42)
        before = toy_approx.parameter_hash()
        loo_cv(toy_approx, x_set[:4], 20, make_rng(0))
        assert toy_approx.parameter_hash() == before

    def test_matches_analytic_loo(self, toy_approx, toy_model):
        oracle = toy_model.analytic_oracles
        for rep in range(4):
            rng = make_rng(500 + rep)
            theta = toy_model.prior_sampler(rng)
            x_set = toy_model.simulator(theta, rng)
            res = loo_cv(toy_approx, x_set, 500, make_rng(600 + rep))
            exact = sum(
                oracle.posterior_predictive_log_density(
                    x_set[i], np.delete(x_set, i, axis=0))
                for i in range(x_set.shape[0]))
            assert res.total == pytest.approx(exact, abs=0.3)


class TestSurrogateFilter:

    def test_quantile_one_disables_filtering(self, toy_approx, toy_model):
        theta = toy_model.prior_sampler(make_rng(0))
        accepted, stats = surrogate_simulate_filtered(
            toy_approx, theta, 50, 1.0, make_rng(1))
        assert accepted.shape == (50,) + toy_model.data_shape.array_shape
        assert stats["n_accepted"] == 50
        assert stats["n_rejected_by_critic"] == 0
        assert stats["threshold"] is None

    @pytest.mark.parametrize("quantile", [0.0, -0.2, 1.0001])
    def test_quantile_bounds(self, toy_approx, quantile):
        with pytest.raises(ConfigError):
            surrogate_simulate_filtered(toy_approx, np.zeros(1), 10, quantile,
                                        make_rng(0))

    def test_rejects_zero_draws(self, toy_approx):
        with pytest.raises(ConfigError):
            surrogate_simulate_filtered(toy_approx, np.zeros(1), 0, 1.0,
                                        make_rng(0))

    def test_missing_reference_refused(self, toy_approx):
        with pytest.raises(FilterReferenceError):
            surrogate_simulate_filtered(toy_approx, np.zeros(1), 10, 0.05,
                                        make_rng(0))

    def test_reference_model_guard(self, toy_approx):
        ref = CriticReference("something_else", np.zeros(100))
        with pytest.raises(ModelMismatchError):
            surrogate_simulate_filtered(toy_approx, np.zeros(1), 10, 0.05,
                                        make_rng(0), ref)

    def test_build_reference_model_guard(self, toy_approx, flat_model):
        with pytest.raises(ModelMismatchError):
            build_critic_reference(toy_approx, flat_model, 100, make_rng(0))

    def test_build_reference_min_probes(self, toy_approx, toy_model):
        with pytest.raises(ConfigError):
            build_critic_reference(toy_approx, toy_model, 5, make_rng(0))

    def test_trained_rejection_rate_near_quantile(self, toy_approx, toy_model):
        ref = build_critic_reference(toy_approx, toy_model, 1000, make_rng(700))
        for rep in range(6):
            theta = toy_model.prior_sampler(make_rng(800 + rep))
            _, stats = surrogate_simulate_filtered(
                toy_approx, theta, 500, 0.05, make_rng(900 + rep), ref)
            rate = 1.0 - stats["n_accepted"] / stats["n_draws"]
            assert 0.02 <= rate <= 0.10

    def test_corrupted_surrogate_mostly_rejected(self, toy_approx, toy_model):
        ref = build_critic_reference(toy_approx, toy_model, 1000, make_rng(700))
        noisy = dict(toy_approx.params)
        noise_rng = np.random.default_rng(4)
        for name in noisy:
            if name.startswith("likelihood/"):
                noisy[name] = noisy[name] + 0.5 * noise_rng.standard_normal(
                    noisy[name].shape)
        corrupt = toy_approx.with_params(noisy)
        theta = toy_model.prior_sampler(make_rng(1000))
        _, stats = surrogate_simulate_filtered(corrupt, theta, 500, 0.05,
                                               make_rng(1100), ref)
        rate = 1.0 - stats["n_accepted"] / stats["n_draws"]
        assert rate > 0.5


class TestSerialization:

    def test_lml_records_round_trip(self, flat_approx, flat_model, tmp_path):
        rng = make_rng(11)
        x = flat_model.simulator(flat_model.prior_sampler(rng), rng)
        est = estimate_lml(flat_approx, x, flat_model, 25, make_rng(1))
        first = tmp_path / "a.ndjson"
        second = tmp_path / "b.ndjson"
        save_estimate(est, first, extra={"seed": 3})
        save_estimate(est, second, extra={"seed": 3})
        assert first.read_bytes() == second.read_bytes()
        lines = first.read_text().splitlines()
        assert len(lines) == 26
        summary = json.loads(lines[0])
        assert summary["record"] == "summary"
        assert summary["kind"] == "log_marginal_likelihood"
        assert summary["seed"] == 3
        for line in lines[1:]:
            row = json.loads(line)
            assert row["record"] == "draw"
            assert isinstance(row["value"], float)

    def test_elpd_and_loo_records(self, toy_approx, toy_model, tmp_path):
        _, x_fit, x_new = _toy_dataset(toy_model, 100)
        est = estimate_elpd(toy_approx, x_fit, x_new, 20, make_rng(0))
        path = tmp_path / "elpd.ndjson"
        save_estimate(est, path)
        lines = path.read_text().splitlines()
        assert json.loads(lines[0])["kind"] == "elpd"
        assert len(lines) == 1 + x_new.shape[0]

        res = loo_cv(toy_approx, x_fit[:4], 20, make_rng(0))
        path = tmp_path / "loo.ndjson"
        save_estimate(res, path)
        lines = path.read_text().splitlines()
        assert json.loads(lines[0])["kind"] == "loo_cv"
        assert json.loads(lines[0])["n_points"] == 4
        assert len(lines) == 5

    def test_nan_draws_serialized_as_null(self, flat_approx, flat_model,
                                          tmp_path):
        base = flat_model.prior_log_density

        def poisoned(theta):
            vals = np.atleast_1d(np.asarray(base(theta), dtype=np.float64))
            arr = np.atleast_2d(np.asarray(theta, dtype=np.float64))
            return np.where(arr[:, 0] > 0.0, np.nan, vals)

        bad_model = replace(flat_model, prior_log_density=poisoned)
        rng = make_rng(7)
        x = flat_model.simulator(flat_model.prior_sampler(rng), rng)
        est = estimate_lml(flat_approx, x, bad_model, 50, make_rng(8))
        path = tmp_path / "lml.ndjson"
        save_estimate(est, path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        nulls = sum(1 for row in rows[1:] if row["value"] is None)
        assert nulls == est.n_excluded > 0
