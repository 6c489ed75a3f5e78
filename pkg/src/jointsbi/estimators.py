"""Downstream quantities computed from a trained joint approximator.

Three estimators share the same amortized machinery: the log marginal
likelihood via the change-of-variables identity over posterior draws, the
expected log predictive density (and its leave-one-out cross-validation
loop) via Monte Carlo over the posterior, and surrogate simulation with a
posterior-score critic that rejects draws the posterior network finds
implausible.  Everything here is read-only over the approximator: no
estimator ever refits or mutates network parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import FORMAT_VERSION
from .errors import (
    ConfigError,
    DimensionMismatchError,
    FilterReferenceError,
    ModelMismatchError,
    NonFiniteError,
)
from .flows import canonical_set_order
from .kernel.rng import derive_seed, make_rng
from .simulators.base import BayesianModel, presimulate
from .training import JointApproximator


def _finite_or_none(value: float) -> float | None:
    value = float(value)
    return value if np.isfinite(value) else None


def _tile_dataset(x: np.ndarray, n: int) -> np.ndarray:
    # read-only broadcast view; downstream code never writes into batches
    return np.broadcast_to(x[None, ...], (n,) + x.shape)


# -- log marginal likelihood ----------------------------------------------


@dataclass(frozen=True)
class LmlEstimate:
    """Log marginal likelihood of one dataset from ``n_draws`` posterior draws.

    ``per_theta_values`` holds the raw identity evaluations
    ``log l(x|theta) + log p(theta) - log q(theta|x)``, one per draw and
    including any non-finite entries so exclusions stay inspectable.  The
    point estimate is the median over the finite values and ``spread`` their
    standard deviation; a perfectly converged approximator would make every
    value identical, so the spread doubles as an approximation-error gauge.
    """

    per_theta_values: np.ndarray
    point_estimate: float
    spread: float | None
    n_draws: int
    n_excluded: int

    def to_records(self) -> list[dict]:
        summary = {
            "record": "summary",
            "kind": "log_marginal_likelihood",
            "format_version": FORMAT_VERSION,
            "point_estimate": float(self.point_estimate),
            "spread": None if self.spread is None else float(self.spread),
            "n_draws": int(self.n_draws),
            "n_excluded": int(self.n_excluded),
        }
        rows = [{"record": "draw", "index": i, "value": _finite_or_none(v)}
                for i, v in enumerate(self.per_theta_values)]
        return [summary] + rows


def estimate_lml(approx: JointApproximator, x, model: BayesianModel,
                 n_draws: int, rng: np.random.Generator) -> LmlEstimate:
    """Estimate log p(x) by evaluating the posterior-draw identity.

    For each draw theta ~ q(.|x) the quantity
    ``log l(x|theta) + log p(theta) - log q(theta|x)`` equals the log
    marginal exactly when both networks are exact, so the scatter of the
    per-draw values measures approximation error rather than Monte Carlo
    noise.  Non-finite draws are excluded and counted; if every draw is
    non-finite the estimate is refused.
    """
    if model.name != approx.model_name:
        raise ModelMismatchError(
            f"approximator was trained on {approx.model_name!r}, "
            f"got model {model.name!r}")
    if n_draws < 1:
        raise ConfigError(f"n_draws must be >= 1, got {n_draws}")
    x = np.asarray(x, dtype=np.float64)
    draws = approx.posterior_sample(x, n_draws, rng)
    tiled = _tile_dataset(x, n_draws)
    log_q = np.asarray(approx.posterior_log_prob(draws, tiled))
    log_l = np.asarray(approx.likelihood_log_prob(tiled, draws))
    log_p = np.asarray(model.prior_log_density(draws))
    values = log_l + log_p - log_q
    finite = np.isfinite(values)
    kept = values[finite]
    if kept.size == 0:
        raise NonFiniteError(
            "lml_per_theta_values",
            f"all {n_draws} per-draw values were non-finite")
    spread = float(np.std(kept)) if kept.size >= 2 else None
    return LmlEstimate(
        per_theta_values=values,
        point_estimate=float(np.median(kept)),
        spread=spread,
        n_draws=n_draws,
        n_excluded=int(n_draws - kept.size),
    )


# -- expected log predictive density --------------------------------------


@dataclass(frozen=True)
class ElpdEstimate:
    """Predictive log density of held-out points under an amortized posterior.

    Each entry of ``per_point_log_densities`` is a log-mean-exp over
    ``n_draws`` per-point likelihood evaluations; ``total`` is their sum.
    """

    per_point_log_densities: np.ndarray
    total: float
    n_draws: int
    n_excluded: int

    def to_records(self) -> list[dict]:
        summary = {
            "record": "summary",
            "kind": "elpd",
            "format_version": FORMAT_VERSION,
            "total": float(self.total),
            "n_points": int(self.per_point_log_densities.size),
            "n_draws": int(self.n_draws),
            "n_excluded": int(self.n_excluded),
        }
        rows = [{"record": "point", "index": i, "value": _finite_or_none(v)}
                for i, v in enumerate(self.per_point_log_densities)]
        return [summary] + rows


def estimate_elpd(approx: JointApproximator, x_fit, x_new,
                  n_draws: int, rng: np.random.Generator) -> ElpdEstimate:
    """Monte Carlo expected log predictive density for new points.

    Draws ``n_draws`` parameters from the posterior conditioned on
    ``x_fit`` and averages the per-point likelihood of each new point over
    them in log space.  Requires an exchangeable likelihood head, since
    only that head defines a per-observation density.
    """
    if approx.likelihood_spec.variant != "exchangeable":
        raise ConfigError(
            "predictive densities need an exchangeable likelihood head, "
            f"got {approx.likelihood_spec.variant!r}")
    if n_draws < 10:
        raise ConfigError(f"n_draws must be >= 10, got {n_draws}")
    channels = approx.data_shape.dims[1]
    x_new = np.asarray(x_new, dtype=np.float64).reshape(-1, channels)
    n_points = x_new.shape[0]
    if n_points == 0:
        return ElpdEstimate(np.zeros(0), 0.0, n_draws, 0)
    draws = approx.posterior_sample(x_fit, n_draws, rng)
    points = np.repeat(x_new, n_draws, axis=0)
    thetas = np.tile(draws, (n_points, 1))
    log_l = approx.likelihood_point_log_prob(points, thetas)
    log_l = log_l.reshape(n_points, n_draws)
    finite = np.isfinite(log_l)
    counts = finite.sum(axis=1)
    if np.any(counts == 0):
        bad = int(np.argmin(counts))
        raise NonFiniteError(
            f"elpd_point[{bad}]",
            f"all {n_draws} likelihood evaluations were non-finite")
    masked = np.where(finite, log_l, -np.inf)
    per_point = logsumexp(masked, axis=1) - np.log(counts)
    return ElpdEstimate(
        per_point_log_densities=per_point,
        total=float(per_point.sum()),
        n_draws=n_draws,
        n_excluded=int(finite.size - counts.sum()),
    )


@dataclass(frozen=True)
class LooResult:
    """Leave-one-out cross-validation over one exchangeable dataset.

    ``per_point_elpds`` follows the input row order; ``total`` is their sum
    accumulated in canonical set order so that permuting the input rows
    reproduces it bit for bit.
    """

    per_point_elpds: np.ndarray
    total: float
    n_draws: int
    n_excluded: int

    def to_records(self) -> list[dict]:
        summary = {
            "record": "summary",
            "kind": "loo_cv",
            "format_version": FORMAT_VERSION,
            "total": float(self.total),
            "n_points": int(self.per_point_elpds.size),
            "n_draws": int(self.n_draws),
            "n_excluded": int(self.n_excluded),
        }
        rows = [{"record": "fold", "index": i, "value": _finite_or_none(v)}
                for i, v in enumerate(self.per_point_elpds)]
        return [summary] + rows


def loo_cv(approx: JointApproximator, x_set, n_draws: int,
           rng: np.random.Generator) -> LooResult:
    """Exact refit-free LOO: one amortized predictive evaluation per point.

    Fold ``i`` conditions the posterior on the other ``N - 1`` points and
    scores point ``i``.  Fold randomness is keyed on each point's canonical
    rank and the held-in rows are canonically ordered before conditioning,
    so a permuted copy of ``x_set`` yields identical per-fold values and an
    identical total.  The approximator itself is never touched.
    """
    channels = approx.data_shape.dims[1]
    x_set = np.asarray(x_set, dtype=np.float64).reshape(-1, channels)
    n_points = x_set.shape[0]
    if n_points < 2:
        raise DimensionMismatchError(
            f"leave-one-out needs at least 2 points, got {n_points}")
    canonical_rank = np.empty(n_points, dtype=np.int64)
    order = canonical_set_order(x_set)
    canonical_rank[order] = np.arange(n_points)
    root = int(rng.integers(2 ** 63))
    contributions = np.zeros(n_points)
    n_excluded = 0
    for i in range(n_points):
        fold_rng = make_rng(derive_seed(root, int(canonical_rank[i])))
        x_fit = np.delete(x_set, i, axis=0)
        x_fit = x_fit[canonical_set_order(x_fit)]
        fold = estimate_elpd(approx, x_fit, x_set[i:i + 1], n_draws, fold_rng)
        contributions[i] = fold.total
        n_excluded += fold.n_excluded
    return LooResult(
        per_point_elpds=contributions,
        total=float(contributions[order].sum()),
        n_draws=n_draws,
        n_excluded=n_excluded,
    )


# -- critic-filtered surrogate simulation ---------------------------------


@dataclass(frozen=True)
class CriticReference:
    """Posterior self-scores of real simulator probes.

    ``scores`` holds ``log q(theta_i | x_i)`` for prior-predictive pairs
    drawn from the actual simulator; the filter compares surrogate draws
    against a low quantile of this distribution.  Build once per model and
    reuse.
    """

    model_name: str
    scores: np.ndarray


def build_critic_reference(approx: JointApproximator, model: BayesianModel,
                           n_probes: int, rng: np.random.Generator) -> CriticReference:
    """Score ``n_probes`` real prior-predictive pairs under the posterior net."""
    if model.name != approx.model_name:
        raise ModelMismatchError(
            f"approximator was trained on {approx.model_name!r}, "
            f"got model {model.name!r}")
    if n_probes < 10:
        raise ConfigError(f"n_probes must be >= 10, got {n_probes}")
    batch = presimulate(model, n_probes, int(rng.integers(2 ** 63)))
    scores = np.asarray(approx.posterior_log_prob(batch.theta, batch.x))
    scores = scores[np.isfinite(scores)]
    if scores.size == 0:
        raise NonFiniteError(
            "critic_reference", "every probe score was non-finite")
    return CriticReference(model_name=model.name, scores=scores)


def surrogate_simulate_filtered(approx: JointApproximator, theta, n_draws: int,
                                critic_quantile: float, rng: np.random.Generator,
                                reference: CriticReference | None = None,
                                ) -> tuple[np.ndarray, dict]:
    """Draw surrogate datasets at ``theta``, rejecting implausible ones.

    Each draw is scored by the posterior network's log density of the
    generating ``theta`` given that draw; draws scoring below the
    ``critic_quantile`` of the reference distribution are rejected.  A
    quantile of 1 disables filtering.  Any filtering below 1 without a
    reference is refused rather than silently skipped.

    Returns the accepted draws plus a stats dict with the draw, accept,
    reject, and non-finite counts, the threshold, and the quantile.
    """
    if n_draws < 1:
        raise ConfigError(f"n_draws must be >= 1, got {n_draws}")
    if not 0.0 < critic_quantile <= 1.0:
        raise ConfigError(
            f"critic_quantile must lie in (0, 1], got {critic_quantile}")
    theta = np.asarray(theta, dtype=np.float64).reshape(approx.theta_dim)
    thetas = np.repeat(theta[None, :], n_draws, axis=0)
    draws = approx.surrogate_simulate_batch(thetas, rng)
    finite = np.isfinite(draws.reshape(n_draws, -1)).all(axis=1)
    n_nonfinite = int(n_draws - finite.sum())
    if critic_quantile == 1.0:
        accepted = draws[finite]
        threshold = None
        n_rejected = 0
    else:
        if reference is None:
            raise FilterReferenceError(
                "no critic reference distribution available; build one with "
                "build_critic_reference or pass critic_quantile=1 to disable "
                "filtering")
        if reference.model_name != approx.model_name:
            raise ModelMismatchError(
                f"critic reference belongs to {reference.model_name!r}, "
                f"approximator to {approx.model_name!r}")
        threshold = float(np.quantile(reference.scores, critic_quantile))
        scores = np.asarray(
            approx.posterior_log_prob(thetas[finite], draws[finite]))
        keep = scores >= threshold
        accepted = draws[finite][keep]
        n_rejected = int(np.sum(~keep))
    stats = {
        "n_draws": int(n_draws),
        "n_accepted": int(accepted.shape[0]),
        "n_rejected_by_critic": n_rejected,
        "n_nonfinite": n_nonfinite,
        "threshold": threshold,
        "critic_quantile": float(critic_quantile),
    }
    return accepted, stats


# -- persistence ----------------------------------------------------------


def save_estimate(estimate, path, extra: dict | None = None) -> None:
    """Write an estimate as NDJSON: one summary record, then detail rows.

    ``extra`` entries (seeds, config hashes, quantiles) are merged into the
    summary record so every output file echoes what produced it.
    """
    records = estimate.to_records()
    if extra:
        records[0] = {**records[0], **extra}
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
