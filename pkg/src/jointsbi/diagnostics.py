"""Calibration and sample-fidelity diagnostics.

Simulation-based calibration compares prior draws against their rank among
posterior draws; run with the real simulator it checks the posterior network
alone (``sbc``), run with the learned likelihood as the data generator it
checks the joint pipeline (``jsbc``).  An approximator whose sbc ranks pass
while its jsbc ranks fail localizes the problem in the likelihood network.

Uniformity is judged on ECDF-difference trajectories against simultaneous
confidence bands calibrated by direct Monte Carlo under the discrete rank
null, so no binning parameter is involved.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION
from .errors import (
    ConfigError,
    DimensionMismatchError,
    ModelMismatchError,
    NonFiniteError,
    SimulationFailedError,
)
from .kernel.rng import derive_seed, make_rng
from .simulators.base import BayesianModel
from .summaries import MMD_BANDWIDTHS
from .training import JointApproximator

MODES = ("sbc", "jsbc")

_GRID_POINTS = 101
# fraction of surrogate datasets allowed to fail before the run is unusable
_MAX_DROP_FRACTION = 0.05


@dataclass(frozen=True)
class RankSample:
    """Fractional ranks of true parameters among posterior draws."""

    model_name: str
    mode: str
    n_datasets: int
    n_posterior_draws: int
    fractional_ranks: np.ndarray  # (n_datasets, theta_dim)
    n_dropped: int = 0

    @property
    def theta_dim(self) -> int:
        return self.fractional_ranks.shape[1]


@dataclass(frozen=True)
class EcdfBand:
    """Simultaneous envelope for ECDF-difference trajectories of uniform ranks."""

    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    simultaneous_level: float
    n_band_simulations: int
    n_datasets: int
    n_posterior_draws: int


@dataclass(frozen=True)
class DimensionCalibration:
    dim: int
    trajectory: np.ndarray
    inside_band: bool
    max_abs_difference: float


@dataclass(frozen=True)
class CalibrationReport:
    """Per-dimension band containment plus the all-dimensions verdict."""

    model_name: str
    mode: str
    per_dimension: tuple[DimensionCalibration, ...]
    band: EcdfBand
    n_dropped: int

    @property
    def verdict(self) -> bool:
        return all(d.inside_band for d in self.per_dimension)


def _posterior_rng_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    # one root seed per dataset keeps results independent of evaluation order
    return rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)


def _fractional_rank(draws: np.ndarray, theta_star: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    below = (draws < theta_star).sum(axis=0)
    ties = (draws == theta_star).sum(axis=0)
    jitter = rng.uniform(size=theta_star.shape)
    return (below + jitter * ties) / draws.shape[0]


def sbc_ranks(approx: JointApproximator | None, model: BayesianModel,
              n_datasets: int, n_posterior_draws: int, mode: str,
              rng: np.random.Generator, posterior_sampler=None) -> RankSample:
    """Rank each prior draw among posterior draws for its own dataset.

    ``mode="sbc"`` generates data with the real simulator; ``mode="jsbc"``
    generates it with the learned likelihood network, so a failure implicates
    the joint pipeline rather than the posterior alone.  ``posterior_sampler``
    may replace the network sampler with any ``(x, n, rng) -> draws`` callable
    (reference samplers, deliberately broken samplers for sensitivity checks).
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if approx is None and (posterior_sampler is None or mode == "jsbc"):
        raise ConfigError("an approximator is required unless a posterior_sampler "
                          "is supplied in sbc mode")
    if approx is not None and approx.model_name != model.name:
        raise ModelMismatchError(
            f"approximator was trained on {approx.model_name!r}, "
            f"diagnostics requested for {model.name!r}")
    if n_datasets < 100:
        warnings.warn(f"{n_datasets} datasets is below the recommended 100; "
                      "rank ECDFs will be noisy", stacklevel=2)
    if n_posterior_draws < 50:
        warnings.warn(f"{n_posterior_draws} posterior draws is below the "
                      "recommended 50; ranks will be coarse", stacklevel=2)

    sample = posterior_sampler
    if sample is None:
        sample = lambda x, n, child: approx.posterior_sample(x, n, child)

    seeds = _posterior_rng_seeds(rng, n_datasets)
    ranks = []
    dropped = 0
    for i in range(n_datasets):
        row_rng = make_rng(int(seeds[i]))
        theta_star = np.asarray(model.prior_sampler(row_rng), dtype=np.float64)
        if mode == "sbc":
            x = _simulate_with_retries(model, theta_star, seeds[i], row_rng)
        else:
            try:
                x = approx.surrogate_simulate(theta_star, row_rng)
            except NonFiniteError:
                dropped += 1
                continue
            if not np.isfinite(x).all():
                dropped += 1
                continue
        draws = sample(x, n_posterior_draws, row_rng)
        ranks.append(_fractional_rank(np.asarray(draws), theta_star, row_rng))

    if dropped > _MAX_DROP_FRACTION * n_datasets:
        raise SimulationFailedError(
            f"surrogate produced non-finite data for {dropped} of "
            f"{n_datasets} datasets; the likelihood network is unusable")
    return RankSample(model_name=model.name, mode=mode,
                      n_datasets=n_datasets - dropped,
                      n_posterior_draws=n_posterior_draws,
                      fractional_ranks=np.asarray(ranks), n_dropped=dropped)


def _simulate_with_retries(model: BayesianModel, theta: np.ndarray,
                           seed: int, row_rng: np.random.Generator) -> np.ndarray:
    # first attempt reuses the dataset stream; retries get derived streams
    last = None
    for attempt in range(10):
        attempt_rng = row_rng if attempt == 0 else make_rng(derive_seed(int(seed), "retry", attempt))
        try:
            x = np.asarray(model.simulator(theta, attempt_rng), dtype=np.float64)
        except (SimulationFailedError, FloatingPointError, OverflowError, ValueError) as err:
            last = err
            continue
        if np.isfinite(x).all():
            return x
        last = SimulationFailedError(f"{model.name} produced non-finite data")
    raise SimulationFailedError(
        f"{model.name} failed 10 times during calibration; last error: {last}")


def ecdf_difference(ranks: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """ECDF of ``ranks`` minus the uniform CDF, evaluated on ``grid``."""
    ranks = np.sort(np.asarray(ranks, dtype=np.float64))
    ecdf = np.searchsorted(ranks, grid, side="right") / ranks.shape[0]
    return ecdf - grid


def ecdf_band(n_datasets: int, n_posterior_draws: int,
              simultaneous_level: float, n_band_simulations: int,
              rng: np.random.Generator) -> EcdfBand:
    """Monte Carlo simultaneous band for rank-ECDF differences.

    Simulates the exact null (discrete uniform ranks on ``{0..S}/S``), then
    picks the pointwise envelope quantile whose full-containment rate equals
    the requested simultaneous level.
    """
    if not 0 < simultaneous_level < 1:
        raise ConfigError(f"simultaneous_level must lie in (0, 1), "
                          f"got {simultaneous_level}")
    if n_band_simulations < 1000:
        raise ConfigError("band calibration needs at least 1000 simulations")

    grid = np.linspace(0.0, 1.0, _GRID_POINTS + 2)[1:-1]
    S = n_posterior_draws
    abs_diffs = np.empty((n_band_simulations, grid.shape[0]))
    for s in range(n_band_simulations):
        null_ranks = rng.integers(0, S + 1, size=n_datasets) / S
        abs_diffs[s] = np.abs(ecdf_difference(null_ranks, grid))

    # per-simulation score: the pointwise quantile level needed to contain it
    column_order = abs_diffs.argsort(axis=0, kind="stable")
    column_rank = np.empty_like(column_order)
    rows = np.arange(n_band_simulations)[:, None]
    np.put_along_axis(column_rank, column_order, rows.repeat(grid.shape[0], axis=1), axis=0)
    needed = (column_rank.max(axis=1) + 1) / n_band_simulations
    gamma = float(np.quantile(needed, simultaneous_level, method="higher"))
    envelope = np.quantile(abs_diffs, gamma, axis=0, method="higher")
    return EcdfBand(grid=grid, lower=-envelope, upper=envelope,
                    simultaneous_level=simultaneous_level,
                    n_band_simulations=n_band_simulations,
                    n_datasets=n_datasets, n_posterior_draws=S)


def calibration_report(ranks: RankSample, band: EcdfBand) -> CalibrationReport:
    """Check each parameter dimension's rank ECDF against the band."""
    if (band.n_datasets != ranks.n_datasets
            or band.n_posterior_draws != ranks.n_posterior_draws):
        raise DimensionMismatchError(
            f"band calibrated for (n={band.n_datasets}, S={band.n_posterior_draws}) "
            f"but ranks carry (n={ranks.n_datasets}, S={ranks.n_posterior_draws})")
    dims = []
    for d in range(ranks.theta_dim):
        trajectory = ecdf_difference(ranks.fractional_ranks[:, d], band.grid)
        inside = bool(np.all((trajectory >= band.lower) & (trajectory <= band.upper)))
        dims.append(DimensionCalibration(
            dim=d, trajectory=trajectory, inside_band=inside,
            max_abs_difference=float(np.abs(trajectory).max())))
    return CalibrationReport(model_name=ranks.model_name, mode=ranks.mode,
                             per_dimension=tuple(dims), band=band,
                             n_dropped=ranks.n_dropped)


def run_calibration(approx: JointApproximator | None, model: BayesianModel,
                    n_datasets: int, n_posterior_draws: int, mode: str,
                    rng: np.random.Generator, level: float = 0.95,
                    n_band_simulations: int = 2000,
                    posterior_sampler=None) -> CalibrationReport:
    """Ranks, a band, and a report in one call.

    The band is built at the Bonferroni-adjusted per-dimension level
    ``1 - (1 - level)/theta_dim`` so the all-dimensions verdict holds at
    roughly the requested family level.
    """
    ranks = sbc_ranks(approx, model, n_datasets, n_posterior_draws, mode, rng,
                      posterior_sampler=posterior_sampler)
    per_dim_level = 1.0 - (1.0 - level) / ranks.theta_dim
    band = ecdf_band(ranks.n_datasets, n_posterior_draws, per_dim_level,
                     n_band_simulations, rng)
    return calibration_report(ranks, band)


def fault_attribution(sbc_report: CalibrationReport,
                      jsbc_report: CalibrationReport) -> dict:
    """Localize a calibration failure between the two networks.

    A passing sbc report certifies the posterior network; if jsbc then fails,
    the only remaining moving part is the likelihood network.
    """
    if sbc_report.mode != "sbc" or jsbc_report.mode != "jsbc":
        raise ConfigError("fault attribution needs one sbc and one jsbc report")
    if sbc_report.model_name != jsbc_report.model_name:
        raise ModelMismatchError(
            f"reports disagree on the model: {sbc_report.model_name!r} "
            f"vs {jsbc_report.model_name!r}")
    posterior_ok = sbc_report.verdict
    joint_ok = jsbc_report.verdict
    if posterior_ok and not joint_ok:
        implicated = "likelihood_network"
    elif not posterior_ok:
        implicated = "posterior_network"
    else:
        implicated = "none"
    return {
        "model": sbc_report.model_name,
        "posterior_calibrated": posterior_ok,
        "joint_calibrated": joint_ok,
        "implicated": implicated,
    }


# -- two-sample kernel test ----------------------------------------------


def _kernel_matrix(a: np.ndarray, b: np.ndarray,
                   bandwidths=MMD_BANDWIDTHS) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    out = np.zeros_like(d2)
    for bw in bandwidths:
        out += np.exp(-d2 / (2.0 * bw * bw))
    return out


def _unbiased_mmd_from_blocks(kaa, kbb, kab) -> float:
    n, m = kaa.shape[0], kbb.shape[0]
    term_a = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def mmd_two_sample(a: np.ndarray, b: np.ndarray, rng: np.random.Generator,
                   n_permutations: int = 1000) -> tuple[float, float]:
    """Unbiased squared MMD plus a permutation p-value.

    Uses the same Gaussian kernel mixture as the summary-space penalty; the
    p-value counts permuted statistics at least as large as the observed one
    with the add-one correction.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(
            f"samples must be 2-D with matching width, got {a.shape} and {b.shape}")
    n, m = a.shape[0], b.shape[0]
    if n < 10 or m < 10:
        raise DimensionMismatchError(
            f"need at least 10 samples per side, got {n} and {m}")
    if n_permutations < 500:
        raise ConfigError("p-value needs at least 500 permutation resamples")

    pooled = np.concatenate([a, b], axis=0)
    gram = _kernel_matrix(pooled, pooled)
    idx_a = np.arange(n)
    idx_b = np.arange(n, n + m)
    observed = _unbiased_mmd_from_blocks(
        gram[np.ix_(idx_a, idx_a)], gram[np.ix_(idx_b, idx_b)],
        gram[np.ix_(idx_a, idx_b)])

    at_least = 0
    for _ in range(n_permutations):
        perm = rng.permutation(n + m)
        pa, pb = perm[:n], perm[n:]
        stat = _unbiased_mmd_from_blocks(
            gram[np.ix_(pa, pa)], gram[np.ix_(pb, pb)], gram[np.ix_(pa, pb)])
        if stat >= observed:
            at_least += 1
    p_value = (1 + at_least) / (1 + n_permutations)
    return observed, p_value


# -- report files --------------------------------------------------------


def save_calibration_report(report: CalibrationReport, path: str | Path,
                            plot_path: str | Path | None = None,
                            extra: dict | None = None) -> None:
    """NDJSON summary plus per-dimension records; optional plot-data JSON
    carrying the grid, band, and raw trajectories.  ``extra`` entries (seeds,
    config hashes) are merged into the summary record."""
    band = report.band
    summary = {
        "record": "summary",
        "format_version": FORMAT_VERSION,
        "model": report.model_name,
        "mode": report.mode,
        "verdict": report.verdict,
        "n_datasets": band.n_datasets,
        "n_posterior_draws": band.n_posterior_draws,
        "n_dropped": report.n_dropped,
        "band_level": band.simultaneous_level,
        "n_band_simulations": band.n_band_simulations,
        "band_construction": "monte-carlo simultaneous envelope on ecdf differences",
    }
    if extra:
        summary.update(extra)
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
        for dim in report.per_dimension:
            fh.write(json.dumps({
                "record": "dimension",
                "dim": dim.dim,
                "inside_band": dim.inside_band,
                "max_abs_difference": dim.max_abs_difference,
            }, sort_keys=True) + "\n")
    if plot_path is not None:
        payload = {
            "grid": band.grid.tolist(),
            "lower": band.lower.tolist(),
            "upper": band.upper.tolist(),
            "trajectories": [d.trajectory.tolist() for d in report.per_dimension],
        }
        Path(plot_path).write_text(json.dumps(payload, sort_keys=True),
                                   encoding="utf-8")
