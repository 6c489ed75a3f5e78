"""Benchmark model constructors.

Each constructor returns a fully wired :class:`BayesianModel`.  Numeric
constants live in the ``constants`` dict of the returned model so they are
serialized with every dataset; docs/models.md tabulates them with provenance
notes.  Conjugate models carry analytic oracles, the crescent model carries a
brute-force grid posterior, the rest have ``analytic_oracles=None``.
"""

from __future__ import annotations

import logging
import math
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular, toeplitz
from scipy.special import expit, logsumexp, ndtri
from scipy.stats import norm, truncnorm

from ..errors import ConfigError, SimulationFailedError
from ..kernel.rng import make_rng
from .base import AnalyticOracles, BayesianModel, DataShape

logger = logging.getLogger("jointsbi.simulators")

_SQRT2 = math.sqrt(2.0)


def _as_batch(theta, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(theta, dtype=np.float64)
    single = arr.ndim == 1
    return arr.reshape(-1, dim), single


def _maybe_scalar(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


# -- conjugate Gaussian, 10-D -------------------------------------------


def gaussian_linear(dim: int = 10) -> BayesianModel:
    """Gaussian location model with a conjugate Gaussian prior.

    theta ~ N(0, prior_var I), x = theta + N(0, noise_var I).  Everything
    downstream of it has a closed form, which makes this the main oracle
    model for posterior, marginal-likelihood, and predictive checks.
    """
    prior_var, noise_var = 0.1, 0.1
    post_var = 1.0 / (1.0 / prior_var + 1.0 / noise_var)
    shrink = post_var / noise_var
    marg_var = prior_var + noise_var
    pred_var = post_var + noise_var

    def prior_sampler(rng):
        return math.sqrt(prior_var) * rng.standard_normal(dim)

    def prior_log_density(theta):
        arr, single = _as_batch(theta, dim)
        vals = -0.5 * dim * math.log(2 * math.pi * prior_var) \
            - 0.5 * (arr ** 2).sum(axis=1) / prior_var
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        return theta + math.sqrt(noise_var) * rng.standard_normal(dim)

    def posterior_moments(x):
        return shrink * np.asarray(x), post_var * np.eye(dim)

    def posterior_sampler(x, n_draws, rng):
        mean = shrink * np.asarray(x)
        return mean + math.sqrt(post_var) * rng.standard_normal((n_draws, dim))

    def log_marginal(x):
        x = np.asarray(x)
        return float(-0.5 * dim * math.log(2 * math.pi * marg_var)
                     - 0.5 * (x ** 2).sum() / marg_var)

    def posterior_predictive_log_density(x_new, x_obs):
        mean = shrink * np.asarray(x_obs)
        resid = np.asarray(x_new).reshape(dim) - mean
        return float(-0.5 * dim * math.log(2 * math.pi * pred_var)
                     - 0.5 * (resid ** 2).sum() / pred_var)

    return BayesianModel(
        name="gaussian_linear",
        theta_dim=dim,
        data_shape=DataShape("flat", (dim,)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={"dim": dim, "prior_var": prior_var, "noise_var": noise_var},
        analytic_oracles=AnalyticOracles(
            posterior_sampler=posterior_sampler,
            posterior_moments=posterior_moments,
            log_marginal=log_marginal,
            posterior_predictive_log_density=posterior_predictive_log_density,
        ),
    )


def gaussian_linear_uniform(dim: int = 10) -> BayesianModel:
    """Gaussian location model with a uniform prior on [-1, 1]^dim.

    The posterior factorizes into truncated normals, so moments and the
    marginal likelihood stay available in closed form.
    """
    bound, noise_var = 1.0, 0.1
    sigma = math.sqrt(noise_var)

    def prior_sampler(rng):
        return rng.uniform(-bound, bound, dim)

    def prior_log_density(theta):
        arr, single = _as_batch(theta, dim)
        inside = np.all(np.abs(arr) <= bound, axis=1)
        vals = np.where(inside, -dim * math.log(2 * bound), -np.inf)
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        return theta + sigma * rng.standard_normal(dim)

    def _std_bounds(x):
        x = np.asarray(x)
        return (-bound - x) / sigma, (bound - x) / sigma

    def posterior_sampler(x, n_draws, rng):
        a, b = _std_bounds(x)
        return truncnorm.rvs(a, b, loc=np.asarray(x), scale=sigma,
                             size=(n_draws, dim), random_state=rng)

    def posterior_moments(x):
        a, b = _std_bounds(x)
        mean = truncnorm.mean(a, b, loc=np.asarray(x), scale=sigma)
        var = truncnorm.var(a, b, loc=np.asarray(x), scale=sigma)
        return mean, np.diag(var)

    def log_marginal(x):
        a, b = _std_bounds(x)
        mass = norm.cdf(b) - norm.cdf(a)
        return float(np.sum(np.log(np.clip(mass, 1e-300, None))
                            - math.log(2 * bound)))

    return BayesianModel(
        name="gaussian_linear_uniform",
        theta_dim=dim,
        data_shape=DataShape("flat", (dim,)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={"dim": dim, "prior_bound": bound, "noise_var": noise_var},
        analytic_oracles=AnalyticOracles(
            posterior_sampler=posterior_sampler,
            posterior_moments=posterior_moments,
            log_marginal=log_marginal,
        ),
    )


# -- simple likelihood, complex posterior -------------------------------


def slcp() -> BayesianModel:
    """Five parameters drive the moments of a 2-D Gaussian; four draws
    from it are concatenated into one 8-vector.  The likelihood is plain
    Gaussian but the posterior is strongly non-Gaussian.
    """
    theta_dim, bound, n_draws = 5, 3.0, 4

    def prior_sampler(rng):
        return rng.uniform(-bound, bound, theta_dim)

    def prior_log_density(theta):
        arr, single = _as_batch(theta, theta_dim)
        inside = np.all(np.abs(arr) <= bound, axis=1)
        vals = np.where(inside, -theta_dim * math.log(2 * bound), -np.inf)
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        mean = theta[:2]
        s1, s2 = theta[2] ** 2, theta[3] ** 2
        rho = math.tanh(theta[4])
        cov = np.array([[s1 ** 2, rho * s1 * s2], [rho * s1 * s2, s2 ** 2]])
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(2))
        draws = mean + rng.standard_normal((n_draws, 2)) @ chol.T
        return draws.reshape(-1)

    return BayesianModel(
        name="slcp",
        theta_dim=theta_dim,
        data_shape=DataShape("flat", (2 * n_draws,)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={"prior_bound": bound, "n_draws": n_draws},
    )


# -- Bernoulli GLM on sufficient statistics -----------------------------

_GLM_T = 100
_GLM_FILTER_DIM = 9
_GLM_DESIGN_SEED = 1893
_GLM_BIAS_STD = 2.0
_GLM_RIDGE = 0.5


@lru_cache(maxsize=1)
def _glm_design() -> np.ndarray:
    """Fixed white-noise stimulus arranged as a lagged design matrix.

    Row t holds the current and the eight previous stimulus values, so the
    filter weights act as a temporal receptive field.
    """
    stim = make_rng(_GLM_DESIGN_SEED).standard_normal(_GLM_T)
    first_row = np.zeros(_GLM_FILTER_DIM)
    first_row[0] = stim[0]
    return toeplitz(stim, first_row)


@lru_cache(maxsize=1)
def _glm_filter_prior() -> tuple[np.ndarray, np.ndarray, float]:
    # smoothness prior: precision from second differences plus a ridge
    d2 = np.zeros((_GLM_FILTER_DIM - 2, _GLM_FILTER_DIM))
    for i in range(_GLM_FILTER_DIM - 2):
        d2[i, i:i + 3] = (1.0, -2.0, 1.0)
    precision = d2.T @ d2 + _GLM_RIDGE * np.eye(_GLM_FILTER_DIM)
    chol = np.linalg.cholesky(precision)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return precision, chol, logdet


def bernoulli_glm() -> BayesianModel:
    """Bernoulli GLM over a fixed stimulus, reduced to sufficient statistics.

    theta = (bias, 9 filter weights); data = (sum of spikes, design^T spikes).
    The sufficient-statistic reduction keeps the data continuous-ish and
    10-dimensional regardless of the number of time bins.
    """
    design = _glm_design()
    precision, chol, logdet = _glm_filter_prior()
    theta_dim = 1 + _GLM_FILTER_DIM

    def prior_sampler(rng):
        bias = _GLM_BIAS_STD * rng.standard_normal()
        weights = solve_triangular(chol.T, rng.standard_normal(_GLM_FILTER_DIM),
                                   lower=False)
        return np.concatenate([[bias], weights])

    def prior_log_density(theta):
        arr, single = _as_batch(theta, theta_dim)
        bias, weights = arr[:, 0], arr[:, 1:]
        bias_term = -0.5 * math.log(2 * math.pi * _GLM_BIAS_STD ** 2) \
            - 0.5 * bias ** 2 / _GLM_BIAS_STD ** 2
        quad = np.einsum("bi,ij,bj->b", weights, precision, weights)
        weight_term = 0.5 * logdet - 0.5 * _GLM_FILTER_DIM * math.log(2 * math.pi) \
            - 0.5 * quad
        return _maybe_scalar(bias_term + weight_term, single)

    def simulator(theta, rng):
        psi = theta[0] + design @ theta[1:]
        spikes = (rng.random(_GLM_T) < expit(psi)).astype(np.float64)
        return np.concatenate([[spikes.sum()], design.T @ spikes])

    return BayesianModel(
        name="bernoulli_glm",
        theta_dim=theta_dim,
        data_shape=DataShape("flat", (theta_dim,)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={
            "n_bins": _GLM_T,
            "filter_dim": _GLM_FILTER_DIM,
            "design_seed": _GLM_DESIGN_SEED,
            "bias_std": _GLM_BIAS_STD,
            "ridge": _GLM_RIDGE,
        },
    )


# -- two-scale Gaussian mixture -----------------------------------------


def gaussian_mixture() -> BayesianModel:
    """Equal mixture of a wide and a narrow Gaussian sharing location theta."""
    bound, wide_scale, narrow_scale = 10.0, 1.0, 0.1

    def prior_sampler(rng):
        return rng.uniform(-bound, bound, 2)

    def prior_log_density(theta):
        arr, single = _as_batch(theta, 2)
        inside = np.all(np.abs(arr) <= bound, axis=1)
        vals = np.where(inside, -2 * math.log(2 * bound), -np.inf)
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        scale = wide_scale if rng.random() < 0.5 else narrow_scale
        return theta + scale * rng.standard_normal(2)

    return BayesianModel(
        name="gaussian_mixture",
        theta_dim=2,
        data_shape=DataShape("flat", (2,)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={"prior_bound": bound, "scales": [wide_scale, narrow_scale]},
    )


# -- crescent (bimodal posterior) ---------------------------------------

TWO_MOONS_VARIANTS = {
    # larger moons close to the prior boundary
    "wiqvist": {"r_loc": 1.0, "r_scale": 0.1, "offset": 0.25, "prior_bound": 2.0},
    # small moons, broad prior
    "lueckmann_wide": {"r_loc": 0.1, "r_scale": 0.01, "offset": 0.25, "prior_bound": 2.0},
}


def two_moons_log_likelihood(x, theta, *, r_loc: float, r_scale: float,
                             offset: float) -> np.ndarray:
    """Closed-form log density of the crescent simulator.

    Inverting the deterministic shift leaves polar noise (uniform angle on a
    half circle, Gaussian radius), whose density is N(|c|; r_loc, r_scale)
    / (pi |c|) on the half plane c_1 > 0.  Vectorized over theta rows.
    """
    x = np.asarray(x, dtype=np.float64).reshape(2)
    arr, single = _as_batch(theta, 2)
    t_sum = arr[:, 0] + arr[:, 1]
    c1 = x[0] - offset + np.abs(t_sum) / _SQRT2
    c2 = x[1] - (arr[:, 1] - arr[:, 0]) / _SQRT2
    radius = np.hypot(c1, c2)
    with np.errstate(divide="ignore"):
        vals = norm.logpdf(radius, loc=r_loc, scale=r_scale) \
            - np.log(np.pi * radius)
    vals = np.where(c1 > 0, vals, -np.inf)
    return _maybe_scalar(vals, single)


def two_moons(variant: str = "wiqvist") -> BayesianModel:
    """Crescent-shaped likelihood with a bimodal posterior.

    The absolute-value shift makes theta and -theta (reflected) explain the
    same x, so conditioning on x = (0, 0) yields two separated crescents.
    """
    if variant not in TWO_MOONS_VARIANTS:
        raise ConfigError(
            f"unknown variant {variant!r}; known: {sorted(TWO_MOONS_VARIANTS)}")
    c = dict(TWO_MOONS_VARIANTS[variant])
    bound = c["prior_bound"]

    def prior_sampler(rng):
        return rng.uniform(-bound, bound, 2)

    def prior_log_density(theta):
        arr, single = _as_batch(theta, 2)
        inside = np.all(np.abs(arr) <= bound, axis=1)
        vals = np.where(inside, -2 * math.log(2 * bound), -np.inf)
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        angle = rng.uniform(-0.5 * math.pi, 0.5 * math.pi)
        radius = c["r_loc"] + c["r_scale"] * rng.standard_normal()
        crescent = np.array([radius * math.cos(angle) + c["offset"],
                             radius * math.sin(angle)])
        shift = np.array([-abs(theta[0] + theta[1]),
                          theta[1] - theta[0]]) / _SQRT2
        return crescent + shift

    def posterior_sampler(x, n_draws, rng):
        # brute-force grid posterior; the uniform prior cancels in the weights
        grid = np.linspace(-bound, bound, 401)
        t1, t2 = np.meshgrid(grid, grid, indexing="ij")
        points = np.stack([t1.ravel(), t2.ravel()], axis=1)
        logw = two_moons_log_likelihood(
            x, points, r_loc=c["r_loc"], r_scale=c["r_scale"], offset=c["offset"])
        logw = np.where(np.isfinite(logw), logw, -np.inf)
        weights = np.exp(logw - logsumexp(logw))
        idx = rng.choice(points.shape[0], size=n_draws, p=weights / weights.sum())
        cell = grid[1] - grid[0]
        return points[idx] + rng.uniform(-0.5 * cell, 0.5 * cell, size=(n_draws, 2))

    return BayesianModel(
        name=f"two_moons_{variant}",
        theta_dim=2,
        data_shape=DataShape("flat", (2,)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={"variant": variant, **c},
        analytic_oracles=AnalyticOracles(posterior_sampler=posterior_sampler),
    )


# -- epidemic time series -----------------------------------------------

_SIR_DEFAULTS = {
    "population": 1e6,
    "initial_infected": 1.0,
    "t_end": 160.0,
    "dt": 0.1,
    "n_obs": 10,
    "binomial_n": 1000,
}


def _sir_states(beta: float, gamma: float, c: dict, every: int) -> np.ndarray:
    """RK4-integrated (S, I) recorded every `every` steps.

    Plain-float inner loop; this runs thousands of times during
    presimulation so numpy scalars are deliberately avoided.
    """
    dt = c["dt"]
    n_steps = int(round(c["t_end"] / dt))
    population = c["population"]
    inv_n = 1.0 / population
    s = population - c["initial_infected"]
    i = c["initial_infected"]
    out = []
    for step in range(1, n_steps + 1):
        a1 = beta * s * i * inv_n
        b1 = a1 - gamma * i
        s2 = s - 0.5 * dt * a1
        i2 = i + 0.5 * dt * b1
        a2 = beta * s2 * i2 * inv_n
        b2 = a2 - gamma * i2
        s3 = s - 0.5 * dt * a2
        i3 = i + 0.5 * dt * b2
        a3 = beta * s3 * i3 * inv_n
        b3 = a3 - gamma * i3
        s4 = s - dt * a3
        i4 = i + dt * b3
        a4 = beta * s4 * i4 * inv_n
        b4 = a4 - gamma * i4
        s -= dt * (a1 + 2 * a2 + 2 * a3 + a4) / 6.0
        i += dt * (b1 + 2 * b2 + 2 * b3 + b4) / 6.0
        if step % every == 0:
            out.append((s, i))
    return np.asarray(out)


def sir_trajectory(theta, **overrides) -> np.ndarray:
    """Full deterministic (S, I, R) path at every step, for inspection."""
    c = {**_SIR_DEFAULTS, **overrides}
    states = _sir_states(float(theta[0]), float(theta[1]), c, every=1)
    recovered = c["population"] - states.sum(axis=1)
    return np.column_stack([states, recovered])


def sir() -> BayesianModel:
    """Two-parameter epidemic model observed as binomial infection counts.

    theta = (contact rate, recovery rate), both log-normal a priori; the
    deterministic compartment path is subsampled at 10 times and each
    sample is thinned through Binomial(1000, I/population).
    """
    c = dict(_SIR_DEFAULTS)
    mu = (math.log(0.4), math.log(0.125))
    sd = (0.5, 0.2)

    def prior_sampler(rng):
        return np.array([rng.lognormal(mu[0], sd[0]), rng.lognormal(mu[1], sd[1])])

    def prior_log_density(theta):
        arr, single = _as_batch(theta, 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.log(arr)
            vals = np.zeros(arr.shape[0])
            for k in range(2):
                vals += -logs[:, k] - math.log(sd[k] * math.sqrt(2 * math.pi)) \
                    - 0.5 * ((logs[:, k] - mu[k]) / sd[k]) ** 2
        vals = np.where(np.all(arr > 0, axis=1), vals, -np.inf)
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        every = int(round(c["t_end"] / c["dt"])) // c["n_obs"]
        states = _sir_states(float(theta[0]), float(theta[1]), c, every)
        frac = np.clip(states[:, 1] / c["population"], 0.0, 1.0)
        counts = rng.binomial(c["binomial_n"], frac).astype(np.float64)
        return counts[:, None]

    return BayesianModel(
        name="sir",
        theta_dim=2,
        data_shape=DataShape("series", (c["n_obs"], 1)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={**c, "log_prior_loc": list(mu), "log_prior_scale": list(sd)},
        dt=c["dt"],
    )


# -- predator-prey time series ------------------------------------------

_LV_DEFAULTS = {
    "x0": 30.0,
    "y0": 1.0,
    "t_end": 20.0,
    "dt": 0.1,
    "n_obs": 10,
    "obs_scale": 0.1,
}
_LV_PRIOR_LOC = (-0.125, -3.0, -0.125, -3.0)
_LV_PRIOR_SCALE = (0.5, 0.5, 0.5, 0.5)
_LV_STATE_CAP = 1e7


def _lv_states(rates, c: dict, every: int) -> np.ndarray:
    alpha, beta, gamma, delta = rates
    dt = c["dt"]
    n_steps = int(round(c["t_end"] / dt))
    x, y = c["x0"], c["y0"]
    out = []
    for step in range(1, n_steps + 1):
        a1 = alpha * x - beta * x * y
        b1 = -gamma * y + delta * x * y
        x2, y2 = x + 0.5 * dt * a1, y + 0.5 * dt * b1
        a2 = alpha * x2 - beta * x2 * y2
        b2 = -gamma * y2 + delta * x2 * y2
        x3, y3 = x + 0.5 * dt * a2, y + 0.5 * dt * b2
        a3 = alpha * x3 - beta * x3 * y3
        b3 = -gamma * y3 + delta * x3 * y3
        x4, y4 = x + dt * a3, y + dt * b3
        a4 = alpha * x4 - beta * x4 * y4
        b4 = -gamma * y4 + delta * x4 * y4
        x += dt * (a1 + 2 * a2 + 2 * a3 + a4) / 6.0
        y += dt * (b1 + 2 * b2 + 2 * b3 + b4) / 6.0
        if step % every == 0:
            if not (0.0 < x < _LV_STATE_CAP and 0.0 < y < _LV_STATE_CAP):
                raise SimulationFailedError(
                    f"predator-prey integration left ({x:.3g}, {y:.3g}) at step {step}")
            out.append((x, y))
    return np.asarray(out)


def lotka_volterra_trajectory(theta, **overrides) -> np.ndarray:
    """Deterministic (prey, predator) path at every step, for inspection."""
    c = {**_LV_DEFAULTS, **overrides}
    return _lv_states(tuple(float(t) for t in theta), c, every=1)


def lotka_volterra() -> BayesianModel:
    """Predator-prey dynamics observed with multiplicative log-normal noise."""
    c = dict(_LV_DEFAULTS)

    def prior_sampler(rng):
        return np.array([rng.lognormal(m, s)
                         for m, s in zip(_LV_PRIOR_LOC, _LV_PRIOR_SCALE)])

    def prior_log_density(theta):
        arr, single = _as_batch(theta, 4)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.log(arr)
            vals = np.zeros(arr.shape[0])
            for k in range(4):
                m, s = _LV_PRIOR_LOC[k], _LV_PRIOR_SCALE[k]
                vals += -logs[:, k] - math.log(s * math.sqrt(2 * math.pi)) \
                    - 0.5 * ((logs[:, k] - m) / s) ** 2
        vals = np.where(np.all(arr > 0, axis=1), vals, -np.inf)
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        every = int(round(c["t_end"] / c["dt"])) // c["n_obs"]
        states = _lv_states(tuple(float(t) for t in theta), c, every)
        noise = c["obs_scale"] * rng.standard_normal(states.shape)
        return np.exp(np.log(states) + noise)

    return BayesianModel(
        name="lotka_volterra",
        theta_dim=4,
        data_shape=DataShape("series", (c["n_obs"], 2)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={**c, "log_prior_loc": list(_LV_PRIOR_LOC),
                   "log_prior_scale": list(_LV_PRIOR_SCALE)},
        dt=c["dt"],
    )


# -- drift-diffusion reaction times -------------------------------------

_DDM_DT = 1e-3
_DDM_HORIZON = 10.0
# (lower, upper, loc, std) per parameter: drift, boundary, non-decision, start
_DDM_PRIORS = (
    (-5.0, 5.0, 0.0, 10.0),
    (0.5, 3.0, 1.0, 1.0),
    (0.2, 1.0, 0.4, 0.2),
    (0.3, 0.7, 0.5, 0.1),
)
_DDM_LOC = np.array([p[2] for p in _DDM_PRIORS])
_DDM_STD = np.array([p[3] for p in _DDM_PRIORS])
_DDM_CDF_LO = norm.cdf((np.array([p[0] for p in _DDM_PRIORS]) - _DDM_LOC) / _DDM_STD)
_DDM_CDF_HI = norm.cdf((np.array([p[1] for p in _DDM_PRIORS]) - _DDM_LOC) / _DDM_STD)


def _ddm_walk(n_walkers: int, drift: float, boundary: float, start: float,
              rng) -> tuple[np.ndarray, np.ndarray]:
    """First-passage steps and boundary sign for n_walkers accumulators.

    sign is +1 for the upper boundary, -1 for the lower, 0 if still
    unabsorbed at the horizon.
    """
    max_steps = int(round(_DDM_HORIZON / _DDM_DT))
    sq_dt = math.sqrt(_DDM_DT)
    position = np.full(n_walkers, start)
    steps = np.zeros(n_walkers, dtype=np.int64)
    sign = np.zeros(n_walkers)
    alive = np.arange(n_walkers)
    for step in range(1, max_steps + 1):
        position[alive] += drift * _DDM_DT + sq_dt * rng.standard_normal(alive.size)
        current = position[alive]
        upper = current >= boundary
        lower = current <= 0.0
        done = upper | lower
        if done.any():
            hit = alive[done]
            steps[hit] = step
            sign[hit] = np.where(upper[done], 1.0, -1.0)
            alive = alive[~done]
            if alive.size == 0:
                break
    return steps, sign


def ddm(n_obs: int = 100) -> BayesianModel:
    """Drift-diffusion accumulator producing (reaction time, choice) pairs.

    Evidence performs a drifting random walk between absorbing boundaries at
    0 and `boundary`; reaction time is the first-passage time plus a
    non-decision offset, choice records which boundary was hit.  Walks that
    miss both boundaries within the horizon are redrawn; the count is kept
    on the simulator function for reporting.
    """
    if n_obs < 1:
        raise ConfigError(f"n_obs must be >= 1, got {n_obs}")

    def prior_sampler(rng):
        # inverse-CDF draw of all four truncated normals at once
        u = rng.uniform(_DDM_CDF_LO, _DDM_CDF_HI)
        return _DDM_LOC + _DDM_STD * ndtri(u)

    def prior_log_density(theta):
        arr, single = _as_batch(theta, 4)
        vals = np.zeros(arr.shape[0])
        for k, (lo, hi, loc, std) in enumerate(_DDM_PRIORS):
            vals += truncnorm.logpdf(arr[:, k], (lo - loc) / std,
                                     (hi - loc) / std, loc=loc, scale=std)
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        drift, boundary, t_nd, rel_start = (float(v) for v in theta)
        rows = []
        need, rounds = n_obs, 0
        while need:
            steps, sign = _ddm_walk(need, drift, boundary,
                                    rel_start * boundary, rng)
            absorbed = sign != 0.0
            rt = t_nd + steps[absorbed] * _DDM_DT
            choice = 0.5 * (sign[absorbed] + 1.0)
            rows.append(np.column_stack([rt, choice]))
            need = int((~absorbed).sum())
            if need:
                simulator.n_resampled += need
                logger.debug("ddm: resampling %d unabsorbed walks", need)
            rounds += 1
            if rounds > 100 and need:
                raise SimulationFailedError(
                    f"ddm: walks keep missing the boundaries for theta={theta}")
        return np.concatenate(rows)

    simulator.n_resampled = 0

    return BayesianModel(
        name="ddm",
        theta_dim=4,
        data_shape=DataShape("set", (n_obs, 2)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={"n_obs": n_obs, "dt": _DDM_DT, "horizon": _DDM_HORIZON,
                   "priors": [list(p) for p in _DDM_PRIORS]},
        dt=_DDM_DT,
    )


# -- conjugate exchangeable toy -----------------------------------------


def gaussian_exchangeable_1d(n_points: int = 20) -> BayesianModel:
    """Normal-normal model with IID scalar observations.

    theta ~ N(0, 1), x_i ~ N(theta, 1).  Posterior, marginal likelihood,
    and the one-point posterior predictive are all closed-form, which makes
    this the reference model for predictive-density checks on sets.
    """
    if n_points < 1:
        raise ConfigError(f"n_points must be >= 1, got {n_points}")

    def prior_sampler(rng):
        return rng.standard_normal(1)

    def prior_log_density(theta):
        arr, single = _as_batch(theta, 1)
        vals = -0.5 * math.log(2 * math.pi) - 0.5 * arr[:, 0] ** 2
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        return theta[0] + rng.standard_normal((n_points, 1))

    def _post(x_obs):
        x_obs = np.asarray(x_obs, dtype=np.float64).reshape(-1)
        n = x_obs.size
        var = 1.0 / (1.0 + n)
        return var * x_obs.sum(), var

    def posterior_moments(x_obs):
        mean, var = _post(x_obs)
        return np.array([mean]), np.array([[var]])

    def posterior_sampler(x_obs, n_draws, rng):
        mean, var = _post(x_obs)
        return mean + math.sqrt(var) * rng.standard_normal((n_draws, 1))

    def log_marginal(x_obs):
        x_obs = np.asarray(x_obs, dtype=np.float64).reshape(-1)
        n = x_obs.size
        quad = (x_obs ** 2).sum() - x_obs.sum() ** 2 / (1.0 + n)
        return float(-0.5 * (n * math.log(2 * math.pi) + math.log(1.0 + n) + quad))

    def posterior_predictive_log_density(x_new, x_obs):
        mean, var = _post(x_obs)
        resid = float(np.asarray(x_new).reshape(-1)[0]) - mean
        pred_var = 1.0 + var
        return float(-0.5 * math.log(2 * math.pi * pred_var)
                     - 0.5 * resid ** 2 / pred_var)

    return BayesianModel(
        name="gaussian_exchangeable_1d",
        theta_dim=1,
        data_shape=DataShape("set", (n_points, 1)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={"n_points": n_points},
        analytic_oracles=AnalyticOracles(
            posterior_sampler=posterior_sampler,
            posterior_moments=posterior_moments,
            log_marginal=log_marginal,
            posterior_predictive_log_density=posterior_predictive_log_density,
        ),
    )


# -- stationary autoregression ------------------------------------------


def ar1(n_steps: int = 16) -> BayesianModel:
    """Order-1 autoregression with unit innovations and stationary start.

    The single parameter is the lag-1 coefficient; drawing x_0 from the
    stationary marginal keeps every step identically distributed, so the
    sampled series has lag-1 autocorrelation theta and variance
    1 / (1 - theta^2) exactly.
    """
    if n_steps < 2:
        raise ConfigError(f"n_steps must be >= 2, got {n_steps}")
    low, high = 0.5, 0.95

    def prior_sampler(rng):
        return rng.uniform(low, high, 1)

    def prior_log_density(theta):
        arr, single = _as_batch(theta, 1)
        inside = (arr[:, 0] >= low) & (arr[:, 0] <= high)
        vals = np.where(inside, -math.log(high - low), -np.inf)
        return _maybe_scalar(vals, single)

    def simulator(theta, rng):
        rho = float(theta[0])
        series = np.empty(n_steps)
        series[0] = rng.standard_normal() / math.sqrt(1.0 - rho ** 2)
        noise = rng.standard_normal(n_steps - 1)
        for t in range(1, n_steps):
            series[t] = rho * series[t - 1] + noise[t - 1]
        return series[:, None]

    return BayesianModel(
        name="ar1",
        theta_dim=1,
        data_shape=DataShape("series", (n_steps, 1)),
        prior_sampler=prior_sampler,
        prior_log_density=prior_log_density,
        simulator=simulator,
        constants={"n_steps": n_steps, "coef_low": low, "coef_high": high},
    )


MODELS = {
    "gaussian_linear": gaussian_linear,
    "gaussian_linear_uniform": gaussian_linear_uniform,
    "slcp": slcp,
    "bernoulli_glm": bernoulli_glm,
    "gaussian_mixture": gaussian_mixture,
    "two_moons": two_moons,
    "sir": sir,
    "lotka_volterra": lotka_volterra,
    "ddm": ddm,
    "gaussian_exchangeable_1d": gaussian_exchangeable_1d,
    "ar1": ar1,
}


def make_model(name: str, **kwargs) -> BayesianModel:
    """Look up a benchmark constructor by name and build the model."""
    if name not in MODELS:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(MODELS)}")
    return MODELS[name](**kwargs)
