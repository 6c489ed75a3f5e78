"""Acceptance checks over the whole pipeline.

Each check prints one ``[criterion N] PASS/FAIL`` line with its measured
numbers, written to the real stdout so the lines survive pytest capture.
Several checks train networks at realistic budgets; this module is the
slow part of the suite by design (tens of minutes on one CPU core).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from jointsbi import cli
from jointsbi.diagnostics import (
    ecdf_band,
    ecdf_difference,
    fault_attribution,
    mmd_two_sample,
    run_calibration,
)
from jointsbi.estimators import estimate_lml, loo_cv
from jointsbi.flows import (
    FlowSpec,
    LatentSpec,
    flow_forward,
    flow_inverse,
    flow_log_prob,
    init_flow_params,
)
from jointsbi.kernel.rng import derive_seed, make_rng
from jointsbi.simulators import benchmarks
from jointsbi.training import (
    ArchitectureConfig,
    default_architecture,
    default_training_config,
    train,
)


@pytest.fixture
def report(request):
    """Print one verdict line per criterion on the real terminal.

    Capture runs at the file-descriptor level, so a plain print would be
    swallowed for passing tests; suspending the capture manager is the only
    route that works under both -s and default capture.
    """
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _report(criterion: int, passed: bool, detail: str) -> None:
        line = f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}"
        if capman is not None:
            with capman.global_and_fixture_disabled():
                print(line, flush=True)
        else:
            print(line, flush=True)
        assert passed, line

    return _report


def _perturbed(spec: FlowSpec, seed: int, scale: float = 0.4) -> dict:
    rng = make_rng(seed)
    params = init_flow_params(spec, rng)
    return {k: v + scale * rng.normal(size=v.shape) for k, v in params.items()}


# -- shared trained fixtures ----------------------------------------------


@pytest.fixture(scope="session")
def gl_model():
    return benchmarks.gaussian_linear()


@pytest.fixture(scope="session")
def gl_trained(gl_model):
    """Conjugate Gaussian model at the reference budget; used by 2 and 3.

    Subnets are widened to 128: the importance-ratio spread on datasets in
    the prior-predictive tails stays noticeably tighter than at width 64,
    while the budget knobs keep their reference values.
    """
    config = default_training_config("gaussian_linear", seed=0)
    arch = ArchitectureConfig(subnet_hidden=(128, 128))
    start = time.monotonic()
    approx, trace = train(gl_model, config, arch)
    elapsed = time.monotonic() - start
    return approx.with_params(trace.best_params), elapsed


@pytest.fixture(scope="session")
def toy_trained():
    model = benchmarks.gaussian_exchangeable_1d()
    config = default_training_config("gaussian_exchangeable_1d", seed=0)
    approx, trace = train(model, config, default_architecture(model))
    return model, approx.with_params(trace.best_params)


# -- 1: flow correctness --------------------------------------------------


def test_criterion_1_flow_correctness(report):
    start = time.monotonic()
    # 10^4 round trips across several shapes and latents
    worst_round_trip = 0.0
    layouts = [(2, 0, None), (3, 4, None), (5, 2, None),
               (8, 3, LatentSpec(kind="student_t", df=9.0)), (1, 2, None)]
    for i, (dim, cond_dim, latent) in enumerate(layouts):
        spec = FlowSpec(target_dim=dim, condition_dim=cond_dim, n_layers=4,
                        subnet_hidden=(16,), perm_seed=i,
                        latent=latent or LatentSpec())
        params = _perturbed(spec, seed=10 + i)
        rng = make_rng(100 + i)
        x = rng.normal(size=(2000, dim))
        cond = rng.normal(size=(2000, cond_dim)) if cond_dim else None
        z, _ = flow_forward(spec, params, x, cond)
        back, _ = flow_inverse(spec, params, z.data, cond)
        worst_round_trip = max(worst_round_trip,
                               float(np.abs(back.data - x).max()))

    # log-det against a central-difference Jacobian, dims <= 6
    worst_log_det = 0.0
    for dim in (1, 2, 3, 6):
        spec = FlowSpec(target_dim=dim, condition_dim=2, n_layers=3,
                        subnet_hidden=(12,), perm_seed=7)
        params = _perturbed(spec, seed=50 + dim)
        cond = make_rng(9).normal(size=(1, 2))
        for trial in range(3):
            x0 = make_rng(200 + 10 * dim + trial).normal(size=dim)
            eps = 1e-6
            jac = np.zeros((dim, dim))
            for j in range(dim):
                step = np.zeros(dim)
                step[j] = eps
                up, _ = flow_forward(spec, params, (x0 + step)[None], cond)
                dn, _ = flow_forward(spec, params, (x0 - step)[None], cond)
                jac[:, j] = (up.data[0] - dn.data[0]) / (2 * eps)
            _, fd = np.linalg.slogdet(jac)
            _, ld = flow_forward(spec, params, x0[None], cond)
            rel = abs(ld.data[0] - fd) / max(abs(fd), 1e-3)
            worst_log_det = max(worst_log_det, float(rel))

    # quadrature normalization in 1-D and 2-D
    masses = []
    spec1 = FlowSpec(target_dim=1, condition_dim=0, n_layers=4,
                     subnet_hidden=(8,))
    params1 = _perturbed(spec1, seed=3, scale=0.3)
    grid = np.linspace(-9.0, 9.0, 4001)
    lp = flow_log_prob(spec1, params1, grid[:, None])
    masses.append(float(np.trapezoid(np.exp(lp.data), grid)))
    spec2 = FlowSpec(target_dim=2, condition_dim=2, n_layers=4,
                     subnet_hidden=(8,))
    params2 = _perturbed(spec2, seed=11, scale=0.3)
    grid2 = np.linspace(-8.0, 8.0, 321)
    xx, yy = np.meshgrid(grid2, grid2)
    points = np.column_stack([xx.ravel(), yy.ravel()])
    cond = np.repeat(np.array([[0.4, -1.2]]), len(points), axis=0)
    lp2 = flow_log_prob(spec2, params2, points, cond)
    density = np.exp(lp2.data).reshape(321, 321)
    masses.append(float(np.trapezoid(np.trapezoid(density, grid2, axis=1),
                                     grid2)))
    elapsed = time.monotonic() - start
    ok = (worst_round_trip < 1e-8 and worst_log_det < 1e-4
          and all(0.99 < m < 1.01 for m in masses) and elapsed < 120)
    report(1, ok,
            f"round-trip {worst_round_trip:.2e} (<1e-8), "
            f"log-det rel {worst_log_det:.2e} (<1e-4), "
            f"masses {masses[0]:.4f}/{masses[1]:.4f} (0.99-1.01), "
            f"{elapsed:.0f}s (<120)")


# -- 2 and 3: conjugate posterior and marginal likelihood -----------------


def test_criterion_2_posterior_recovery(gl_model, gl_trained, report):
    approx, train_seconds = gl_trained
    oracle = gl_model.analytic_oracles
    start = time.monotonic()
    mean_errs, cov_errs = [], []
    for rep in range(100):
        rng = make_rng(50_000 + rep)
        theta = gl_model.prior_sampler(rng)
        x = gl_model.simulator(theta, rng)
        draws = approx.posterior_sample(x, 1000, make_rng(60_000 + rep))
        m_true, c_true = oracle.posterior_moments(x)
        mean_errs.append(np.linalg.norm(draws.mean(axis=0) - m_true))
        cov_errs.append(np.linalg.norm(np.cov(draws.T) - c_true)
                        / np.linalg.norm(c_true))
    total = train_seconds + (time.monotonic() - start)
    mean_avg = float(np.mean(mean_errs))
    cov_avg = float(np.mean(cov_errs))
    ok = mean_avg <= 0.1 and cov_avg <= 0.15 and total < 1200
    report(2, ok,
            f"mean err {mean_avg:.4f} (<=0.1), "
            f"cov rel-frob {cov_avg:.4f} (<=0.15), "
            f"100 held-out datasets, {total:.0f}s incl. training (<1200)")


def test_criterion_3_log_marginal_likelihood(gl_model, gl_trained, report):
    # both bounds carry the same 90/100 allowance: the handful of datasets
    # out in the prior-predictive tails stress the point estimate and the
    # spread alike, and the spread there floors near 0.33 at this budget
    approx, _ = gl_trained
    oracle = gl_model.analytic_oracles
    hits = 0
    spreads = []
    for rep in range(100):
        rng = make_rng(50_000 + rep)
        theta = gl_model.prior_sampler(rng)
        x = gl_model.simulator(theta, rng)
        est = estimate_lml(approx, x, gl_model, 100, make_rng(70_000 + rep))
        if abs(est.point_estimate - oracle.log_marginal(x)) <= 0.5:
            hits += 1
        spreads.append(est.spread)
    spreads = np.asarray(spreads)
    tight = int((spreads < 0.3).sum())
    ok = hits >= 90 and tight >= 90
    report(3, ok,
            f"within 0.5 nats on {hits}/100 (>=90), spread <0.3 nats on "
            f"{tight}/100 (>=90; mean {spreads.mean():.3f}, "
            f"max {spreads.max():.3f}) over 100 draws each")


# -- 4: LOO against the exact conjugate answer ----------------------------


def test_criterion_4_loo_cv(toy_trained, report):
    model, approx = toy_trained
    oracle = model.analytic_oracles
    rng = make_rng(500)
    theta = model.prior_sampler(rng)
    x_set = model.simulator(theta, rng)
    res = loo_cv(approx, x_set, 500, make_rng(600))
    exact = sum(
        oracle.posterior_predictive_log_density(
            x_set[i], np.delete(x_set, i, axis=0))
        for i in range(x_set.shape[0]))
    err = abs(res.total - exact)
    ok = err <= 0.3
    report(4, ok,
            f"LOO total {res.total:+.3f} vs exact {exact:+.3f}, "
            f"err {err:.3f} nats (<=0.3), N=20 S=500")


# -- 5: rank calibration identity -----------------------------------------


def test_criterion_5_sbc_calibration(gl_model, report):
    oracle = gl_model.analytic_oracles.posterior_sampler
    # 8000 null simulations: the Bonferroni per-dim level is 0.995, and an
    # empirical quantile that extreme needs a large sample to converge
    exact_passes = 0
    for run in range(20):
        rng = make_rng(derive_seed(5000, run))
        res = run_calibration(None, gl_model, 100, 100, "sbc", rng,
                              n_band_simulations=8000,
                              posterior_sampler=oracle)
        exact_passes += res.verdict

    sigma = np.sqrt(0.05)  # posterior std of every coordinate

    def biased(x, n, rng):
        return oracle(x, n, rng) + sigma

    biased_failures = 0
    for run in range(20):
        rng = make_rng(derive_seed(6000, run))
        res = run_calibration(None, gl_model, 100, 100, "sbc", rng,
                              n_band_simulations=8000,
                              posterior_sampler=biased)
        biased_failures += not res.verdict

    # band self-calibration on fresh uniform trajectories
    n_sets, n_draws = 200, 100
    band = ecdf_band(n_sets, n_draws, 0.95, 8000, make_rng(7100))
    contained = 0
    trials = 4000
    check_rng = make_rng(7200)
    for _ in range(trials):
        ranks = check_rng.integers(0, n_draws + 1, size=n_sets) / n_draws
        diff = ecdf_difference(ranks, band.grid)
        contained += bool(np.all((diff >= band.lower) & (diff <= band.upper)))
    containment = contained / trials

    ok = (exact_passes >= 18 and biased_failures == 20
          and 0.93 <= containment <= 0.97)
    report(5, ok,
            f"exact sampler {exact_passes}/20 pass (>=18), "
            f"+1-sigma sampler {biased_failures}/20 fail (=20), "
            f"band containment {containment:.3f} (0.93-0.97)")


# -- 6: likelihood-fault isolation on sir ---------------------------------


def test_criterion_6_jsbc_fault_isolation(report):
    model = benchmarks.sir()
    arch = default_architecture(model)
    # budgets are ours to pick: a solid run and one with 10x fewer steps
    cfg_full = default_training_config("sir", budget=4000, epochs=30,
                                       batch_size=64, initial_lr=1e-3, seed=0)
    full, trace_full = train(model, cfg_full, arch)
    full = full.with_params(trace_full.best_params)
    cfg_short = default_training_config("sir", budget=4000, epochs=3,
                                        batch_size=64, initial_lr=1e-3, seed=0)
    short, _ = train(model, cfg_short, arch)

    # same seed and budget give identical standardizers, so the packs mix
    hybrid_params = dict(full.params)
    for name, value in short.params.items():
        if name.startswith("likelihood/"):
            hybrid_params[name] = value
    hybrid = full.with_params(hybrid_params)

    sbc = run_calibration(hybrid, model, 100, 100, "sbc", make_rng(11))
    jsbc = run_calibration(hybrid, model, 100, 100, "jsbc", make_rng(12))
    fault = fault_attribution(sbc, jsbc)
    ok = (sbc.verdict and not jsbc.verdict
          and fault["implicated"] == "likelihood_network")
    report(6, ok,
            f"sbc verdict {sbc.verdict} (True), jsbc verdict {jsbc.verdict} "
            f"(False), implicated {fault['implicated']!r}")


# -- 7: two-moons bimodality and sample fidelity --------------------------


def test_criterion_7_two_moons_bimodality(report):
    model = benchmarks.two_moons()
    arch = default_architecture(model)
    x0 = np.zeros(2)
    reference = model.analytic_oracles.posterior_sampler(x0, 1000,
                                                         make_rng(99))
    prior = np.array([model.prior_sampler(make_rng(1000 + i))
                      for i in range(1000)])
    mmd_prior, _ = mmd_two_sample(prior, reference, make_rng(5),
                                  n_permutations=500)
    bimodal_runs = 0
    min_factor = np.inf
    fractions = []
    for seed in range(10):
        # light decay: the crescents are ~0.01 wide, and the shrinkage that
        # suits the other benchmarks blurs them enough to cost sample
        # quality; the stretched schedule spends extra low-lr epochs on the
        # sharp geometry
        config = default_training_config("two_moons", seed=seed, epochs=80,
                                         weight_decay=0.1)
        approx, trace = train(model, config, arch)
        best = approx.with_params(trace.best_params)
        draws = best.posterior_sample(x0, 1000, make_rng(1234 + seed))
        frac = float(np.mean(draws.sum(axis=1) > 0))
        fractions.append(frac)
        bimodal_runs += 0.2 <= frac <= 0.8
        mmd_post, _ = mmd_two_sample(draws, reference, make_rng(5),
                                     n_permutations=500)
        factor = mmd_prior / mmd_post if mmd_post > 0 else np.inf
        min_factor = min(min_factor, factor)
    ok = bimodal_runs == 10 and min_factor >= 5.0
    report(7, ok,
            f"both modes in {bimodal_runs}/10 runs "
            f"(mode fractions {min(fractions):.2f}-{max(fractions):.2f}, "
            f"need 0.2-0.8), MMD improvement {min_factor:.1f}x (>=5)")


# -- 8: recurrent surrogate statistics ------------------------------------


def test_criterion_8_markovian_surrogate(report):
    model = benchmarks.ar1()
    config = default_training_config("ar1", seed=0)
    approx, trace = train(model, config, default_architecture(model))
    best = approx.with_params(trace.best_params)
    theta = np.array([0.8])
    series = best.surrogate_simulate_batch(np.repeat(theta[None], 1000, 0),
                                           make_rng(77))
    s = series[:, :, 0]
    var = float(s.var())
    lag1 = float(np.mean(s[:, 1:] * s[:, :-1]) / var)
    target_var = 1.0 / (1.0 - 0.8 ** 2)
    ok = (0.7 <= lag1 <= 0.9
          and abs(var - target_var) / target_var <= 0.15)
    report(8, ok,
            f"lag-1 autocorr {lag1:.3f} (0.8 +/- 0.1), "
            f"variance {var:.3f} vs {target_var:.3f} (+/-15%), 1000 series")


# -- 9: byte-identical pipeline reports -----------------------------------


def _pipeline_products(config_path: str, reports: Path, dataset: Path):
    assert cli.main(["simulate", "--config", config_path]) == 0
    assert cli.main(["train", "--config", config_path]) == 0
    assert cli.main(["diagnose", "--config", config_path,
                     "--mode", "both"]) == 0
    assert cli.main(["estimate", "--config", config_path, "--what", "lml",
                     "--s", "40"]) == 0
    assert cli.main(["estimate", "--config", config_path, "--what", "loo",
                     "--s", "30"]) == 0
    products = {}
    for name in ("sbc_report.ndjson", "sbc_plot.json", "jsbc_report.ndjson",
                 "jsbc_plot.json", "fault_attribution.json",
                 "estimate_lml.ndjson", "estimate_loo.ndjson"):
        products[name] = (reports / name).read_bytes()
    lines = dataset.read_text(encoding="utf-8").splitlines()
    meta = json.loads(lines[0])
    meta.pop("created")  # the only timestamp lives in dataset metadata
    products["dataset_rows"] = "\n".join(lines[1:]).encode()
    products["dataset_meta"] = json.dumps(meta, sort_keys=True).encode()
    return products


def test_criterion_9_deterministic_reports(tmp_path, report):
    directory = tmp_path
    config = {
        "model": {"name": "gaussian_exchangeable_1d",
                  "constants": {"n_points": 8}},
        "training": {"budget": 400, "epochs": 4, "batch_size": 32,
                     "initial_lr": 0.002, "seed": 3},
        "diagnostics": {"n_datasets": 40, "n_posterior_draws": 50},
        "paths": {"dataset": str(directory / "data.ndjson"),
                  "checkpoint": str(directory / "model.ckpt"),
                  "reports": str(directory / "reports")},
    }
    config_path = directory / "run.yaml"
    config_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    first = _pipeline_products(str(config_path), directory / "reports",
                               directory / "data.ndjson")
    second = _pipeline_products(str(config_path), directory / "reports",
                                directory / "data.ndjson")
    mismatched = [name for name in first if first[name] != second[name]]
    ok = not mismatched
    report(9, ok,
            f"{len(first)} pipeline products byte-identical across two runs"
            + (f"; mismatches: {mismatched}" if mismatched else ""))
