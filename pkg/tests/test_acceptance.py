"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture.

The desk-scale parity runs (criteria 6 to 9) fit VB and a 50k-iteration
chain on every replicate and take several minutes each.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from spatialvb import pipeline
from spatialvb.approx import AugmentedDesign, DenseDesign, PoissonObjectiveSpec, jj_bound, jj_lambda, laplace_fit
from spatialvb.ascent import fit_gaussian_basis_point, fit_gaussian_full_point, fit_latent_point
from spatialvb.config import ExperimentConfig
from spatialvb.fit_full import FitConfig, fit_infvb_phi, phi_grid
from spatialvb.mcmc import batch_means_se
from spatialvb.metrics import auc, coverage95, crps_samples
from spatialvb.model import PriorSpec, SyntheticSpec, simulate_dataset
from spatialvb.predict import sample_linear_predictor
from spatialvb.spatial import MaternParams, matern_correlation, matern_eigenbasis, pairwise_distances
from spatialvb.variational import normalize_weights


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return report


# ---------------------------------------------------------------- fast oracles

def test_criterion_01_conjugate_exactness(verdict):
    sim = simulate_dataset(SyntheticSpec(n=125, kind="gaussian", seed=11, matern=MaternParams(1.0, 0.3, 0.5)))
    ds = sim.dataset
    prior = PriorSpec.default(2)
    t0 = time.perf_counter()
    res = fit_infvb_phi(ds, prior, FitConfig(grid_phi=np.array([0.3]), epsilon_star=1e-12,
                                             max_inner_iterations=5000, workers=1))
    wall = time.perf_counter() - t0
    comp = res.mixture.components[0]
    tr = ds.training()
    corr = matern_correlation(pairwise_distances(tr.coords), 0.3)
    Ri = np.linalg.inv(corr.values + corr.chol.jitter * np.eye(tr.n))
    e = comp.q_sigma2.mean_inv
    P = prior.beta_precision
    cov = np.linalg.inv(e * tr.X.T @ Ri @ tr.X + P)
    mean = cov @ (e * tr.X.T @ Ri @ tr.z + P @ prior.beta_mean)
    err_m = float(np.max(np.abs(comp.q_gamma.mu - mean) / np.maximum(np.abs(mean), 1.0)))
    err_c = float(np.max(np.abs(comp.q_gamma.cov - cov) / np.max(np.abs(cov))))
    ok = tr.n == 100 and max(err_m, err_c) < 1e-8 and wall < 1.0
    verdict(1, ok, f"n={tr.n} mean err {err_m:.2e}, cov err {err_c:.2e} (tol 1e-8), {wall:.3f}s (< 1s)")


def test_criterion_02_gradient_and_hessian(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n, p = 30, 2
    A = rng.uniform(-1, 1, (n, p))
    z = rng.poisson(np.exp(A @ np.array([0.8, -0.5]))).astype(float)
    spec = PoissonObjectiveSpec(DenseDesign(A, p), z, np.eye(p) * 0.25, np.array([0.1, 0.0]))
    worst = 0.0
    h = 1e-6
    for _ in range(20):
        g = rng.normal(0.0, 1.0, p)
        num = np.array([(spec.objective(g + e) - spec.objective(g - e)) / (2 * h) for e in np.eye(p) * h])
        ana = spec.gradient(g)
        worst = max(worst, float(np.max(np.abs(num - ana)) / np.max(np.abs(ana))))
    opt = laplace_fit(spec)
    eig = float(np.linalg.eigvalsh(spec.neg_hessian(opt.q.mu)).min())
    wall = time.perf_counter() - t0
    ok = worst < 1e-5 and eig > 0 and opt.converged and wall < 5
    verdict(2, ok, f"max rel gradient err {worst:.2e} (< 1e-5), min eig of -H at optimum {eig:.3g} (> 0), {wall:.2f}s")


def test_criterion_03_quadratic_bound_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    x = rng.uniform(-30, 30, 2000)
    xi = np.abs(rng.standard_normal(2000)) * rng.choice([0.01, 1.0, 10.0], 2000)
    target = -np.logaddexp(0.0, x)
    below = float(np.max(jj_bound(x, xi) - target))
    tight = float(np.max(np.abs(jj_bound(x, np.abs(x)) - target)))
    near0 = jj_lambda(np.array([0.0, 1e-12, 1e-8, 1e-6, 1e-4]))
    cont = float(np.max(np.abs(near0 + 0.125)))
    wall = time.perf_counter() - t0
    ok = below <= 1e-12 and tight <= 1e-10 and jj_lambda(0.0) == -0.125 and cont < 1e-9 and wall < 1
    verdict(3, ok, f"max(bound - target) {below:.2e}, tightness err {tight:.2e}, |lambda(0+) + 1/8| {cont:.2e}, "
                   f"{wall:.3f}s")


def _nondecreasing(trace, slack):
    return trace.size == 1 or float(np.min(np.diff(trace))) >= -slack


def test_criterion_04_elbo_monotone(verdict):
    t0 = time.perf_counter()
    prior = PriorSpec.default(2)
    bad = []
    for seed in range(10):
        for kind in ("gaussian", "poisson", "bernoulli"):
            tr = simulate_dataset(SyntheticSpec(n=45, train_fraction=0.9, kind=kind, seed=300 + seed,
                                                matern=MaternParams(1.0, 0.3, 0.5))).dataset.training()
            corr = matern_correlation(pairwise_distances(tr.coords), 0.3).chol
            basis = DenseDesign(np.hstack([tr.X, matern_eigenbasis(tr.coords, MaternParams(1.0, 0.3, 0.5),
                                                                   8).values]), 2)
            kw = dict(eps=1e-10, max_iter=300)
            if kind == "gaussian":
                traces = [fit_gaussian_full_point(tr.X, tr.z, prior, corr, **kw).trace,
                          fit_gaussian_basis_point(basis, tr.z, prior, **kw).trace,
                          fit_gaussian_basis_point(basis, tr.z, prior, sigma2=0.7, **kw).trace]
                slack = 1e-8
            else:
                traces = [fit_latent_point(kind, AugmentedDesign(tr.X), tr.z, prior, corr, **kw).trace,
                          fit_latent_point(kind, AugmentedDesign(tr.X), tr.z, prior, corr, sigma2=0.8, **kw).trace,
                          fit_latent_point(kind, basis, tr.z, prior, None, **kw).trace,
                          fit_latent_point(kind, basis, tr.z, prior, None, sigma2=3.0, **kw).trace]
                slack = 1e-6
            bad += [(kind, seed, i) for i, t in enumerate(traces) if not _nondecreasing(t, slack)]
    wall = time.perf_counter() - t0
    verdict(4, not bad and wall < 30, f"10 instances x 3 kinds, decreasing traces {bad}, {wall:.1f}s (< 30s)")


def test_criterion_05_weights(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_sum, worst_shift, finite = 0.0, 0.0, True
    for _ in range(200):
        e = rng.uniform(-1e6, 1e6, rng.integers(1, 60))
        w = normalize_weights(e)
        finite &= bool(np.isfinite(w).all())
        worst_sum = max(worst_sum, abs(math.fsum(w) - 1.0))
        worst_shift = max(worst_shift, float(np.max(np.abs(normalize_weights(e + rng.uniform(-1e3, 1e3)) - w))))
    extreme = normalize_weights([1e6, -1e6, 1e6 - 1.0])
    pos = rng.uniform(0.1, 10, 25)
    literal = bool(np.array_equal(normalize_weights(pos, "literal"), pos / math.fsum(pos)))
    wall = time.perf_counter() - t0
    ok = worst_sum <= 1e-12 and worst_shift < 1e-9 and finite and np.isfinite(extreme).all() and literal and wall < 1
    verdict(5, ok, f"|sum-1| {worst_sum:.1e}, shift change {worst_shift:.1e}, finite at +-1e6 "
                   f"{bool(np.isfinite(extreme).all())}, literal exact {literal}, {wall:.3f}s")


# ---------------------------------------------------------------- desk-scale parity

def _table(model, kind, phi, n, replicates, fitters, m=50):
    sc = [pipeline.Scenario(model, kind, phi, n, m)]
    return pipeline.run_table_reproduction("desk", sc, replicates=replicates, vb_fitters=fitters,
                                           vb_workers=1, mcmc_workers=1, seed=2024)


def test_criterion_06_binary_full_parity(verdict):
    # J = 50 is the range grid; the joint-grid fitter is checked in criterion 9
    fitters = ("infvb-phi",)
    res = _table("full", "bernoulli", 0.7, 500, 5, fitters)
    reps = res.replicates
    lines, ok = [], not res.failures
    for f in fitters:
        diffs = [abs(r[f] - r["mcmc"]) for r in reps]
        walls = [r[f"{f}_wall"] for r in reps]
        slower = all(r["mcmc_wall"] > r[f"{f}_wall"] for r in reps)
        mean_vb = float(np.mean([r[f] for r in reps]))
        ok &= max(diffs) <= 0.03 and abs(mean_vb - 0.74) <= 0.05 and max(walls) < 60 and slower
        lines.append(f"{f}: max|dAUC| {max(diffs):.3f}, mean AUC {mean_vb:.3f}, max wall {max(walls):.1f}s, "
                     f"MCMC slower {slower}")
    mean_mc = float(np.mean([r["mcmc"] for r in reps]))
    ok &= abs(mean_mc - 0.74) <= 0.05
    verdict(6, ok, "; ".join(lines) + f"; MCMC mean AUC {mean_mc:.3f} (target 0.74 +- 0.05)")


def test_criterion_07_count_full_parity(verdict):
    fitters = ("infvb-phi",)
    res = _table("full", "poisson", 0.5, 500, 5, fitters)
    reps = res.replicates
    lines, ok = [], not res.failures
    for f in fitters:
        diffs = [abs(r[f] - r["mcmc"]) for r in reps]
        mean_vb = float(np.mean([r[f] for r in reps]))
        ok &= max(diffs) <= 0.1 and abs(mean_vb - 1.725) <= 0.3
        lines.append(f"{f}: max|dRMSPE| {max(diffs):.3f}, mean RMSPE {mean_vb:.3f}")
    mean_mc = float(np.mean([r["mcmc"] for r in reps]))
    ok &= abs(mean_mc - 1.725) <= 0.3
    verdict(7, ok, "; ".join(lines) + f"; MCMC mean RMSPE {mean_mc:.3f} (target 1.72-1.73 +- 0.3)")


def test_criterion_08_basis_parity(verdict):
    lines, ok = [], True
    for kind, tol in (("bernoulli", 0.02), ("poisson", 0.02)):
        res = _table("basis", kind, 0.1, 5000, 1, ("mfvb",))
        r = res.replicates[0]
        diff = abs(r["mfvb"] - r["mcmc"])
        ok &= not res.failures and diff <= tol and r["mfvb_wall"] < 10
        metric = "AUC" if kind == "bernoulli" else "RMSPE"
        lines.append(f"{kind}: {metric} VB {r['mfvb']:.3f} MCMC {r['mcmc']:.3f} diff {diff:.4f} (<= {tol}), "
                     f"MFVB wall {r['mfvb_wall']:.1f}s (< 10s)")
    verdict(8, ok, "; ".join(lines))


def test_criterion_09_posterior_overlap(verdict):
    cfg = ExperimentConfig(kind="bernoulli", phi=0.7, n=500, seed=pipeline.replicate_seed(2024, 0, 0))
    ds, _ = pipeline.prepare_data(cfg)
    vb, _ = pipeline.fit_model(replace(cfg, fitter="infvb-phi-sigma"), ds, None, 1)
    mc, _ = pipeline.fit_model(replace(cfg, fitter="mcmc"), ds, None, 1)
    beta_vb = vb.beta_summary()[0]
    beta_mc = mc.samples["beta"]
    se = np.array([batch_means_se(beta_mc[:, j]) for j in range(beta_mc.shape[1])])
    z = np.abs(beta_vb - beta_mc.mean(axis=0)) / se
    s2 = vb.sigma2_summary()["mean"]
    lo, hi = np.quantile(mc.samples["sigma2"], [0.025, 0.975])
    eta_vb = pipeline.predict_eta(vb, ds, cfg).mean
    eta_mc = pipeline.predict_eta(mc, ds, cfg).mean
    r = float(np.corrcoef(eta_vb, eta_mc)[0, 1])
    ok = bool((z <= 3).all()) and lo <= s2 <= hi and r > 0.99
    verdict(9, ok, f"beta VB {np.round(beta_vb, 3)} vs MCMC {np.round(beta_mc.mean(axis=0), 3)} "
                   f"({np.round(z, 1)} SEs, <= 3); sigma2 VB mean {s2:.3f} in MCMC 95% [{lo:.3f}, {hi:.3f}]; "
                   f"eta corr {r:.4f} (> 0.99)")


# ---------------------------------------------------------------- metrics and determinism

def _brute_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def _gaussian_crps(y, sd):
    z = y / sd
    return sd * (z * (2 * stats.norm.cdf(z) - 1) + 2 * stats.norm.pdf(z) - 1 / math.sqrt(math.pi))


def test_criterion_10_metric_oracles(verdict):
    rng = np.random.default_rng(10)
    auc_ok = True
    for _ in range(20):
        y = np.r_[0, 1, rng.integers(0, 2, 198)]
        s = np.round(rng.normal(size=200) + y, 1)
        auc_ok &= auc(y, s) == _brute_auc(y, s)
    draws = rng.standard_normal(10_000)
    crps_err = max(abs(crps_samples(y, draws) / _gaussian_crps(y, 1.0) - 1) for y in (-1.5, 0.0, 0.4, 2.0))
    sim = simulate_dataset(SyntheticSpec(n=2400, train_fraction=1 / 6, kind="gaussian", seed=10,
                                         matern=MaternParams(1.0, 0.3, 0.5)))
    ds = sim.dataset
    fit = fit_infvb_phi(ds, PriorSpec.default(2), FitConfig(grid_phi=phi_grid(20), workers=1))
    te = ds.test
    s = sample_linear_predictor(fit, ds.coords[te], ds.X[te], draws=2000, seed=1, joint=False)
    cov = coverage95(sim.eta[te], s.q025, s.q975)
    ok = auc_ok and crps_err < 0.02 and 0.90 <= cov <= 0.99
    verdict(10, ok, f"AUC == brute force {auc_ok}; CRPS rel err {crps_err:.4f} (< 0.02); "
                    f"coverage {cov:.3f} on {te.size} test sites (in [0.90, 0.99])")


DETERMINISM_RUNS = [
    ("full", "infvb-phi"), ("full", "infvb-phi-sigma"), ("full", "mcmc"),
    ("basis", "mfvb"), ("basis", "infvb-sigma"), ("basis", "mcmc"),
]


def _artifacts(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())
            if p.suffix == ".csv"}


def test_criterion_11_determinism(verdict, tmp_path):
    mismatches = []
    for model, fitter in DETERMINISM_RUNS:
        for kind in ("gaussian", "poisson", "bernoulli"):
            base = ExperimentConfig(model=model, kind=kind, fitter=fitter, n=50, m=8, seed=77, grid_phi_size=5,
                                    grid_sigma2_size=4, iterations=400, draws=300)
            outs = []
            for tag, workers in (("w1", 1), ("w8", 8), ("w32", 32), ("again", 1)):
                cfg = replace(base, output=str(tmp_path / f"{model}-{fitter}-{kind}-{tag}"))
                outcome = pipeline.run_experiment(cfg, workers)
                assert outcome.status == "ok", outcome.error
                outs.append(_artifacts(outcome.output))
            if any(o != outs[0] for o in outs[1:]):
                mismatches.append(f"{model}/{fitter}/{kind}")
    verdict(11, not mismatches, f"{len(DETERMINISM_RUNS)} fitter set-ups x kinds x workers {{1, 8, 32}} and a "
                                f"repeat run; byte mismatches {mismatches}")
