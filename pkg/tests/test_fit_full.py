import logging
import math

import numpy as np
import pytest
from conftest import small_dataset

from spatialvb.ascent import fit_gaussian_full_point
from spatialvb.fit_full import (
    FitConfig,
    auto_sigma2_bounds,
    fit_infvb_phi,
    fit_infvb_phi_sigma,
    phi_grid,
    sigma2_grid,
)
from spatialvb.model import PriorSpec
from spatialvb.spatial import matern_correlation, pairwise_distances


def test_phi_grid_is_uniform_on_prior_support():
    g = phi_grid(50)
    assert g[0] > 0 and g[-1] == pytest.approx(math.sqrt(2), rel=1e-15)
    np.testing.assert_allclose(np.diff(g), math.sqrt(2) / 50, rtol=1e-12)
    with pytest.raises(ValueError):
        phi_grid(0)


def test_sigma2_grid_is_log_uniform():
    g = sigma2_grid(20)
    assert g[0] == pytest.approx(1e-3) and g[-1] == pytest.approx(2000.0)
    np.testing.assert_allclose(np.diff(np.log(g)), np.log(2e6) / 19, rtol=1e-10)
    with pytest.raises(ValueError):
        sigma2_grid(5, 0.0, 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(grid_phi=np.array([0.5, 0.2]))
    with pytest.raises(ValueError):
        FitConfig(epsilon_star=0.0)
    with pytest.raises(ValueError):
        FitConfig(weight_mode="uniform")


def _dense_conjugate_fixed_point(X, z, R, prior, iters=2000):
    Ri = np.linalg.inv(R)
    P = np.linalg.inv(prior.beta_cov)
    a0, b0 = prior.sigma2_ig
    a = a0 + z.size / 2
    b = b0
    for _ in range(iters):
        e = a / b
        C = np.linalg.inv(e * X.T @ Ri @ X + P)
        mu = C @ (e * X.T @ Ri @ z + P @ prior.beta_mean)
        r = z - X @ mu
        b_new = b0 + 0.5 * (r @ Ri @ r + np.trace(Ri @ X @ C @ X.T))
        if abs(b_new - b) < 1e-14 * b:
            break
        b = b_new
    return mu, C, a, b


def test_single_point_gaussian_matches_dense_fixed_point():
    ds = small_dataset("gaussian", n=50, seed=2).dataset
    prior = PriorSpec.default(2)
    res = fit_infvb_phi(ds, prior, FitConfig(grid_phi=np.array([0.3]), epsilon_star=1e-12, workers=1))
    assert res.weights.tolist() == [1.0]
    tr = ds.training()
    corr = matern_correlation(pairwise_distances(tr.coords), 0.3)
    R = corr.values + corr.chol.jitter * np.eye(tr.n)
    mu, C, a, b = _dense_conjugate_fixed_point(tr.X, tr.z, R, prior)
    comp = res.mixture.components[0]
    np.testing.assert_allclose(comp.q_gamma.mu, mu, rtol=1e-6)
    np.testing.assert_allclose(comp.q_gamma.cov, C, rtol=1e-6)
    assert comp.q_sigma2.beta == pytest.approx(b, rel=1e-6)
    assert comp.q_sigma2.alpha == pytest.approx(a, rel=1e-14)


def test_gaussian_conjugate_ascent_converges_quickly():
    ds = small_dataset("gaussian", n=200, seed=3).dataset.training()
    corr = matern_correlation(pairwise_distances(ds.coords), 0.5).chol
    fit = fit_gaussian_full_point(ds.X, ds.z, PriorSpec.default(2), corr, eps=1e-4)
    assert fit.converged and fit.iterations <= 200
    assert np.min(np.diff(fit.trace)) >= -1e-8


def test_fixed_sill_at_mixture_mean_matches_range_only_fit():
    ds = small_dataset("bernoulli", n=80, seed=4).dataset
    prior = PriorSpec.default(2)
    cfg = FitConfig(grid_phi=phi_grid(8), workers=1)
    a = fit_infvb_phi(ds, prior, cfg)
    s2 = a.sigma2_summary()["mean"]
    b = fit_infvb_phi_sigma(ds, prior, FitConfig(grid_phi=phi_grid(8), grid_sigma2=np.array([s2]), workers=1))
    np.testing.assert_allclose(b.beta_summary()[0], a.beta_summary()[0], atol=0.05)


def test_gaussian_joint_grid_routes_to_range_only(caplog):
    ds = small_dataset("gaussian", n=40, seed=5).dataset
    with caplog.at_level(logging.INFO, logger="spatialvb.fit_full"):
        res = fit_infvb_phi_sigma(ds, PriorSpec.default(2), FitConfig(grid_phi=phi_grid(4), workers=1))
    assert res.method == "infvb-phi"
    assert res.mixture.names == ("phi",)
    assert any("range only" in r.message for r in caplog.records)


def test_joint_grid_sigma2_marginal_is_pmf_on_grid():
    ds = small_dataset("poisson", n=50, seed=6).dataset
    gs = sigma2_grid(5, 0.1, 10.0)
    res = fit_infvb_phi_sigma(ds, PriorSpec.default(2), FitConfig(grid_phi=phi_grid(3), grid_sigma2=gs, workers=1))
    support, pmf = res.mixture.marginal_pmf("sigma2")
    np.testing.assert_allclose(support, gs)
    assert abs(pmf.sum() - 1) < 1e-12
    s = res.sigma2_summary()
    assert gs[0] <= s["q025"] <= s["mean"] <= s["q975"] <= gs[-1]


@pytest.mark.parametrize("kind", ["gaussian", "bernoulli"])
def test_worker_count_does_not_change_results(kind):
    ds = small_dataset(kind, n=40, seed=7).dataset
    prior = PriorSpec.default(2)
    runs = [fit_infvb_phi(ds, prior, FitConfig(grid_phi=phi_grid(8), workers=w)) for w in (1, 8, 32)]
    for r in runs[1:]:
        assert np.array_equal(r.weights, runs[0].weights)
        assert np.array_equal(r.mixture.elbos, runs[0].mixture.elbos)
        assert np.array_equal(r.beta_summary()[0], runs[0].beta_summary()[0])


def test_convergence_flags_and_strict_mode():
    ds = small_dataset("bernoulli", n=40, seed=8).dataset
    prior = PriorSpec.default(2)
    capped = fit_infvb_phi(ds, prior, FitConfig(grid_phi=phi_grid(3), max_inner_iterations=1, workers=1))
    assert not capped.converged.any()
    assert abs(capped.weights.sum() - 1) < 1e-12
    with pytest.raises(RuntimeError):
        fit_infvb_phi(ds, prior, FitConfig(grid_phi=phi_grid(3), max_inner_iterations=1, strict=True, workers=1))
    ok = fit_infvb_phi(ds, prior, FitConfig(grid_phi=phi_grid(3), workers=1))
    assert ok.converged.all()


def test_literal_weights_mode_runs():
    ds = small_dataset("gaussian", n=40, seed=9).dataset
    res = fit_infvb_phi(ds, PriorSpec.default(2), FitConfig(grid_phi=phi_grid(4), weight_mode="literal", workers=1))
    assert abs(res.weights.sum() - 1) < 1e-12


def _coarsen(w):
    return w.reshape(-1, 2).sum(axis=1)


def test_finer_range_grid_refines_q_phi():
    ds = small_dataset("gaussian", n=150, phi=0.3, seed=10).dataset
    prior = PriorSpec.default(2)
    w = {J: fit_infvb_phi(ds, prior, FitConfig(grid_phi=phi_grid(J), workers=1)).weights for J in (10, 20, 40)}
    tv1 = 0.5 * np.abs(w[10] - _coarsen(w[20])).sum()
    tv2 = 0.5 * np.abs(w[20] - _coarsen(w[40])).sum()
    assert tv2 < tv1


def test_auto_sigma2_bounds_bracket_mixture_mean():
    ds = small_dataset("bernoulli", n=60, seed=11).dataset
    prior = PriorSpec.default(2)
    cfg = FitConfig(workers=1)
    lo, hi = auto_sigma2_bounds(ds, prior, cfg, coarse=5)
    mean = fit_infvb_phi(ds, prior, FitConfig(grid_phi=phi_grid(5), workers=1)).sigma2_summary()["mean"]
    assert 0 < lo < mean < hi


def test_too_few_training_rows():
    ds = small_dataset("gaussian", n=2, seed=0).dataset
    with pytest.raises(ValueError):
        fit_infvb_phi(ds, PriorSpec.default(2), FitConfig(grid_phi=phi_grid(2), workers=1))
