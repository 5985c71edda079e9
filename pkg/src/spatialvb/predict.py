"""Posterior summaries of the linear predictor and response-scale predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Kind
from .parallel import rng_stream
from .spatial import cross_distances, jittered_cholesky, matern, pairwise_distances
from .variational import psd_sqrt

DEFAULT_DRAWS = 2000


@dataclass(frozen=True, eq=False)
class LinearPredictorSummary:
    mean: np.ndarray
    var: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    counts: np.ndarray
    draws: np.ndarray | None = None

    def __post_init__(self):
        if (self.var < 0).any():
            raise ValueError("negative variance")
        if (self.q025 > self.q975).any():
            raise ValueError("quantiles out of order")

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.var)


def summarize_draws(draws: np.ndarray, counts=None, keep_draws: bool = True) -> LinearPredictorSummary:
    draws = np.atleast_2d(draws)
    mean = draws.mean(axis=0)
    var = draws.var(axis=0) if draws.shape[0] > 1 else np.zeros(draws.shape[1])
    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
    counts = np.array([draws.shape[0]]) if counts is None else np.asarray(counts)
    return LinearPredictorSummary(mean, np.clip(var, 0.0, None), lo, hi, counts, draws if keep_draws else None)


class KrigingGeometry:
    """Distances between training and prediction sites, computed once and reused across range values."""

    def __init__(self, train_coords, test_coords):
        self.d11 = pairwise_distances(train_coords)
        self.d21 = cross_distances(test_coords, train_coords)
        self.d22 = cross_distances(test_coords, test_coords)

    def moments(self, phi: float, nu: float = 0.5, jitter: float = 1e-8):
        r11 = matern(self.d11, phi, nu)
        r21 = matern(self.d21, phi, nu)
        r22 = matern(self.d22, phi, nu)
        chol = jittered_cholesky(r11, jitter, name="training correlation")
        weights = chol.solve(r21.T).T
        cond = r22 - weights @ r21.T
        return weights, 0.5 * (cond + cond.T)


def kriging_moments(train_coords, test_coords, phi: float, nu: float = 0.5, jitter: float = 1e-8):
    """Kriging weights ``R21 R11^{-1}`` and conditional correlation ``R22 - R21 R11^{-1} R12``."""
    return KrigingGeometry(train_coords, test_coords).moments(phi, nu, jitter)


def krige(train_coords, test_coords, omega_train, sigma2, phi: float, nu: float,
          rng: np.random.Generator, joint: bool = True, geometry: KrigingGeometry | None = None) -> np.ndarray:
    """Conditional draws of the latent field at test sites, one per row of ``omega_train``."""
    omega_train = np.atleast_2d(omega_train)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (omega_train.shape[0],))
    geometry = geometry or KrigingGeometry(train_coords, test_coords)
    weights, cond = geometry.moments(phi, nu)
    mean = omega_train @ weights.T
    eps = rng.standard_normal(mean.shape)
    if joint:
        noise = eps @ psd_sqrt(cond).T
    else:
        noise = eps * np.sqrt(np.clip(np.diag(cond), 0.0, None))
    return mean + np.sqrt(sigma2)[:, None] * noise


def _allocate(weights, draws: int, seed: int) -> np.ndarray:
    rng = rng_stream(seed, "allocate")
    idx = rng.choice(weights.size, size=draws, p=weights)
    return np.bincount(idx, minlength=weights.size)


def _component_list(fit):
    """(weights, components, grid rows, names) with pruned components removed."""
    if hasattr(fit, "mixture"):
        mix = fit.mixture
        act = mix.active
        w = mix.weights * act
        w = w / math.fsum(w)
        return w, mix.components, mix.grid, mix.names
    return np.ones(1), [fit], np.zeros((1, 0)), ()


def sample_linear_predictor(fit, coords=None, X=None, draws: int = DEFAULT_DRAWS, seed: int = 0,
                            joint: bool = True, keep_draws: bool = True) -> LinearPredictorSummary:
    """Pooled draws of the linear predictor from a fitted variational posterior.

    Grid components are chosen in proportion to their weights; within a
    component gamma is drawn from its Gaussian. Without ``coords`` the
    training locations are used; otherwise ``X`` gives covariates at the new
    locations (kriging for the full model, Nystrom extension for the basis
    model).
    """
    if draws < 1:
        raise ValueError("draws must be positive")
    train = fit.train
    p = train.p
    new = coords is not None
    if new:
        coords = np.asarray(coords, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] != coords.shape[0]:
            X = X.reshape(coords.shape[0], -1)
    weights, comps, grid, names = _component_list(fit)
    counts = _allocate(weights, draws, seed)
    model = getattr(fit, "model", "basis")
    basis = fit.basis
    nu = fit.config.nu
    out = []
    geometry = KrigingGeometry(train.coords, coords) if (new and model == "full") else None
    phi_col = names.index("phi") if "phi" in names else None
    for j, c in enumerate(counts):
        if c == 0:
            continue
        comp = comps[j]
        q = comp.q_gamma
        rng = rng_stream(seed, "predict", j)
        gam = q.sample(rng, int(c))
        beta = gam[:, :p]
        if model == "basis":
            phi_loc = basis.extend(coords) if new else basis.values
            Xloc = X if new else train.X
            out.append(beta @ Xloc.T + gam[:, p:] @ phi_loc.T)
            continue
        if train.kind is Kind.GAUSSIAN:
            omega = train.z[None, :] - beta @ train.X.T
        else:
            omega = gam[:, p:]
        if not new:
            out.append(beta @ train.X.T + omega)
            continue
        s2 = np.full(int(c), comp.sigma2) if comp.sigma2 is not None else comp.q_sigma2.sample(rng, int(c))
        phi = float(grid[j, phi_col])
        w_test = krige(train.coords, coords, omega, s2, phi, nu, rng, joint, geometry)
        out.append(beta @ X.T + w_test)
    return summarize_draws(np.vstack(out), counts, keep_draws)


def mcmc_linear_predictor(result, coords=None, X=None, joint: bool = True, seed: int = 0,
                          keep_draws: bool = True) -> LinearPredictorSummary:
    """Linear-predictor draws from saved MCMC samples (kriging grouped by range value)."""
    train = result.train
    beta = result.samples["beta"]
    S = beta.shape[0]
    new = coords is not None
    if new:
        coords = np.asarray(coords, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
    if result.model == "basis":
        phi_loc = result.basis.extend(coords) if new else result.basis.values
        Xloc = X if new else train.X
        draws = beta @ Xloc.T + result.samples["latent"] @ phi_loc.T
        return summarize_draws(draws, keep_draws=keep_draws)
    if train.kind is Kind.GAUSSIAN:
        omega = train.z[None, :] - beta @ train.X.T
    else:
        omega = result.samples["latent"]
    if not new:
        return summarize_draws(beta @ train.X.T + omega, keep_draws=keep_draws)
    phis = result.samples["phi"]
    s2 = result.samples["sigma2"]
    draws = np.empty((S, coords.shape[0]))
    rng = rng_stream(seed, "mcmc-krige")
    geometry = KrigingGeometry(train.coords, coords)
    uniq, inv = np.unique(phis, return_inverse=True)
    for k, phi in enumerate(uniq):
        rows = np.flatnonzero(inv == k)
        draws[rows] = beta[rows] @ X.T + krige(train.coords, coords, omega[rows], s2[rows], float(phi),
                                                result.nu, rng, joint, geometry)
    return summarize_draws(draws, keep_draws=keep_draws)


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def predict_response(summary: LinearPredictorSummary, kind) -> np.ndarray:
    """Link-scale mean: eta for gaussian, E[exp(eta)] for poisson, E[logistic(eta)] for bernoulli."""
    kind = Kind.parse(kind)
    if kind is Kind.GAUSSIAN:
        return summary.mean.copy()
    if summary.draws is None:
        raise ValueError("response-scale prediction needs the stored draws")
    if kind is Kind.POISSON:
        return np.exp(summary.draws).mean(axis=0)
    return _logistic(summary.draws).mean(axis=0)
