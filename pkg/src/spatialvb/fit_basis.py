"""Variational fitters for the reduced-rank (basis) spatial model."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import partial

import numpy as np

from .approx import DenseDesign, JJState
from .ascent import fit_gaussian_basis_point, fit_latent_point
from .fit_full import FitConfig, FullFitResult, _collect, assemble_mixture
from .model import Dataset, Kind
from .parallel import ordered_map
from .spatial import BasisMatrix
from .variational import GaussianVariational, InverseGammaVariational, grid_log_volumes


@dataclass(frozen=True, eq=False)
class BasisModelState:
    """Result of the mean-field fit of the basis model (a single-component mixture)."""

    design: DenseDesign
    q_gamma: GaussianVariational
    q_sigma2: InverseGammaVariational
    q_tau2: InverseGammaVariational | None
    jj: JJState | None
    trace: np.ndarray
    converged: bool
    wall_time: float
    kind: Kind
    train: Dataset
    basis: BasisMatrix
    config: FitConfig

    @property
    def elbo(self) -> float:
        return float(self.trace[-1])

    @property
    def iterations(self) -> int:
        return self.trace.size

    def beta_summary(self):
        p = self.train.p
        return self.q_gamma.mu[:p].copy(), np.sqrt(np.diag(self.q_gamma.cov)[:p])

    def sigma2_summary(self) -> dict:
        q = self.q_sigma2
        return {"mean": q.mean, "sd": math.sqrt(q.variance) if math.isfinite(q.variance) else math.inf,
                "q025": float(q.ppf(0.025)), "q975": float(q.ppf(0.975))}


def _basis_design(train: Dataset, basis: BasisMatrix) -> DenseDesign:
    if basis.m < 1:
        raise ValueError("basis must have at least one column")
    if basis.values.shape[0] != train.n:
        raise ValueError(f"basis has {basis.values.shape[0]} rows but there are {train.n} training rows")
    if not np.array_equal(basis.locations, train.coords):
        raise ValueError("basis was built on different locations than the training rows")
    return DenseDesign(np.hstack([train.X, basis.values]), train.p)


def fit_hybrid_mfvb(dataset: Dataset, basis: BasisMatrix, prior, config: FitConfig | None = None) -> BasisModelState:
    """Mean-field ascent with q(sigma2) (and q(tau2) for Gaussian data) updated in closed form."""
    config = config or FitConfig()
    train = dataset.training()
    design = _basis_design(train, basis)
    t0 = time.perf_counter()
    kw = dict(eps=config.epsilon_star, max_iter=config.max_inner_iterations)
    if train.kind is Kind.GAUSSIAN:
        fit = fit_gaussian_basis_point(design, train.z, prior, **kw)
    else:
        fit = fit_latent_point(train.kind, design, train.z, prior, None,
                               laplace_max_iter=config.laplace_max_iter, elbo_guard=config.elbo_guard, **kw)
    wall = time.perf_counter() - t0
    return BasisModelState(design, fit.q_gamma, fit.q_sigma2, fit.q_tau2, fit.xi, fit.trace, fit.converged,
                           wall, train.kind, train, basis, config)


def _sigma_job(s2, design, train, prior, config):
    kw = dict(eps=config.epsilon_star, max_iter=config.max_inner_iterations)
    if train.kind is Kind.GAUSSIAN:
        return [fit_gaussian_basis_point(design, train.z, prior, sigma2=float(s2), **kw)]
    return [fit_latent_point(train.kind, design, train.z, prior, None, sigma2=float(s2),
                             laplace_max_iter=config.laplace_max_iter, elbo_guard=config.elbo_guard, **kw)]


def fit_infvb_sigma(dataset: Dataset, basis: BasisMatrix, prior, config: FitConfig | None = None) -> FullFitResult:
    """Integrate over a partial-sill grid, optimizing q(gamma) at each fixed value."""
    config = config or FitConfig()
    train = dataset.training()
    design = _basis_design(train, basis)
    grid = config.grid_sigma2
    t0 = time.perf_counter()
    raw = ordered_map(partial(_sigma_job, design=design, train=train, prior=prior, config=config),
                      grid, config.workers)
    fits, failures = _collect(raw)
    mix = assemble_mixture(grid, ("sigma2",), fits, config, grid_log_volumes(grid))
    wall = time.perf_counter() - t0
    return FullFitResult(mix, np.array([f.iterations for f in fits]), np.array([f.converged for f in fits]),
                         wall, config, "infvb-sigma", train.kind, train, model="basis", basis=basis,
                         failures=failures)


def auto_sigma2_bounds_basis(dataset: Dataset, basis: BasisMatrix, prior, config: FitConfig | None = None,
                             quantiles=(0.001, 0.999)) -> tuple[float, float]:
    """Partial-sill grid bounds from quantiles of the mean-field q(sigma2)."""
    state = fit_hybrid_mfvb(dataset, basis, prior, config)
    return float(state.q_sigma2.ppf(quantiles[0])), float(state.q_sigma2.ppf(quantiles[1]))
