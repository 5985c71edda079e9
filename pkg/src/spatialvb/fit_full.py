"""Grid-integrated variational fitters for the full spatial model."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

from .approx import AugmentedDesign
from .ascent import PointFit, fit_gaussian_full_point, fit_latent_point
from .density import log_prior_phi
from .model import Dataset, Kind
from .parallel import ordered_map
from .spatial import CholeskyError, matern_correlation, pairwise_distances
from .variational import (
    WeightedMixture,
    check_grid,
    grid_log_volumes,
    ig_mixture_quantile,
    mixture_moments,
    normalize_weights,
)

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


def phi_grid(size: int, upper: float = SQRT2) -> np.ndarray:
    """``size`` equally spaced range values on (0, upper]."""
    if size < 1:
        raise ValueError("grid size must be positive")
    return upper * np.arange(1, size + 1) / size


def sigma2_grid(size: int, lower: float = 1e-3, upper: float = 2000.0) -> np.ndarray:
    """``size`` log-equally spaced partial-sill values on [lower, upper]."""
    if size < 1:
        raise ValueError("grid size must be positive")
    if not 0 < lower < upper:
        raise ValueError("sigma2 bounds must satisfy 0 < lower < upper")
    if size == 1:
        return np.array([math.sqrt(lower * upper)])
    return np.geomspace(lower, upper, size)


@dataclass(frozen=True, eq=False)
class FitConfig:
    grid_phi: np.ndarray = field(default_factory=lambda: phi_grid(50))
    grid_sigma2: np.ndarray = field(default_factory=lambda: sigma2_grid(20))
    epsilon_star: float = 1e-4
    max_inner_iterations: int = 500
    weight_mode: str = "softmax"
    workers: int | None = None
    seed: int = 0
    nu: float = 0.5
    volume_correction: bool = True
    prune_nats: float = 50.0
    strict: bool = False
    laplace_max_iter: int = 100
    elbo_guard: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grid_phi", check_grid(self.grid_phi, "phi"))
        object.__setattr__(self, "grid_sigma2", check_grid(self.grid_sigma2, "sigma2"))
        if not self.epsilon_star > 0:
            raise ValueError("epsilon_star must be positive")
        if self.max_inner_iterations < 1:
            raise ValueError("max_inner_iterations must be positive")
        if self.weight_mode not in ("softmax", "literal"):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    def with_grid(self, **kw) -> "FitConfig":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class FullFitResult:
    """ELBO-weighted mixture plus per-point diagnostics and the training data it was fitted on."""

    mixture: WeightedMixture
    iterations: np.ndarray
    converged: np.ndarray
    wall_time: float
    config: FitConfig
    method: str
    kind: Kind
    train: Dataset
    model: str = "full"
    basis: object = None
    failures: tuple = ()

    @property
    def weights(self) -> np.ndarray:
        return self.mixture.weights

    def beta_summary(self):
        """Mixture mean and standard deviation of beta."""
        p = self.train.p
        mean, cov, _ = mixture_moments(self.mixture, slice(0, p))
        return mean, np.sqrt(np.clip(np.diag(cov), 0.0, None))

    def sigma2_summary(self) -> dict:
        """Mean and 2.5/97.5% quantiles of the mixture q(sigma2)."""
        mix = self.mixture
        comps = mix.components
        if "sigma2" in mix.names:
            support, pmf = mix.marginal_pmf("sigma2")
            cdf = np.cumsum(pmf)
            lo = support[min(np.searchsorted(cdf, 0.025), support.size - 1)]
            hi = support[min(np.searchsorted(cdf, 0.975), support.size - 1)]
            mean = float(pmf @ support)
            sd = math.sqrt(max(float(pmf @ support**2) - mean**2, 0.0))
            return {"mean": mean, "sd": sd, "q025": float(lo), "q975": float(hi)}
        keep = mix.weights > 0
        ws = mix.weights[keep]
        qk = [c.q_sigma2 for c, k in zip(comps, keep) if k]
        mean = float(sum(w * q.mean for w, q in zip(ws, qk)))
        second = float(sum(w * (q.variance + q.mean**2) for w, q in zip(ws, qk)))
        return {"mean": mean, "sd": math.sqrt(max(second - mean**2, 0.0)),
                "q025": ig_mixture_quantile(ws, qk, 0.025), "q975": ig_mixture_quantile(ws, qk, 0.975)}


def assemble_mixture(grid, names, fits: list, config: FitConfig, log_volumes=None) -> WeightedMixture:
    """Weights from ELBOs (plus log cell volumes in softmax mode) and covariance pruning."""
    elbos = np.array([f.elbo for f in fits])
    ok = np.isfinite(elbos)
    if config.strict:
        ok &= np.array([f.converged for f in fits])
    if not ok.any():
        raise RuntimeError("no grid point produced a usable fit")
    if config.weight_mode == "softmax":
        adj = elbos + (log_volumes if (config.volume_correction and log_volumes is not None) else 0.0)
        adj = np.where(ok, adj, -np.inf)
        weights = normalize_weights(adj, "softmax")
        top = adj[ok].max()
        keep = adj >= top - config.prune_nats
    else:
        weights = np.zeros(elbos.size)
        weights[ok] = normalize_weights(elbos[ok], "literal")
        keep = ok
    comps = [f if k else f.without_covariance() for f, k in zip(fits, keep)]
    lv = np.zeros(elbos.size) if log_volumes is None else np.asarray(log_volumes)
    return WeightedMixture(grid, names, comps, elbos, weights, lv, config.weight_mode)


def _training_arrays(dataset: Dataset):
    tr = dataset.training()
    if tr.n < tr.p + 1:
        raise ValueError(f"need at least p+1={tr.p + 1} training rows, got {tr.n}")
    return tr


def _phi_job(phi, train: Dataset, prior, config: FitConfig, sigma2_values=None):
    """All fits sharing one range value: one correlation factorization, then each sigma2."""
    dist = pairwise_distances(train.coords)
    lp = log_prior_phi(phi, prior.phi_upper)
    try:
        corr = matern_correlation(dist, phi, config.nu).chol
    except CholeskyError as exc:
        return [str(exc)] * (1 if sigma2_values is None else len(sigma2_values))
    kw = dict(eps=config.epsilon_star, max_iter=config.max_inner_iterations, log_prior_phi=lp)
    if train.kind is Kind.GAUSSIAN:
        return [fit_gaussian_full_point(train.X, train.z, prior, corr, **kw)]
    design = AugmentedDesign(train.X)
    if sigma2_values is None:
        return [fit_latent_point(train.kind, design, train.z, prior, corr,
                                 laplace_max_iter=config.laplace_max_iter, elbo_guard=config.elbo_guard, **kw)]
    out, init = [], None
    for s2 in sigma2_values:
        fit = fit_latent_point(train.kind, design, train.z, prior, corr, sigma2=float(s2), init=init,
                               laplace_max_iter=config.laplace_max_iter, elbo_guard=config.elbo_guard, **kw)
        init = fit.q_gamma
        out.append(fit)
    return out


def _failed_fit(message: str) -> PointFit:
    return PointFit(None, None, None, -math.inf, np.zeros(0), 0, False, message=message)


def _collect(raw):
    fits, failures = [], []
    for j, group in enumerate(raw):
        for k, item in enumerate(group):
            if isinstance(item, str):
                failures.append((j, k, item))
                fits.append(_failed_fit(item))
            else:
                fits.append(item)
    return fits, tuple(failures)


def fit_infvb_phi(dataset: Dataset, prior, config: FitConfig | None = None) -> FullFitResult:
    """Integrate over a grid of range values, running coordinate ascent at each."""
    config = config or FitConfig()
    train = _training_arrays(dataset)
    grid = config.grid_phi
    t0 = time.perf_counter()
    raw = ordered_map(partial(_phi_job, train=train, prior=prior, config=config), grid, config.workers)
    fits, failures = _collect(raw)
    mix = assemble_mixture(grid, ("phi",), fits, config, grid_log_volumes(grid))
    wall = time.perf_counter() - t0
    return FullFitResult(mix, np.array([f.iterations for f in fits]), np.array([f.converged for f in fits]),
                         wall, config, "infvb-phi", train.kind, train, failures=failures)


def fit_infvb_phi_sigma(dataset: Dataset, prior, config: FitConfig | None = None) -> FullFitResult:
    """Integrate over a (range, partial sill) grid with the partial sill held fixed per point.

    Gaussian data take the range-only path because q(sigma2) is conjugate there.
    """
    config = config or FitConfig()
    train = _training_arrays(dataset)
    if train.kind is Kind.GAUSSIAN:
        log.info("gaussian data: integrating over range only (partial sill is conjugate)")
        return fit_infvb_phi(dataset, prior, config)
    gp, gs = config.grid_phi, config.grid_sigma2
    t0 = time.perf_counter()
    raw = ordered_map(partial(_phi_job, train=train, prior=prior, config=config, sigma2_values=gs),
                      gp, config.workers)
    fits, failures = _collect(raw)
    grid = np.array([(a, b) for a in gp for b in gs])
    lv = (grid_log_volumes(gp)[:, None] + grid_log_volumes(gs)[None, :]).ravel()
    mix = assemble_mixture(grid, ("phi", "sigma2"), fits, config, lv)
    wall = time.perf_counter() - t0
    return FullFitResult(mix, np.array([f.iterations for f in fits]), np.array([f.converged for f in fits]),
                         wall, config, "infvb-phi-sigma", train.kind, train, failures=failures)


def auto_sigma2_bounds(dataset: Dataset, prior, config: FitConfig, coarse: int = 10,
                       quantiles=(0.001, 0.999)) -> tuple[float, float]:
    """Partial-sill grid bounds from quantiles of a coarse range-only fit."""
    coarse_cfg = replace(config, grid_phi=phi_grid(coarse, prior.phi_upper))
    res = fit_infvb_phi(dataset, prior, coarse_cfg)
    mix = res.mixture
    keep = mix.weights > 0
    qs = [c.q_sigma2 for c, k in zip(mix.components, keep) if k]
    w = mix.weights[keep]
    return ig_mixture_quantile(w, qs, quantiles[0]), ig_mixture_quantile(w, qs, quantiles[1])
