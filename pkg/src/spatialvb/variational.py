"""Variational families, conjugate updates and ELBO-weighted mixtures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, optimize, stats
from scipy.special import digamma, gammaln

from .spatial import Cholesky, jittered_cholesky

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianVariational:
    """Gaussian q(gamma) over the stacked vector (beta, latent).

    ``n_fixed`` is the length of the leading beta block. ``logdet`` may be
    supplied by callers that already hold a factorization of the precision.
    """

    mu: np.ndarray
    cov: np.ndarray
    n_fixed: int = 0
    logdet: float | None = None

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {mu.size}")
        if not (np.isfinite(mu).all() and np.isfinite(cov).all()):
            raise ValueError("non-finite variational parameters")
        if not 0 <= self.n_fixed <= mu.size:
            raise ValueError("n_fixed out of range")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mu.size

    @cached_property
    def logdet_cov(self) -> float:
        if self.logdet is not None:
            return float(self.logdet)
        sign, val = np.linalg.slogdet(self.cov)
        return float(val) if sign > 0 else -math.inf

    @property
    def entropy(self) -> float:
        return 0.5 * self.logdet_cov + 0.5 * self.dim * (1.0 + LOG_2PI)

    @property
    def mu_fixed(self) -> np.ndarray:
        return self.mu[: self.n_fixed]

    @property
    def mu_latent(self) -> np.ndarray:
        return self.mu[self.n_fixed:]

    @property
    def cov_fixed(self) -> np.ndarray:
        return self.cov[: self.n_fixed, : self.n_fixed]

    @property
    def cov_latent(self) -> np.ndarray:
        return self.cov[self.n_fixed:, self.n_fixed:]

    @cached_property
    def sqrt_cov(self) -> np.ndarray:
        """Symmetric square root via eigh; accepts PSD (including zero) covariances."""
        return psd_sqrt(self.cov)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        eps = rng.standard_normal((size, self.dim))
        return self.mu + eps @ self.sqrt_cov.T


def psd_sqrt(cov: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Square root of a symmetric PSD matrix; rejects clearly negative eigenvalues."""
    cov = 0.5 * (cov + cov.T)
    w, v = linalg.eigh(cov)
    scale = max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    if w.size and w.min() < -tol * scale:
        raise np.linalg.LinAlgError(f"covariance is not PSD (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True)
class InverseGammaVariational:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError(f"inverse-gamma parameters must be positive, got ({self.alpha}, {self.beta})")

    @property
    def mean_inv(self) -> float:
        """E[1/x]."""
        return self.alpha / self.beta

    @property
    def mean_log(self) -> float:
        """E[log x]."""
        return math.log(self.beta) - float(digamma(self.alpha))

    @property
    def mean(self) -> float:
        return self.beta / (self.alpha - 1.0) if self.alpha > 1.0 else math.inf

    @property
    def variance(self) -> float:
        if self.alpha <= 2.0:
            return math.inf
        return self.beta**2 / ((self.alpha - 1.0) ** 2 * (self.alpha - 2.0))

    @property
    def entropy(self) -> float:
        a = self.alpha
        return a + math.log(self.beta) + float(gammaln(a)) - (1.0 + a) * float(digamma(a))

    def cdf(self, x):
        return stats.invgamma.cdf(x, self.alpha, scale=self.beta)

    def ppf(self, q):
        return stats.invgamma.ppf(q, self.alpha, scale=self.beta)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.beta / rng.gamma(self.alpha, 1.0, size=size)


@dataclass(frozen=True)
class ElboValue:
    value: float
    iterations: int = 0
    converged: bool = False

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"ELBO must be finite, got {self.value}")

    def __float__(self):
        return float(self.value)


# ---------------------------------------------------------------------------
# Gaussian full model: q(beta), q(sigma2) with Z ~ N(X beta, sigma2 R)


@dataclass(frozen=True, eq=False)
class GlsStats:
    """Whitened design and response ``L^{-1} X``, ``L^{-1} z`` for ``R = L L'``."""

    Xw: np.ndarray
    zw: np.ndarray
    logdet_corr: float

    @classmethod
    def from_data(cls, X, z, corr: Cholesky | None = None) -> "GlsStats":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        z = np.asarray(z, dtype=float).ravel()
        if corr is None:
            return cls(X, z, 0.0)
        return cls(corr.solve_lower(X), corr.solve_lower(z), corr.logdet)

    @property
    def n(self) -> int:
        return self.zw.size

    @cached_property
    def gram(self) -> np.ndarray:
        return self.Xw.T @ self.Xw

    @cached_property
    def cross(self) -> np.ndarray:
        return self.Xw.T @ self.zw

    def residual_quad(self, mu) -> float:
        r = self.zw - self.Xw @ mu
        return float(r @ r)

    def expected_quad(self, q_beta: GaussianVariational) -> float:
        """E_q[(Z - X beta)' R^{-1} (Z - X beta)]."""
        return self.residual_quad(q_beta.mu) + float(np.sum(self.gram * q_beta.cov))


def _inverse_with_logdet(matrix: np.ndarray, name: str) -> tuple[np.ndarray, float]:
    """Inverse of an SPD matrix and the log-determinant of that inverse."""
    chol = jittered_cholesky(matrix, jitter=0.0, name=name)
    return chol.inverse, -chol.logdet


def update_q_gamma_gaussian(stats: GlsStats, prior, q_sigma2: InverseGammaVariational) -> GaussianVariational:
    """Conjugate q(beta) given E[1/sigma2]."""
    a = q_sigma2.mean_inv
    prec_beta = prior.beta_precision
    bracket = a * stats.gram + prec_beta
    cov, logdet = _inverse_with_logdet(bracket, "q(beta) precision")
    mu = cov @ (a * stats.cross + prec_beta @ prior.beta_mean)
    return GaussianVariational(mu, cov, n_fixed=mu.size, logdet=logdet)


def update_q_sigma2_gaussian(stats: GlsStats, prior, q_beta: GaussianVariational) -> InverseGammaVariational:
    a0, b0 = prior.sigma2_ig
    if stats.n == 0:
        return InverseGammaVariational(a0, b0)
    return InverseGammaVariational(a0 + 0.5 * stats.n, b0 + 0.5 * stats.expected_quad(q_beta))


# ---------------------------------------------------------------------------
# Latent models: q(sigma2) given q(gamma)


def latent_quadratic(q_gamma: GaussianVariational, corr: Cholesky | None = None) -> float:
    """E_q[w' K w] with ``K = R^{-1}`` (full model) or the identity (basis model)."""
    mu = q_gamma.mu_latent
    cov = q_gamma.cov_latent
    if corr is None:
        return float(mu @ mu + np.trace(cov))
    if corr.n != mu.size:
        raise ValueError(f"correlation dimension {corr.n} does not match latent dimension {mu.size}")
    return corr.quad(mu) + float(np.sum(corr.inverse * cov))


def update_q_sigma2_latent(q_gamma: GaussianVariational, prior, corr: Cholesky | None = None) -> InverseGammaVariational:
    a0, b0 = prior.sigma2_ig
    dim = q_gamma.dim - q_gamma.n_fixed
    return InverseGammaVariational(a0 + 0.5 * dim, b0 + 0.5 * latent_quadratic(q_gamma, corr))


def update_q_tau2(residual_quad: float, n: int, prior) -> InverseGammaVariational:
    a0, b0 = prior.tau2_ig
    return InverseGammaVariational(a0 + 0.5 * n, b0 + 0.5 * residual_quad)


# ---------------------------------------------------------------------------
# Weights and mixtures


def normalize_weights(elbos, mode: str = "softmax") -> np.ndarray:
    """Normalized grid weights from per-point ELBOs.

    ``softmax`` exponentiates after subtracting the maximum; ``literal``
    divides each ELBO by their sum and requires all entries to share a sign.
    """
    e = np.asarray(elbos, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("at least one ELBO is required")
    if np.isnan(e).any() or np.isposinf(e).any():
        raise ValueError("ELBOs must be finite or -inf")
    if mode == "softmax":
        top = e.max()
        if not np.isfinite(top):
            raise ValueError("all ELBOs are -inf")
        w = np.exp(e - top)
    elif mode in ("literal", "literal-ratio"):
        if not np.isfinite(e).all():
            raise ValueError("literal weights need finite ELBOs")
        if not ((e > 0).all() or (e < 0).all()):
            raise ValueError("literal weights need ELBOs of a single strict sign")
        w = e.copy()
    else:
        raise ValueError(f"unknown weight mode {mode!r}")
    return w / math.fsum(w)


def grid_log_volumes(grid) -> np.ndarray:
    """Log cell widths of a 1-D grid (central differences, one-sided at the ends)."""
    g = np.asarray(grid, dtype=float)
    if g.size == 1:
        return np.zeros(1)
    return np.log(np.gradient(g))


def check_grid(grid, name: str) -> np.ndarray:
    g = np.asarray(grid, dtype=float).ravel()
    if g.size == 0:
        raise ValueError(f"{name} grid is empty")
    if not (np.isfinite(g).all() and (g > 0).all()):
        raise ValueError(f"{name} grid must be positive and finite")
    if (np.diff(g) <= 0).any():
        raise ValueError(f"{name} grid must be strictly increasing")
    return g


@dataclass(frozen=True, eq=False)
class WeightedMixture:
    """Conditional variational fits on a grid combined with ELBO weights.

    ``grid`` has one row per grid point and one column per discretized
    parameter (named in ``names``). ``components[j]`` is the per-point fit
    whose ``q_gamma`` may be ``None`` when its weight was negligible.
    """

    grid: np.ndarray
    names: tuple
    components: list
    elbos: np.ndarray
    weights: np.ndarray
    log_volumes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mode: str = "softmax"

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim == 1:
            grid = grid[:, None]
        object.__setattr__(self, "grid", grid)
        n = grid.shape[0]
        if not (len(self.components) == n == len(self.elbos) == len(self.weights)):
            raise ValueError("mixture lengths disagree")
        if grid.shape[1] != len(self.names):
            raise ValueError("grid columns do not match names")
        w = np.asarray(self.weights)
        if (w < 0).any() or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        for k, name in enumerate(self.names):
            # a product grid repeats values; a single coordinate must itself increase
            check_grid(grid[:, k] if grid.shape[1] == 1 else np.unique(grid[:, k]), name)

    def __len__(self):
        return self.grid.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.grid[:, self.names.index(name)]

    def marginal_pmf(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Support and probabilities of q(name) on its grid."""
        col = self.column(name)
        support, inv = np.unique(col, return_inverse=True)
        pmf = np.zeros(support.size)
        np.add.at(pmf, inv, self.weights)
        return support, pmf

    @property
    def active(self) -> np.ndarray:
        return np.array([c.q_gamma is not None for c in self.components])


def mixture_moments(mix: WeightedMixture, index=None):
    """Mean and covariance of the mixture q(gamma) plus the grid pmf.

    ``index`` selects a sub-vector of gamma. Components without a stored
    covariance are dropped and the remaining weights renormalized.
    """
    act = mix.active
    if not act.any():
        raise ValueError("mixture has no stored components")
    w = mix.weights[act]
    w = w / math.fsum(w)
    comps = [c.q_gamma for c, a in zip(mix.components, act) if a]
    sel = slice(None) if index is None else index
    mean = np.zeros_like(comps[0].mu[sel])
    second = np.zeros((mean.size, mean.size))
    for wj, q in zip(w, comps):
        mu = q.mu[sel]
        cov = q.cov[np.ix_(np.arange(q.dim)[sel], np.arange(q.dim)[sel])]
        mean += wj * mu
        second += wj * (cov + np.outer(mu, mu))
    cov = second - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    if len(comps) == 1:
        q = comps[0]
        mean = q.mu[sel].copy()
        cov = q.cov[np.ix_(np.arange(q.dim)[sel], np.arange(q.dim)[sel])].copy()
    pmf = {name: mix.marginal_pmf(name) for name in mix.names}
    return mean, cov, pmf


def mixture_variance_diag(mix: WeightedMixture) -> tuple[np.ndarray, np.ndarray]:
    """Mean and marginal variances of q(gamma) without forming the full covariance."""
    act = mix.active
    w = mix.weights[act]
    w = w / math.fsum(w)
    comps = [c.q_gamma for c, a in zip(mix.components, act) if a]
    mean = sum(wj * q.mu for wj, q in zip(w, comps))
    second = sum(wj * (np.diag(q.cov) + q.mu**2) for wj, q in zip(w, comps))
    return mean, np.clip(second - mean**2, 0.0, None)


def ig_mixture_quantile(weights, components, q: float) -> float:
    """Quantile of a finite mixture of inverse-gamma distributions."""
    weights = np.asarray(weights, dtype=float)

    def cdf(x):
        return sum(w * c.cdf(x) for w, c in zip(weights, components)) - q

    lo = min(c.ppf(q) for c in components)
    hi = max(c.ppf(q) for c in components)
    if hi <= lo:
        return float(lo)
    return float(optimize.brentq(cdf, lo, hi, xtol=1e-12 * max(hi, 1.0)))
