"""Log-density pieces shared by the variational fitters and the MCMC sampler."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .model import Kind
from .spatial import Cholesky

LOG_2PI = math.log(2.0 * math.pi)


def log_lik(kind, eta, z, tau2: float | None = None) -> float:
    """Conditional log-likelihood of responses given the linear predictor."""
    kind = Kind.parse(kind)
    eta = np.asarray(eta, dtype=float)
    z = np.asarray(z, dtype=float)
    if kind is Kind.POISSON:
        with np.errstate(over="ignore"):
            mean = np.exp(eta)
        return float(z @ eta - mean.sum() - gammaln(z + 1.0).sum())
    if kind is Kind.BERNOULLI:
        return float(z @ eta - np.logaddexp(0.0, eta).sum())
    if tau2 is None:
        raise ValueError("gaussian likelihood needs tau2")
    r = z - eta
    return float(-0.5 * z.size * (LOG_2PI + math.log(tau2)) - 0.5 * (r @ r) / tau2)


def log_prior_beta(beta, prior) -> float:
    d = np.asarray(beta, dtype=float) - prior.beta_mean
    quad = float(d @ np.linalg.solve(prior.beta_cov, d))
    return -0.5 * (prior.p * LOG_2PI + prior.beta_logdet_cov + quad)


def log_prior_latent(latent, sigma2: float, corr: Cholesky | None = None) -> float:
    """log N(latent; 0, sigma2 R) with ``R = I`` when ``corr`` is None."""
    latent = np.asarray(latent, dtype=float)
    dim = latent.size
    if corr is None:
        quad, logdet = float(latent @ latent), 0.0
    else:
        quad, logdet = corr.quad(latent), corr.logdet
    return -0.5 * (dim * (LOG_2PI + math.log(sigma2)) + logdet + quad / sigma2)


def log_prior_ig(x: float, shape: float, rate: float) -> float:
    if not x > 0:
        return -math.inf
    return shape * math.log(rate) - math.lgamma(shape) - (shape + 1.0) * math.log(x) - rate / x


def log_prior_phi(phi: float, upper: float) -> float:
    return -math.log(upper) if 0.0 < phi <= upper else -math.inf


def log_joint_latent(kind, design, z, prior, gamma, sigma2: float, corr: Cholesky | None = None,
                     phi: float | None = None, tau2: float | None = None) -> float:
    """log p(Z, gamma, sigma2 [, tau2] [, phi]) for latent models.

    ``design`` maps gamma = (beta, latent) to the linear predictor.
    """
    gamma = np.asarray(gamma, dtype=float)
    p = prior.p
    eta = design.matvec(gamma)
    out = log_lik(kind, eta, z, tau2)
    out += log_prior_beta(gamma[:p], prior)
    out += log_prior_latent(gamma[p:], sigma2, corr)
    out += log_prior_ig(sigma2, *prior.sigma2_ig)
    if tau2 is not None:
        out += log_prior_ig(tau2, *prior.tau2_ig)
    if phi is not None:
        out += log_prior_phi(phi, prior.phi_upper)
    return out


def log_marginal_gaussian_full(X, z, beta, sigma2: float, corr: Cholesky) -> float:
    """log N(z; X beta, sigma2 R)."""
    r = np.asarray(z, dtype=float) - np.asarray(X) @ np.asarray(beta, dtype=float)
    n = r.size
    return -0.5 * (n * (LOG_2PI + math.log(sigma2)) + corr.logdet + corr.quad(r) / sigma2)


def log_joint_gaussian_full(X, z, prior, beta, sigma2: float, corr: Cholesky, phi: float | None = None) -> float:
    out = log_marginal_gaussian_full(X, z, beta, sigma2, corr)
    out += log_prior_beta(beta, prior)
    out += log_prior_ig(sigma2, *prior.sigma2_ig)
    if phi is not None:
        out += log_prior_phi(phi, prior.phi_upper)
    return out
