"""Evidence lower bounds for every model, data kind and discretization case.

Every case keeps all additive constants, so ELBO values are comparable
across grid points and cases that share the same data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .approx import JJState
from .spatial import Cholesky
from .variational import (
    GaussianVariational,
    GlsStats,
    InverseGammaVariational,
    ElboValue,
    LOG_2PI,
    latent_quadratic,
)

# case -> (likelihood, sigma2 handling, needs correlation factor)
CASES = {
    "gaussian_full": ("gaussian_full", "q", True),
    "poisson_full_phi": ("poisson", "q", True),
    "poisson_full_phi_sigma": ("poisson", "fixed", True),
    "bernoulli_full_phi": ("bernoulli", "q", True),
    "bernoulli_full_phi_sigma": ("bernoulli", "fixed", True),
    "gaussian_basis_mfvb": ("gaussian", "q", False),
    "gaussian_basis_sigma": ("gaussian", "fixed", False),
    "poisson_basis_mfvb": ("poisson", "q", False),
    "poisson_basis_sigma": ("poisson", "fixed", False),
    "bernoulli_basis_mfvb": ("bernoulli", "q", False),
    "bernoulli_basis_sigma": ("bernoulli", "fixed", False),
}


def case_name(kind, model: str, fixed_sigma2: bool) -> str:
    kind = getattr(kind, "value", kind)
    if model == "full":
        if kind == "gaussian":
            return "gaussian_full"
        return f"{kind}_full_phi_sigma" if fixed_sigma2 else f"{kind}_full_phi"
    return f"{kind}_basis_sigma" if fixed_sigma2 else f"{kind}_basis_mfvb"


@dataclass(frozen=True, eq=False)
class ElboState:
    """Everything an ELBO evaluation may need; unused blocks stay ``None``.

    For ``gaussian_full`` ``q_gamma`` is q(beta) and ``stats`` holds the
    whitened regression; other cases use ``design`` and ``z``.
    """

    prior: object
    q_gamma: GaussianVariational
    design: object = None
    z: np.ndarray = None
    corr: Cholesky | None = None
    q_sigma2: InverseGammaVariational | None = None
    sigma2: float | None = None
    q_tau2: InverseGammaVariational | None = None
    xi: JJState | None = None
    stats: GlsStats | None = None
    log_prior_phi: float = 0.0
    iterations: int = 0
    converged: bool = False


def _sigma_moments(state: ElboState, mode: str):
    """E[1/sigma2], E[log sigma2] and the prior-minus-entropy contribution."""
    a0, b0 = state.prior.sigma2_ig
    if mode == "q":
        q = state.q_sigma2
        if q is None:
            raise ValueError("case requires q_sigma2")
        e_inv, e_log = q.mean_inv, q.mean_log
        extra = a0 * math.log(b0) - math.lgamma(a0) - (a0 + 1.0) * e_log - b0 * e_inv + q.entropy
        return e_inv, e_log, extra
    s = state.sigma2
    if s is None or not s > 0:
        raise ValueError("case requires a positive fixed sigma2")
    extra = a0 * math.log(b0) - math.lgamma(a0) - (a0 + 1.0) * math.log(s) - b0 / s
    return 1.0 / s, math.log(s), extra


def _beta_prior_term(prior, mu_beta, cov_beta) -> float:
    prec = prior.beta_precision
    d = mu_beta - prior.beta_mean
    return -0.5 * (prior.p * LOG_2PI + prior.beta_logdet_cov + d @ prec @ d + np.sum(prec * cov_beta))


def _latent_prior_term(q: GaussianVariational, corr, e_inv, e_log) -> float:
    dim = q.dim - q.n_fixed
    logdet = corr.logdet if corr is not None else 0.0
    return -0.5 * (dim * LOG_2PI + logdet + dim * e_log + e_inv * latent_quadratic(q, corr))


def _expected_loglik(lik: str, state: ElboState) -> float:
    q, design, z = state.q_gamma, state.design, state.z
    if design is None or z is None:
        raise ValueError("case requires design and responses")
    m = design.matvec(q.mu)
    v = design.diag_quad(q.cov)
    if lik == "poisson":
        with np.errstate(over="ignore"):
            return float(z @ m - np.exp(m + 0.5 * v).sum() - gammaln(z + 1.0).sum())
    if lik == "bernoulli":
        if state.xi is None:
            raise ValueError("bernoulli cases require xi")
        xi = state.xi
        return float((z - 0.5) @ m + xi.D @ (v + m * m) + xi.psi.sum())
    if state.q_tau2 is None:
        raise ValueError("gaussian basis cases require q_tau2")
    t = state.q_tau2
    r = z - m
    quad = float(r @ r + v.sum())
    a0, b0 = state.prior.tau2_ig
    n = z.size
    out = -0.5 * n * (LOG_2PI + t.mean_log) - 0.5 * t.mean_inv * quad
    out += a0 * math.log(b0) - math.lgamma(a0) - (a0 + 1.0) * t.mean_log - b0 * t.mean_inv + t.entropy
    return out


def compute_elbo(case: str, state: ElboState) -> ElboValue:
    try:
        lik, mode, needs_corr = CASES[case]
    except KeyError:
        raise ValueError(f"unknown ELBO case {case!r}") from None
    if needs_corr and state.corr is None and lik != "gaussian_full":
        raise ValueError(f"{case} requires the correlation factor")
    if not needs_corr and state.corr is not None:
        raise ValueError(f"{case} uses an identity latent covariance")
    q = state.q_gamma
    if q is None:
        raise ValueError("case requires q_gamma")
    e_inv, e_log, sigma_terms = _sigma_moments(state, mode)
    p = state.prior.p
    if lik == "gaussian_full":
        st = state.stats
        if st is None:
            raise ValueError("gaussian_full requires whitened regression stats")
        n = st.n
        value = -0.5 * (n * LOG_2PI + n * e_log + st.logdet_corr + e_inv * st.expected_quad(q))
        value += _beta_prior_term(state.prior, q.mu, q.cov)
    else:
        value = _expected_loglik(lik, state)
        value += _beta_prior_term(state.prior, q.mu[:p], q.cov[:p, :p])
        value += _latent_prior_term(q, state.corr, e_inv, e_log)
    value += sigma_terms + q.entropy + state.log_prior_phi
    return ElboValue(float(value), state.iterations, state.converged)
