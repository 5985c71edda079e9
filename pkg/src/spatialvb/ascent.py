"""Coordinate ascent at a single grid point, shared by the full and basis fitters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .approx import JJState, PoissonObjectiveSpec, jj_gaussian_update, jj_update_xi, laplace_fit
from .elbo import ElboState, case_name, compute_elbo
from .model import Kind
from .spatial import Cholesky, jittered_cholesky
from .variational import (
    GaussianVariational,
    GlsStats,
    InverseGammaVariational,
    update_q_gamma_gaussian,
    update_q_sigma2_gaussian,
    update_q_sigma2_latent,
    update_q_tau2,
)


@dataclass(frozen=True, eq=False)
class PointFit:
    """Converged (or flagged) variational state at one grid point."""

    q_gamma: GaussianVariational | None
    q_sigma2: InverseGammaVariational | None
    sigma2: float | None
    elbo: float
    trace: np.ndarray
    iterations: int
    converged: bool
    q_tau2: InverseGammaVariational | None = None
    xi: JJState | None = None
    message: str = ""
    grid_values: dict = field(default_factory=dict)

    def without_covariance(self) -> "PointFit":
        return PointFit(None, self.q_sigma2, self.sigma2, self.elbo, self.trace, self.iterations,
                        self.converged, self.q_tau2, None, self.message, self.grid_values)

    @property
    def sigma2_mean(self) -> float:
        return self.sigma2 if self.sigma2 is not None else self.q_sigma2.mean


def _check_eps(eps, max_iter):
    if not eps > 0:
        raise ValueError("epsilon_star must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")


def fit_gaussian_full_point(X, z, prior, corr: Cholesky, eps: float = 1e-4, max_iter: int = 500,
                            log_prior_phi: float = 0.0) -> PointFit:
    """Alternate conjugate q(beta) and q(sigma2) for Z ~ N(X beta, sigma2 R)."""
    _check_eps(eps, max_iter)
    stats = GlsStats.from_data(X, z, corr)
    # q(beta) is updated last so the returned pair is exactly conditional on q(sigma2)
    q_b = update_q_gamma_gaussian(stats, prior, InverseGammaVariational(*prior.sigma2_ig))
    trace = []
    converged = False
    for it in range(1, max_iter + 1):
        q_s = update_q_sigma2_gaussian(stats, prior, q_b)
        q_b = update_q_gamma_gaussian(stats, prior, q_s)
        state = ElboState(prior=prior, q_gamma=q_b, q_sigma2=q_s, stats=stats, log_prior_phi=log_prior_phi)
        trace.append(compute_elbo("gaussian_full", state).value)
        if it > 1 and abs(trace[-1] - trace[-2]) < eps:
            converged = True
            break
    return PointFit(q_b, q_s, None, trace[-1], np.asarray(trace), len(trace), converged)


def _precision(prior, corr, scale, d):
    p = prior.p
    P = np.zeros((d, d))
    P[:p, :p] = prior.beta_precision
    if corr is None:
        P[p:, p:] = scale * np.eye(d - p)
    else:
        P[p:, p:] = scale * corr.inverse
    return P


def _guarded_step(case, q_old, q_new, elbo_old, blocks, halvings: int = 30):
    for _ in range(halvings):
        if compute_elbo(case, ElboState(q_gamma=q_new, **blocks)).value >= elbo_old:
            return q_new
        q_new = GaussianVariational(0.5 * (q_old.mu + q_new.mu), 0.5 * (q_old.cov + q_new.cov), q_old.n_fixed)
    return q_old


def _rescaled(q, q_s, c):
    p = q.n_fixed
    s = np.ones(q.dim)
    s[p:] = c
    logdet = None if q.logdet is None else q.logdet + 2.0 * (q.dim - p) * np.log(c)
    return (GaussianVariational(q.mu * s, q.cov * np.outer(s, s), p, logdet=logdet),
            InverseGammaVariational(q_s.alpha, q_s.beta * c * c))


def _best_rescale(case, q, q_s, blocks):
    def neg(t):
        qg, qs = _rescaled(q, q_s, np.exp(t))
        return -compute_elbo(case, ElboState(q_gamma=qg, q_sigma2=qs, **blocks)).value

    res = optimize.minimize_scalar(neg, bounds=(-3.0, 3.0), method="bounded", options={"xatol": 1e-8})
    if res.fun < neg(0.0):
        return _rescaled(q, q_s, np.exp(res.x))
    return q, q_s


def fit_latent_point(kind, design, z, prior, corr: Cholesky | None = None, sigma2: float | None = None,
                     eps: float = 1e-4, max_iter: int = 500, log_prior_phi: float = 0.0,
                     init: GaussianVariational | None = None, laplace_max_iter: int = 100,
                     elbo_guard: bool = True, rescale: bool = True) -> PointFit:
    """Poisson (Laplace) or Bernoulli (quadratic bound) ascent for one grid point.

    ``corr`` is the Cholesky factor of the latent correlation (full model) or
    ``None`` for an identity latent covariance (basis model). With ``sigma2``
    given, q(sigma2) is replaced by that fixed value.

    The Laplace q(gamma) is not the ELBO maximizer given q(sigma2), so a raw
    Laplace step can lower the bound. With ``elbo_guard`` a step that does so
    is backtracked toward the previous q(gamma) by halving.

    For Bernoulli data with a free sill, ``rescale`` adds a step after each
    sweep that scales the latent block of q(gamma) by c and the q(sigma2)
    rate by c^2, with c chosen to maximize the bound. The sill and latent
    scale are otherwise coupled so tightly that plain sweeps crawl; the
    step includes c = 1, so the bound never drops and fixed points are
    unchanged.
    """
    kind = Kind.parse(kind)
    if kind is Kind.GAUSSIAN:
        raise ValueError("use the conjugate Gaussian fitters for gaussian data")
    _check_eps(eps, max_iter)
    z = np.asarray(z, dtype=float)
    d = design.d
    if d <= prior.p:
        raise ValueError("latent block is empty")
    model = "basis" if corr is None else "full"
    case = case_name(kind, model, sigma2 is not None)
    mean0 = np.concatenate([prior.beta_mean, np.zeros(d - prior.p)])
    q_s = InverseGammaVariational(*prior.sigma2_ig) if sigma2 is None else None
    scale = q_s.mean_inv if sigma2 is None else 1.0 / sigma2
    xi = JJState(np.ones(design.n)) if kind is Kind.BERNOULLI else None
    mu_prev = None if init is None else init.mu
    q = init
    trace = []
    converged = False
    laplace_ok = True
    for it in range(1, max_iter + 1):
        if kind is Kind.BERNOULLI and it > 1:
            xi = jj_update_xi(q, design)
        P = _precision(prior, corr, scale, d)
        if kind is Kind.POISSON:
            res = laplace_fit(PoissonObjectiveSpec(design, z, P, mean0), init=mu_prev, max_iter=laplace_max_iter)
            laplace_ok = res.converged
            if elbo_guard and sigma2 is None and it > 1:
                q = _guarded_step(case, q, res.q, trace[-1], dict(
                    prior=prior, design=design, z=z, corr=corr, q_sigma2=q_s, log_prior_phi=log_prior_phi))
            else:
                q = res.q
            mu_prev = q.mu
        else:
            q = jj_gaussian_update(design, z, P, xi, mean0)
        if sigma2 is None:
            q_s = update_q_sigma2_latent(q, prior, corr)
            if rescale and kind is Kind.BERNOULLI:
                q, q_s = _best_rescale(case, q, q_s, dict(prior=prior, design=design, z=z, corr=corr, xi=xi,
                                                          log_prior_phi=log_prior_phi))
            scale = q_s.mean_inv
        state = ElboState(prior=prior, q_gamma=q, design=design, z=z, corr=corr, q_sigma2=q_s,
                          sigma2=sigma2, xi=xi, log_prior_phi=log_prior_phi)
        trace.append(compute_elbo(case, state).value)
        if kind is Kind.POISSON and sigma2 is not None:
            # nothing else to update: the Laplace fit is the whole optimization
            converged = laplace_ok
            break
        if it > 1 and abs(trace[-1] - trace[-2]) < eps:
            converged = laplace_ok
            break
    msg = "" if laplace_ok else "Newton ascent did not reach the gradient tolerance"
    return PointFit(q, q_s, sigma2, trace[-1], np.asarray(trace), len(trace), converged, xi=xi, message=msg)


def fit_gaussian_basis_point(design, z, prior, sigma2: float | None = None, eps: float = 1e-4,
                             max_iter: int = 500, log_prior_phi: float = 0.0) -> PointFit:
    """Conjugate ascent over q(gamma), q(sigma2) and q(tau2) for Z ~ N(X beta + Phi delta, tau2 I)."""
    _check_eps(eps, max_iter)
    z = np.asarray(z, dtype=float)
    d, p, n = design.d, prior.p, design.n
    if d <= p:
        raise ValueError("latent block is empty")
    case = case_name("gaussian", "basis", sigma2 is not None)
    gram = design.weighted_gram(np.ones(n))
    cross = design.rmatvec(z)
    mean0 = np.concatenate([prior.beta_mean, np.zeros(d - p)])
    q_s = InverseGammaVariational(*prior.sigma2_ig) if sigma2 is None else None
    q_t = InverseGammaVariational(*prior.tau2_ig)
    trace = []
    converged = False
    for it in range(1, max_iter + 1):
        s = q_s.mean_inv if sigma2 is None else 1.0 / sigma2
        P = _precision(prior, None, s, d)
        chol = jittered_cholesky(q_t.mean_inv * gram + P, jitter=0.0, name="q(gamma) precision")
        mu = chol.solve(q_t.mean_inv * cross + P @ mean0)
        q = GaussianVariational(mu, chol.inverse, n_fixed=p, logdet=-chol.logdet)
        if sigma2 is None:
            q_s = update_q_sigma2_latent(q, prior, None)
        r = z - design.matvec(mu)
        q_t = update_q_tau2(float(r @ r + np.sum(gram * q.cov)), n, prior)
        state = ElboState(prior=prior, q_gamma=q, design=design, z=z, q_sigma2=q_s, sigma2=sigma2,
                          q_tau2=q_t, log_prior_phi=log_prior_phi)
        trace.append(compute_elbo(case, state).value)
        if it > 1 and abs(trace[-1] - trace[-2]) < eps:
            converged = True
            break
    return PointFit(q, q_s, sigma2, trace[-1], np.asarray(trace), len(trace), converged, q_tau2=q_t)
