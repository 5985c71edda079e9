"""Reference Metropolis-Hastings sampler for the full and basis spatial models.

Blocks per iteration:

* gamma = (beta, latent): preconditioned Langevin proposal (Gaussian, with a
  gradient drift) using the Laplace-style precision at the current state,
  recomputed at checkpoints during burn-in.
* sigma2 (and tau2): log-scale random walk.
* full model, every ``phi_every`` iterations: joint move of (sigma2, phi)
  with the whitened latent field held fixed; phi uses a reflected uniform
  proposal.
* basis model: the same rescaling move for sigma2 alone, every iteration,
  with the whitened coefficients held fixed.

Proposal scales adapt during burn-in and are frozen afterwards.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .approx import AugmentedDesign, DenseDesign, laplace_init
from .density import (
    log_lik,
    log_marginal_gaussian_full,
    log_prior_beta,
    log_prior_ig,
    log_prior_latent,
    log_prior_phi,
)
from .model import Dataset, Kind
from .parallel import rng_stream
from .spatial import BasisMatrix, CholeskyError, jittered_cholesky, matern, pairwise_distances

TARGET_GAMMA = 0.44
TARGET_SCALAR = 0.35


@dataclass(frozen=True, eq=False)
class McmcResult:
    samples: dict
    acceptance: dict
    iterations: int
    burn_in: int
    thin: int
    wall_time: float
    model: str
    kind: Kind
    train: Dataset
    basis: BasisMatrix | None = None
    nu: float = 0.5
    flags: tuple = ()
    final_log_posterior: float = math.nan

    @property
    def n_samples(self) -> int:
        return self.samples["beta"].shape[0]

    def chain_matrix(self, include_latent: bool = False) -> tuple[list, np.ndarray]:
        """Column names and a (samples, columns) matrix of the saved draws."""
        names, cols = [], []
        for j in range(self.samples["beta"].shape[1]):
            names.append(f"beta{j + 1}")
            cols.append(self.samples["beta"][:, j])
        for key in ("sigma2", "tau2", "phi"):
            if self.samples.get(key) is not None:
                names.append(key)
                cols.append(self.samples[key])
        if include_latent and self.samples.get("latent") is not None:
            for j in range(self.samples["latent"].shape[1]):
                names.append(f"latent{j + 1}")
                cols.append(self.samples["latent"][:, j])
        return names, np.column_stack(cols)


def batch_means_se(x, batches: int | None = None) -> float:
    """Batch-means standard error of the mean of a chain.

    Trailing draws that do not fill a batch are dropped.
    """
    x = np.asarray(x, dtype=float).ravel()
    if batches is None:
        batches = max(int(math.isqrt(x.size)), 2)
    if batches < 2:
        raise ValueError("need at least two batches")
    size = x.size // batches
    if size < 1:
        raise ValueError("chain shorter than the number of batches")
    means = x[: size * batches].reshape(batches, size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(batches))


class _Adapter:
    """Robbins-Monro adaptation of a log proposal scale toward a target acceptance rate."""

    def __init__(self, scale: float, target: float):
        self.log_scale = math.log(scale)
        self.target = target
        self.count = 0
        self.accepted = 0
        self.tried = 0

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def update(self, alpha: float, adapting: bool):
        if adapting:
            self.count += 1
            self.log_scale += (alpha - self.target) / self.count**0.6
            self.log_scale = min(max(self.log_scale, -20.0), 5.0)

    def record(self, accepted: bool, counting: bool):
        if counting:
            self.tried += 1
            self.accepted += int(accepted)

    @property
    def rate(self) -> float:
        return self.accepted / self.tried if self.tried else math.nan


def _mean_fn(kind: Kind):
    if kind is Kind.POISSON:
        return np.exp
    if kind is Kind.BERNOULLI:
        return lambda e: 0.5 * (1.0 + np.tanh(0.5 * e))
    return None


def _curvature(kind: Kind, eta, tau2):
    if kind is Kind.POISSON:
        return np.exp(eta)
    if kind is Kind.BERNOULLI:
        pr = 0.5 * (1.0 + np.tanh(0.5 * eta))
        return np.maximum(pr * (1.0 - pr), 1e-6)
    return np.full(eta.size, 1.0 / tau2)


class _LatentTarget:
    """Log posterior of gamma given (sigma2, tau2, correlation) and its gradient."""

    def __init__(self, kind, design, z, prior, corr=None):
        self.kind = kind
        self.design = design
        self.z = z
        self.prior = prior
        self.corr = corr
        self.prec_beta = prior.beta_precision
        self.mean_fn = _mean_fn(kind)

    def latent_quad(self, latent):
        return float(latent @ latent) if self.corr is None else self.corr.quad(latent)

    def value_and_grad(self, gamma, sigma2, tau2=None):
        p = self.prior.p
        eta = self.design.matvec(gamma)
        ll = log_lik(self.kind, eta, self.z, tau2)
        lp = ll + log_prior_beta(gamma[:p], self.prior) + log_prior_latent(gamma[p:], sigma2, self.corr)
        if self.kind is Kind.GAUSSIAN:
            resid = (self.z - eta) / tau2
        else:
            with np.errstate(over="ignore"):
                resid = self.z - self.mean_fn(eta)
        grad = self.design.rmatvec(resid)
        grad[:p] -= self.prec_beta @ (gamma[:p] - self.prior.beta_mean)
        lat = gamma[p:]
        grad[p:] -= (lat if self.corr is None else self.corr.solve(lat)) / sigma2
        return lp, grad, ll

    def preconditioner(self, gamma, sigma2, tau2=None):
        p = self.prior.p
        d = self.design.d
        w = _curvature(self.kind, self.design.matvec(gamma), tau2)
        P = self.design.weighted_gram(w)
        P[:p, :p] += self.prec_beta
        if self.corr is None:
            P[p:, p:] += np.eye(d - p) / sigma2
        else:
            P[p:, p:] += self.corr.inverse / sigma2
        return jittered_cholesky(P, jitter=0.0, name="proposal precision")


def _reflect(x: float, upper: float) -> float:
    while x < 0.0 or x > upper:
        x = -x if x < 0.0 else 2.0 * upper - x
    return x


def mh_sample(dataset: Dataset, model: str, prior, iterations: int = 50_000, seed: int = 0,
              burn_in: int | None = None, thin: int = 10, basis: BasisMatrix | None = None,
              nu: float = 0.5, phi_every: int = 5, init: dict | None = None,
              precondition_every: int = 500, fixed=()) -> McmcResult:
    """Run one chain on the training rows of ``dataset``.

    ``model`` is ``"full"`` or ``"basis"`` (the latter needs ``basis``).
    The first ``burn_in`` iterations (default 20%) adapt proposal scales and
    are discarded; every ``thin``-th later state is saved. With zero
    iterations only the initial state is returned. Names in ``fixed``
    (``sigma2``, ``phi``, ``tau2``) are held at their ``init`` values.
    """
    fixed = frozenset(fixed)
    unknown = fixed - {"sigma2", "phi", "tau2"}
    if unknown:
        raise ValueError(f"cannot hold {sorted(unknown)} fixed")
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    if model not in ("full", "basis"):
        raise ValueError(f"unknown model {model!r}")
    train = dataset.training()
    kind = train.kind
    burn = int(0.2 * iterations) if burn_in is None else int(burn_in)
    rng = rng_stream(seed, "mcmc")
    t0 = time.perf_counter()
    if model == "full" and kind is Kind.GAUSSIAN:
        res = _gaussian_full_chain(train, prior, iterations, burn, thin, nu, phi_every, rng, init, fixed)
    else:
        if model == "basis":
            if basis is None:
                raise ValueError("basis model needs a basis")
            design = DenseDesign(np.hstack([train.X, basis.values]), train.p)
        else:
            design = AugmentedDesign(train.X)
        res = _latent_chain(train, design, prior, model, iterations, burn, thin, nu, phi_every, rng, init,
                            precondition_every, fixed)
    samples, acc, flags, final_lp = res
    wall = time.perf_counter() - t0
    return McmcResult(samples, acc, iterations, burn, thin, wall, model, kind, train, basis, nu, tuple(flags),
                      final_lp)


def _saving(i, burn, thin):
    return i > burn and (i - burn) % thin == 0


def _finish(store, adapters, iterations, burn):
    samples = {k: (np.asarray(v) if v is not None else None) for k, v in store.items()}
    acc = {k: a.rate for k, a in adapters.items()}
    flags = []
    if iterations > burn:
        for k, a in adapters.items():
            if a.tried and a.accepted == 0:
                flags.append(f"all proposals rejected in block {k}")
    return samples, acc, flags


def _accept(rng, log_a) -> tuple[bool, float]:
    """MH decision and the clipped acceptance probability used for adaptation."""
    if not math.isfinite(log_a):
        return False, 0.0
    return math.log(rng.uniform()) < log_a, math.exp(min(log_a, 0.0))


def _latent_chain(train, design, prior, model, iterations, burn, thin, nu, phi_every, rng, init,
                  precondition_every, fixed):
    kind = train.kind
    z = train.z
    p = train.p
    d = design.d
    L = d - p
    full = model == "full"
    upper = prior.phi_upper
    init = dict(init or {})
    gamma = np.asarray(init.get("gamma", laplace_init(design, z) if kind is Kind.POISSON else np.zeros(d)), float)
    sigma2 = float(init.get("sigma2", 1.0))
    phi = float(init.get("phi", 0.5 * upper)) if full else None
    tau2 = float(init.get("tau2", max(np.var(z) / 2.0, 1e-3))) if kind is Kind.GAUSSIAN else None
    dist = pairwise_distances(train.coords) if full else None
    move_sigma = "sigma2" not in fixed
    move_phi = full and "phi" not in fixed
    move_tau = tau2 is not None and "tau2" not in fixed

    def corr_at(ph):
        return jittered_cholesky(matern(dist, ph, nu), name=f"R(phi={ph:g})")

    def log_ig(x):
        return log_prior_ig(x, *prior.sigma2_ig)

    corr = corr_at(phi) if full else None
    target = _LatentTarget(kind, design, z, prior, corr)
    lp, grad, ll = target.value_and_grad(gamma, sigma2, tau2)
    pre = target.preconditioner(gamma, sigma2, tau2)

    ad = {"gamma": _Adapter(1.65**2 / d ** (1.0 / 3.0), TARGET_GAMMA)}
    if move_sigma:
        ad["sigma2"] = _Adapter(0.5, TARGET_SCALAR)
    if move_sigma or move_phi:
        ad["rescale"] = _Adapter(0.3, TARGET_SCALAR)
    if move_tau:
        ad["tau2"] = _Adapter(0.3, TARGET_SCALAR)

    store = {"beta": [], "sigma2": [], "phi": [] if full else None, "tau2": [] if tau2 is not None else None,
             "latent": []}

    def save():
        store["beta"].append(gamma[:p].copy())
        store["sigma2"].append(sigma2)
        store["latent"].append(gamma[p:].copy())
        if full:
            store["phi"].append(phi)
        if tau2 is not None:
            store["tau2"].append(tau2)

    if iterations == 0:
        save()

    for i in range(1, iterations + 1):
        adapting = i <= burn
        counting = not adapting
        dirty = False
        if adapting and i % precondition_every == 0:
            pre = target.preconditioner(gamma, sigma2, tau2)

        # gamma: preconditioned Langevin proposal
        h = ad["gamma"].scale
        drift = 0.5 * h * pre.solve(grad)
        prop = gamma + drift + math.sqrt(h) * linalg.solve_triangular(
            pre.lower, rng.standard_normal(d), lower=True, trans="T", check_finite=False)
        lp_new, grad_new, ll_new = target.value_and_grad(prop, sigma2, tau2)
        back = gamma - prop - 0.5 * h * pre.solve(grad_new)
        fwd = prop - gamma - drift
        log_q = (np.sum((pre.lower.T @ fwd) ** 2) - np.sum((pre.lower.T @ back) ** 2)) / (2.0 * h)
        acc, alpha = _accept(rng, lp_new - lp + log_q)
        if acc:
            gamma, lp, grad, ll = prop, lp_new, grad_new, ll_new
        ad["gamma"].update(alpha, adapting)
        ad["gamma"].record(acc, counting)

        if move_sigma:
            # sigma2 given the latent vector
            quad = target.latent_quad(gamma[p:])
            s_new = sigma2 * math.exp(ad["sigma2"].scale * rng.standard_normal())

            def cond(s):
                return -0.5 * L * math.log(s) - 0.5 * quad / s + log_ig(s) + math.log(s)

            acc, alpha = _accept(rng, cond(s_new) - cond(sigma2))
            if acc:
                sigma2 = s_new
                dirty = True
            ad["sigma2"].update(alpha, adapting)
            ad["sigma2"].record(acc, counting)

        if (move_sigma or move_phi) and (not full or i % phi_every == 0):
            # rescale sigma2 (and phi) with the whitened latent vector held fixed
            c = ad["rescale"].scale
            s_new = sigma2 * math.exp(c * rng.standard_normal()) if move_sigma else sigma2
            phi_new = _reflect(phi + c * upper * (2.0 * rng.uniform() - 1.0), upper) if move_phi else phi
            log_a = -math.inf
            corr_new = corr
            try:
                if move_phi and phi_new > 0.0:
                    corr_new = corr_at(phi_new)
                if not full:
                    lat_new = gamma[p:] * math.sqrt(s_new / sigma2)
                elif phi_new > 0.0:
                    u = corr.solve_lower(gamma[p:]) / math.sqrt(sigma2)
                    lat_new = math.sqrt(s_new) * (corr_new.lower @ u)
                else:
                    lat_new = None
            except CholeskyError:
                lat_new = None
            if lat_new is not None:
                g_new = np.concatenate([gamma[:p], lat_new])
                ll_prop = log_lik(kind, design.matvec(g_new), z, tau2)
                log_a = (ll_prop + log_ig(s_new) + math.log(s_new)) - (ll + log_ig(sigma2) + math.log(sigma2))
                if full:
                    log_a += log_prior_phi(phi_new, upper) - log_prior_phi(phi, upper)
            acc, alpha = _accept(rng, log_a)
            if acc:
                sigma2, phi, corr, gamma = s_new, phi_new, corr_new, g_new
                target.corr = corr
                dirty = True
            ad["rescale"].update(alpha, adapting)
            ad["rescale"].record(acc, counting)

        if move_tau:
            t_new = tau2 * math.exp(ad["tau2"].scale * rng.standard_normal())
            eta = design.matvec(gamma)

            def cond_t(t):
                return log_lik(kind, eta, z, t) + log_prior_ig(t, *prior.tau2_ig) + math.log(t)

            acc, alpha = _accept(rng, cond_t(t_new) - cond_t(tau2))
            if acc:
                tau2 = t_new
                dirty = True
            ad["tau2"].update(alpha, adapting)
            ad["tau2"].record(acc, counting)

        if dirty:
            lp, grad, ll = target.value_and_grad(gamma, sigma2, tau2)
        if _saving(i, burn, thin):
            save()

    samples, acc_rates, flags = _finish(store, ad, iterations, burn)
    final_lp = lp + log_ig(sigma2)
    if full:
        final_lp += log_prior_phi(phi, upper)
    if tau2 is not None:
        final_lp += log_prior_ig(tau2, *prior.tau2_ig)
    return samples, acc_rates, flags, final_lp


def _gaussian_full_chain(train, prior, iterations, burn, thin, nu, phi_every, rng, init, fixed):
    X, z = train.X, train.z
    p = train.p
    upper = prior.phi_upper
    dist = pairwise_distances(train.coords)
    init = dict(init or {})
    beta = np.asarray(init.get("beta", np.linalg.lstsq(X, z, rcond=None)[0]), float)
    sigma2 = float(init.get("sigma2", max(np.var(z - X @ beta), 1e-3)))
    phi = float(init.get("phi", 0.5 * upper))
    move_sigma = "sigma2" not in fixed
    move_phi = "phi" not in fixed

    def corr_at(ph):
        return jittered_cholesky(matern(dist, ph, nu), name=f"R(phi={ph:g})")

    def logpost(b, s2, ph, corr):
        return (log_marginal_gaussian_full(X, z, b, s2, corr) + log_prior_beta(b, prior)
                + log_prior_ig(s2, *prior.sigma2_ig) + log_prior_phi(ph, upper))

    corr = corr_at(phi)
    lp = logpost(beta, sigma2, phi, corr)

    def beta_factor():
        Xw = corr.solve_lower(X)
        return np.linalg.cholesky(np.linalg.inv(Xw.T @ Xw / sigma2 + prior.beta_precision))

    fac = beta_factor()
    ad = {"beta": _Adapter(2.38 / math.sqrt(p), TARGET_SCALAR)}
    if move_sigma:
        ad["sigma2"] = _Adapter(0.3, TARGET_SCALAR)
    if move_phi:
        ad["phi"] = _Adapter(0.3, TARGET_SCALAR)
    store = {"beta": [], "sigma2": [], "phi": [], "tau2": None, "latent": None}

    def save():
        store["beta"].append(beta.copy())
        store["sigma2"].append(sigma2)
        store["phi"].append(phi)

    if iterations == 0:
        save()
    for i in range(1, iterations + 1):
        adapting = i <= burn
        counting = not adapting
        if adapting and i % 500 == 0:
            fac = beta_factor()
        b_new = beta + ad["beta"].scale * (fac @ rng.standard_normal(p))
        lp_new = logpost(b_new, sigma2, phi, corr)
        acc, alpha = _accept(rng, lp_new - lp)
        if acc:
            beta, lp = b_new, lp_new
        ad["beta"].update(alpha, adapting)
        ad["beta"].record(acc, counting)

        if move_sigma:
            s_new = sigma2 * math.exp(ad["sigma2"].scale * rng.standard_normal())
            lp_new = logpost(beta, s_new, phi, corr)
            acc, alpha = _accept(rng, lp_new + math.log(s_new) - lp - math.log(sigma2))
            if acc:
                sigma2, lp = s_new, lp_new
            ad["sigma2"].update(alpha, adapting)
            ad["sigma2"].record(acc, counting)

        if move_phi and i % phi_every == 0:
            phi_new = _reflect(phi + ad["phi"].scale * upper * (2.0 * rng.uniform() - 1.0), upper)
            log_a = -math.inf
            if phi_new > 0.0:
                try:
                    corr_new = corr_at(phi_new)
                    lp_new = logpost(beta, sigma2, phi_new, corr_new)
                    log_a = lp_new - lp
                except CholeskyError:
                    pass
            acc, alpha = _accept(rng, log_a)
            if acc:
                phi, corr, lp = phi_new, corr_new, lp_new
            ad["phi"].update(alpha, adapting)
            ad["phi"].record(acc, counting)
        if _saving(i, burn, thin):
            save()
    samples, acc_rates, flags = _finish(store, ad, iterations, burn)
    return samples, acc_rates, flags, lp
