"""Laplace approximation for Poisson models and the Jaakkola-Jordan bound for Bernoulli models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spatial import jittered_cholesky
from .variational import GaussianVariational


class DenseDesign:
    """Stacked design ``[X, Phi]`` held as one dense matrix; ``p`` leading fixed-effect columns."""

    def __init__(self, matrix, p: int):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.p = int(p)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def X(self) -> np.ndarray:
        return self.matrix[:, : self.p]

    def matvec(self, v):
        return self.matrix @ v

    def rmatvec(self, r):
        return self.matrix.T @ r

    def weighted_gram(self, w):
        return (self.matrix.T * w) @ self.matrix

    def diag_quad(self, cov):
        """diag(A C A')."""
        return np.einsum("ij,ij->i", self.matrix @ cov, self.matrix)

    def dense(self):
        return self.matrix


class AugmentedDesign:
    """Design ``[X, I]`` of the full model, applied without materializing the identity."""

    def __init__(self, X):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.p = self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.p + self.n

    def matvec(self, v):
        v = np.asarray(v)
        return self.X @ v[: self.p] + v[self.p:]

    def rmatvec(self, r):
        return np.concatenate([self.X.T @ r, r])

    def weighted_gram(self, w):
        p, n = self.p, self.n
        out = np.empty((p + n, p + n))
        wx = self.X * w[:, None]
        out[:p, :p] = self.X.T @ wx
        out[p:, :p] = wx
        out[:p, p:] = wx.T
        out[p:, p:] = np.diag(w)
        return out

    def diag_quad(self, cov):
        p = self.p
        X = self.X
        bb = np.einsum("ij,ij->i", X @ cov[:p, :p], X)
        bw = np.einsum("ij,ji->i", X, cov[:p, p:])
        return bb + 2.0 * bw + np.diag(cov)[p:]

    def dense(self):
        return np.hstack([self.X, np.eye(self.n)])


def _inverse_from_precision(precision, name):
    chol = jittered_cholesky(precision, jitter=0.0, name=name)
    return chol, chol.inverse


# ---------------------------------------------------------------------------
# Poisson: Laplace approximation


class LaplaceConvergenceError(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True, eq=False)
class PoissonObjectiveSpec:
    """f(g) = Z'Ag - 1'exp(Ag) - (g - m)'P(g - m)/2 for design A, precision P and prior mean m."""

    design: object
    z: np.ndarray
    precision: np.ndarray
    prior_mean: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        P = np.atleast_2d(np.asarray(self.precision, dtype=float))
        d = self.design.d
        if z.size != self.design.n or P.shape != (d, d):
            raise ValueError("objective dimensions are inconsistent")
        m = np.zeros(d) if self.prior_mean is None else np.asarray(self.prior_mean, dtype=float)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "precision", P)
        object.__setattr__(self, "prior_mean", m)

    def objective(self, gamma) -> float:
        eta = self.design.matvec(gamma)
        with np.errstate(over="ignore"):
            mean = np.exp(eta)
        d = gamma - self.prior_mean
        val = float(self.z @ eta - mean.sum() - 0.5 * d @ (self.precision @ d))
        return val if math.isfinite(val) else -math.inf

    def gradient(self, gamma) -> np.ndarray:
        eta = self.design.matvec(gamma)
        return self.design.rmatvec(self.z - np.exp(eta)) - self.precision @ (gamma - self.prior_mean)

    def neg_hessian(self, gamma) -> np.ndarray:
        w = np.exp(self.design.matvec(gamma))
        return self.design.weighted_gram(w) + self.precision


@dataclass(frozen=True, eq=False)
class LaplaceResult:
    q: GaussianVariational
    iterations: int
    converged: bool
    grad_norm: float


def laplace_init(design, z) -> np.ndarray:
    """Zero vector with beta from least squares of log(Z + 1) on X."""
    init = np.zeros(design.d)
    if design.p:
        init[: design.p] = np.linalg.lstsq(design.X, np.log1p(z), rcond=None)[0]
    return init


def laplace_fit(spec: PoissonObjectiveSpec, init=None, max_iter: int = 100, tol: float = 1e-8,
                max_halvings: int = 30, strict: bool = False) -> LaplaceResult:
    """Gaussian approximation at the mode of the Poisson objective.

    Damped Newton ascent with step halving; the covariance is the inverse
    negated Hessian at the mode.
    """
    gamma = laplace_init(spec.design, spec.z) if init is None else np.array(init, dtype=float)
    if not np.isfinite(gamma).all():
        raise ValueError("initial value must be finite")
    f = spec.objective(gamma)
    if not math.isfinite(f):
        gamma = np.zeros(spec.design.d)
        f = spec.objective(gamma)
    g = spec.gradient(gamma)
    scale = max(1.0, float(np.max(np.abs(spec.design.rmatvec(spec.z)))))
    converged = False
    it = 0
    while True:
        gnorm = float(np.max(np.abs(g)))
        if gnorm < tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        chol = jittered_cholesky(spec.neg_hessian(gamma), jitter=0.0, name="negative Hessian")
        step = chol.solve(g)
        slope = float(g @ step)
        t = 1.0
        if slope < 1e-10 * (1.0 + abs(f)):
            # inside the quadratic region rounding hides the ascent; take the Newton step
            gamma = gamma + step
            f = spec.objective(gamma)
            g = spec.gradient(gamma)
            continue
        for _ in range(max_halvings + 1):
            cand = gamma + t * step
            fc = spec.objective(cand)
            if fc >= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no ascent left at working precision
            converged = gnorm < tol * scale
            break
        gamma, f = cand, fc
        g = spec.gradient(gamma)
    chol = jittered_cholesky(spec.neg_hessian(gamma), jitter=0.0, name="negative Hessian")
    q = GaussianVariational(gamma, chol.inverse, n_fixed=spec.design.p, logdet=-chol.logdet)
    res = LaplaceResult(q=q, iterations=it, converged=bool(converged), grad_norm=float(np.max(np.abs(g))))
    if strict and not converged:
        raise LaplaceConvergenceError(f"Newton ascent did not converge (|grad|={res.grad_norm:.3g})", res)
    return res


# ---------------------------------------------------------------------------
# Bernoulli: Jaakkola-Jordan bound


def jj_lambda(xi):
    """-tanh(xi/2)/(4 xi), continued by its limit -1/8 at zero."""
    xi = np.asarray(xi, dtype=float)
    if (xi < 0).any():
        raise ValueError("xi must be nonnegative")
    small = xi < 1e-4
    safe = np.where(small, 1.0, xi)
    out = -np.tanh(safe / 2.0) / (4.0 * safe)
    x2 = xi * xi
    taylor = -(1.0 / 8.0 - x2 / 96.0 + x2 * x2 / 960.0)
    out = np.where(small, taylor, out)
    return out if out.ndim else float(out)


def jj_psi(xi):
    """xi/2 - log(1 + e^xi) + xi tanh(xi/2)/4."""
    xi = np.asarray(xi, dtype=float)
    if (xi < 0).any():
        raise ValueError("xi must be nonnegative")
    out = xi / 2.0 - np.logaddexp(0.0, xi) + xi * np.tanh(xi / 2.0) / 4.0
    return out if out.ndim else float(out)


def jj_bound(x, xi):
    """Quadratic lower bound on -log(1 + e^x)."""
    x = np.asarray(x, dtype=float)
    return jj_lambda(xi) * x * x - x / 2.0 + jj_psi(xi)


@dataclass(frozen=True, eq=False)
class JJState:
    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).ravel()
        if not np.isfinite(xi).all() or (xi < 0).any():
            raise ValueError("xi must be finite and nonnegative")
        object.__setattr__(self, "xi", xi)

    @property
    def D(self) -> np.ndarray:
        """Diagonal of D = diag(lambda(xi))."""
        return jj_lambda(self.xi)

    @property
    def psi(self) -> np.ndarray:
        return jj_psi(self.xi)


def jj_gaussian_update(design, z, precision, jj: JJState, prior_mean=None) -> GaussianVariational:
    """q(gamma) maximizing the bound at fixed xi: C = (-2A'DA + P)^{-1}, mu = C(A'(Z - 1/2) + P m)."""
    z = np.asarray(z, dtype=float)
    P = np.asarray(precision, dtype=float)
    lam = jj.D
    if (lam >= 0).any():
        raise AssertionError("lambda(xi) must be negative")
    A = design.weighted_gram(-2.0 * lam) + P
    chol, cov = _inverse_from_precision(A, "bound precision")
    rhs = design.rmatvec(z - 0.5)
    if prior_mean is not None:
        rhs = rhs + P @ prior_mean
    mu = chol.solve(rhs)
    return GaussianVariational(mu, cov, n_fixed=design.p, logdet=-chol.logdet)


def jj_update_xi(q_gamma: GaussianVariational, design) -> JJState:
    """xi = sqrt(diag(A (C + mu mu') A'))."""
    m = design.matvec(q_gamma.mu)
    v = design.diag_quad(q_gamma.cov) + m * m
    if (v < -1e-10 * max(1.0, float(np.max(np.abs(v))))).any():
        raise AssertionError("negative second moment")
    return JJState(np.sqrt(np.clip(v, 0.0, None)))
