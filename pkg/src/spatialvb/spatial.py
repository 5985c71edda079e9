"""Spatial geometry, Matérn correlation, eigenbases and the dense Cholesky helper."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.special import gamma as gamma_fn
from scipy.special import kv

DEFAULT_JITTER = 1e-8
JITTER_CAP = 1e-4


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after jitter escalation."""


def as_locations(coords) -> np.ndarray:
    """Validate a coordinate array and return it as an (n, 2) float array.

    Rejects non-finite coordinates (reporting the offending row) and exactly
    coincident locations.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"locations must have shape (n, 2), got {coords.shape}")
    if coords.shape[0] < 1:
        raise ValueError("at least one location is required")
    bad = ~np.isfinite(coords).all(axis=1)
    if bad.any():
        raise ValueError(f"non-finite coordinate at index {int(np.flatnonzero(bad)[0])}")
    uniq, first, counts = np.unique(coords, axis=0, return_index=True, return_counts=True)
    if (counts > 1).any():
        dup = uniq[counts > 1][0]
        idx = np.flatnonzero((coords == dup).all(axis=1))
        raise ValueError(f"duplicate locations at indices {idx.tolist()}")
    return coords


def pairwise_distances(coords) -> np.ndarray:
    """Symmetric Euclidean distance matrix of a validated location set."""
    coords = as_locations(coords)
    return cross_distances(coords, coords)


def cross_distances(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diff = a[:, None, :] - b[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if a is b or (a.shape == b.shape and np.array_equal(a, b)):
        np.fill_diagonal(d, 0.0)
        d = 0.5 * (d + d.T)
    return d


def matern(dist, phi: float, nu: float) -> np.ndarray:
    """Matérn correlation evaluated elementwise on a distance array.

    ``nu == 0.5`` uses ``exp(-h / phi)`` directly; other smoothness values go
    through the Bessel-K form.
    """
    if not (phi > 0 and np.isfinite(phi)):
        raise ValueError(f"range phi must be positive, got {phi}")
    if not (nu > 0 and np.isfinite(nu)):
        raise ValueError(f"smoothness nu must be positive, got {nu}")
    dist = np.asarray(dist, dtype=float)
    if nu == 0.5:
        return np.exp(-dist / phi)
    return matern_bessel(dist, phi, nu)


def matern_bessel(dist, phi: float, nu: float) -> np.ndarray:
    dist = np.asarray(dist, dtype=float)
    scaled = np.sqrt(2.0 * nu) * dist / phi
    out = np.ones_like(scaled)
    pos = scaled > 0
    x = scaled[pos]
    with np.errstate(over="ignore", invalid="ignore"):
        vals = (x**nu) * kv(nu, x) / (gamma_fn(nu) * 2.0 ** (nu - 1.0))
    # K_nu underflows to 0 far out; x**nu * 0 is still 0
    vals = np.where(np.isfinite(vals), vals, 0.0)
    out[pos] = np.clip(vals, 0.0, 1.0)
    return out


@dataclass(frozen=True)
class MaternParams:
    sigma2: float = 1.0
    phi: float = 0.5
    nu: float = 0.5

    def __post_init__(self):
        for name in ("sigma2", "phi", "nu"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True, eq=False)
class Cholesky:
    """Lower Cholesky factor of ``matrix + jitter * I`` with cached helpers."""

    lower: np.ndarray
    jitter: float

    @cached_property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def solve(self, b) -> np.ndarray:
        return linalg.cho_solve((self.lower, True), b, check_finite=False)

    def solve_lower(self, b) -> np.ndarray:
        """L^{-1} b (whitening)."""
        return linalg.solve_triangular(self.lower, b, lower=True, check_finite=False)

    @cached_property
    def inverse(self) -> np.ndarray:
        inv, info = linalg.lapack.dpotri(self.lower, lower=1)
        if info != 0:
            raise CholeskyError(f"dpotri failed with info={info}")
        inv = np.tril(inv) + np.tril(inv, -1).T
        return inv

    def quad(self, v) -> float:
        """v' M^{-1} v."""
        w = self.solve_lower(v)
        return float(w @ w)


def jittered_cholesky(
    matrix,
    jitter: float = DEFAULT_JITTER,
    cap: float = JITTER_CAP,
    name: str = "matrix",
) -> Cholesky:
    """Cholesky factor of ``matrix + jitter * I``.

    Jitter escalates by a factor of ten (starting from 1e-8 when zero was
    requested) until the factorization succeeds or the cap is exceeded.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got {m.shape}")
    n = m.shape[0]
    current = float(jitter)
    while True:
        a = m if current == 0.0 else m + current * np.eye(n)
        lower, info = linalg.lapack.dpotrf(a, lower=1, clean=1)
        if info == 0:
            return Cholesky(lower=lower, jitter=current)
        nxt = DEFAULT_JITTER if current == 0.0 else current * 10.0
        if nxt > cap * (1 + 1e-12):
            raise CholeskyError(f"{name} is not positive definite even with jitter {current:g}")
        current = nxt


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """Dense Matérn correlation matrix with its jittered Cholesky factor."""

    values: np.ndarray
    phi: float
    nu: float
    jitter: float = DEFAULT_JITTER

    @cached_property
    def chol(self) -> Cholesky:
        return jittered_cholesky(self.values, self.jitter, name=f"R(phi={self.phi:g})")

    @property
    def logdet(self) -> float:
        return self.chol.logdet

    @property
    def inverse(self) -> np.ndarray:
        return self.chol.inverse


def matern_correlation(dist, phi: float, nu: float = 0.5, jitter: float = DEFAULT_JITTER) -> CorrelationMatrix:
    r = matern(dist, phi, nu)
    return CorrelationMatrix(values=r, phi=float(phi), nu=float(nu), jitter=jitter)


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """Leading eigenvectors of a Matérn covariance at a set of locations.

    Attributes
    ----------
    values : (N, m) array
        Unit-norm eigenvectors in descending-eigenvalue order.
    eigenvalues : (m,) array
    locations : (N, 2) array
        Locations the covariance was built on.
    params : MaternParams
    """

    values: np.ndarray
    eigenvalues: np.ndarray
    locations: np.ndarray
    params: MaternParams

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def extend(self, coords) -> np.ndarray:
        """Nyström extension of the basis to new locations.

        Returns ``C(new, train) U diag(1/lambda)``, which reproduces the
        training rows exactly at the training locations.
        """
        coords = np.asarray(coords, dtype=float)
        c = self.params.sigma2 * matern(cross_distances(coords, self.locations), self.params.phi, self.params.nu)
        return (c @ self.values) / self.eigenvalues


    def restrict(self, rows) -> "BasisMatrix":
        """The rows at ``rows`` as a basis whose extension still uses every source location."""
        rows = np.asarray(rows, dtype=int)
        return RestrictedBasis(self.values[rows], self.eigenvalues, self.locations[rows], self.params, self)


@dataclass(frozen=True, eq=False)
class RestrictedBasis(BasisMatrix):
    """Row subset of a basis built on a larger location set."""

    source: BasisMatrix = None

    def extend(self, coords) -> np.ndarray:
        return self.source.extend(coords)


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = vectors.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            out[:, k] = -col
    return out


def matern_eigenbasis(coords, params: MaternParams, m: int) -> BasisMatrix:
    """The ``m`` leading eigenvectors of the Matérn covariance at ``coords``."""
    coords = as_locations(coords)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"basis size m must satisfy 1 <= m <= n={n}, got {m}")
    cov = params.sigma2 * matern(pairwise_distances(coords), params.phi, params.nu)
    w, v = linalg.eigh(cov, subset_by_index=[n - m, n - 1])
    order = np.argsort(w)[::-1]
    w = w[order]
    v = _fix_signs(v[:, order])
    return BasisMatrix(values=v, eigenvalues=w, locations=coords, params=params)
