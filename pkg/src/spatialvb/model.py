"""Datasets, prior configuration, synthetic data and CSV I/O."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spatial import MaternParams, as_locations, jittered_cholesky, matern, pairwise_distances


class Kind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    BERNOULLI = "bernoulli"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        aliases = {"binary": "bernoulli", "count": "poisson", "normal": "gaussian"}
        v = str(value).strip().lower()
        return cls(aliases.get(v, v))


def _validate_responses(z: np.ndarray, kind: Kind, rows=None):
    rows = np.arange(z.size) if rows is None else rows
    bad = ~np.isfinite(z)
    if bad.any():
        raise ValueError(f"non-finite response at row {int(rows[np.flatnonzero(bad)[0]])}")
    if kind is Kind.BERNOULLI:
        bad = (z != 0) & (z != 1)
        if bad.any():
            raise ValueError(f"bernoulli response not in {{0,1}} at row {int(rows[np.flatnonzero(bad)[0]])}")
    elif kind is Kind.POISSON:
        bad = (z < 0) | (z != np.round(z))
        if bad.any():
            raise ValueError(f"poisson response not a nonnegative integer at row {int(rows[np.flatnonzero(bad)[0]])}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Point-referenced observations with a train/test split.

    ``train`` and ``test`` are disjoint index arrays into the rows.
    """

    coords: np.ndarray
    X: np.ndarray
    z: np.ndarray
    kind: Kind
    train: np.ndarray
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    covariate_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        coords = as_locations(self.coords)
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if X.shape[0] != coords.shape[0] and X.shape[1] == coords.shape[0]:
            X = X.T
        z = np.asarray(self.z, dtype=float).ravel()
        n = coords.shape[0]
        if X.shape[0] != n or z.size != n:
            raise ValueError(f"row counts disagree: coords {n}, X {X.shape[0]}, z {z.size}")
        if not np.isfinite(X).all():
            raise ValueError("non-finite covariate value")
        _validate_responses(z, self.kind)
        train = np.asarray(self.train, dtype=int).ravel()
        test = np.asarray(self.test, dtype=int).ravel()
        if np.intersect1d(train, test).size:
            raise ValueError("train and test indices overlap")
        for idx in (train, test):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError("split index out of range")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("covariate_names length does not match X")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "test", test)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` as a new all-training dataset."""
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.coords[idx], self.X[idx], self.z[idx], self.kind,
                       train=np.arange(idx.size), covariate_names=self.covariate_names)

    def training(self) -> "Dataset":
        return self.subset(self.train)

    def testing(self) -> "Dataset":
        return self.subset(self.test)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.kind is other.kind
                and self.covariate_names == other.covariate_names
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.z, other.z)
                and np.array_equal(self.train, other.train)
                and np.array_equal(self.test, other.test))


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Normal prior on beta, inverse-gamma priors on sigma2/tau2, uniform phi."""

    beta_mean: np.ndarray
    beta_cov: np.ndarray
    sigma2_ig: tuple = (0.1, 0.1)
    tau2_ig: tuple = (0.1, 0.1)
    phi_upper: float = math.sqrt(2.0)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.beta_mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.beta_cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("beta_cov shape does not match beta_mean")
        if not np.allclose(cov, cov.T):
            raise ValueError("beta_cov must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("beta_cov must be positive definite")
        for name in ("sigma2_ig", "tau2_ig"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise ValueError(f"{name} shape and rate must be positive")
            object.__setattr__(self, name, (float(a), float(b)))
        if not self.phi_upper > 0:
            raise ValueError("phi_upper must be positive")
        object.__setattr__(self, "beta_mean", mean)
        object.__setattr__(self, "beta_cov", cov)

    @classmethod
    def default(cls, p: int) -> "PriorSpec":
        return cls(np.zeros(p), 100.0 * np.eye(p))

    @property
    def p(self) -> int:
        return self.beta_mean.size

    @property
    def beta_precision(self) -> np.ndarray:
        return np.linalg.inv(self.beta_cov)

    @property
    def beta_logdet_cov(self) -> float:
        return float(np.linalg.slogdet(self.beta_cov)[1])


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 500
    train_fraction: float = 0.8
    beta_true: tuple = (1.0, 1.0)
    matern: MaternParams = MaternParams(1.0, 0.5, 0.5)
    kind: Kind = Kind.GAUSSIAN
    seed: int = 0
    tau2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.tau2 < 0:
            raise ValueError("tau2 must be nonnegative")


@dataclass(frozen=True, eq=False)
class SimulatedData:
    dataset: Dataset
    omega: np.ndarray
    eta: np.ndarray


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def simulate_dataset(spec: SyntheticSpec) -> SimulatedData:
    """Draw locations, covariates, a Matérn field and responses.

    Locations are uniform on the unit square, covariates iid Unif(-1, 1) and
    the field is ``sigma * L @ eps`` with ``L`` the Cholesky factor of the
    correlation matrix.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n = spec.n
    coords = rng.uniform(0.0, 1.0, size=(n, 2))
    beta = np.asarray(spec.beta_true)
    X = rng.uniform(-1.0, 1.0, size=(n, beta.size))
    r = matern(pairwise_distances(coords), spec.matern.phi, spec.matern.nu)
    chol = jittered_cholesky(r, name="simulation correlation")
    omega = math.sqrt(spec.matern.sigma2) * (chol.lower @ rng.standard_normal(n))
    eta = X @ beta + omega
    if spec.kind is Kind.GAUSSIAN:
        z = eta + math.sqrt(spec.tau2) * rng.standard_normal(n)
    elif spec.kind is Kind.POISSON:
        z = rng.poisson(np.exp(eta)).astype(float)
    else:
        z = (rng.uniform(size=n) < _logistic(eta)).astype(float)
    perm = rng.permutation(n)
    n_train = int(round(spec.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    ds = Dataset(coords, X, z, spec.kind, train=train, test=test)
    return SimulatedData(dataset=ds, omega=omega, eta=eta)


def save_csv(dataset: Dataset, path) -> None:
    """Write ``x,y,<covariates>,z,split`` with round-trip exact floats."""
    path = Path(path)
    split = np.full(dataset.n, "", dtype=object)
    split[dataset.train] = "train"
    split[dataset.test] = "test"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", *dataset.covariate_names, "z", "split"])
        for i in range(dataset.n):
            row = [repr(float(v)) for v in (*dataset.coords[i], *dataset.X[i], dataset.z[i])]
            w.writerow([*row, split[i]])


def load_csv(path, kind) -> Dataset:
    """Read a dataset written by :func:`save_csv` or any ``x,y,...,z`` table.

    A trailing ``split`` column (``train``/``test``/empty) is optional; without
    it every row is a training row.
    """
    kind = Kind.parse(kind)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        has_split = header[-1].lower() == "split"
        cols = header[:-1] if has_split else header
        if len(cols) < 3 or cols[0].lower() != "x" or cols[1].lower() != "y" or cols[-1].lower() != "z":
            raise ValueError(f"{path}: header must be x,y,<covariates>,z[,split]")
        cov_names = tuple(cols[2:-1])
        values, split = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                nums = [float(c) for c in row[: len(cols)]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in nums):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            zval = nums[-1]
            if kind is Kind.BERNOULLI and zval not in (0.0, 1.0):
                raise ValueError(f"{path}:{lineno}: bernoulli response must be 0 or 1")
            if kind is Kind.POISSON and (zval < 0 or zval != round(zval)):
                raise ValueError(f"{path}:{lineno}: poisson response must be a nonnegative integer")
            values.append(nums)
            label = row[-1].strip().lower() if has_split else "train"
            if label not in ("train", "test", ""):
                raise ValueError(f"{path}:{lineno}: unknown split label {row[-1]!r}")
            split.append(label)
    if not values:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(values, dtype=float)
    split = np.asarray(split)
    return Dataset(arr[:, :2], arr[:, 2:-1].reshape(len(arr), -1), arr[:, -1], kind,
                   train=np.flatnonzero(split == "train"), test=np.flatnonzero(split == "test"),
                   covariate_names=cov_names)
