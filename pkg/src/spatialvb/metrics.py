"""Prediction scores: RMSPE, AUC, CRPS and interval coverage."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def _pair(a, b, name_a="truth", name_b="predictions"):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError(f"{name_a} and {name_b} lengths differ ({a.size} vs {b.size})")
    if a.size == 0:
        raise ValueError("inputs must be nonempty")
    return a, b


def rmspe(truth, predictions) -> float:
    t, p = _pair(truth, predictions)
    return math.sqrt(float(np.mean((t - p) ** 2)))


def auc(labels, scores) -> float:
    """Mann-Whitney estimate of the ROC area with ties counted as one half."""
    y, s = _pair(labels, scores, "labels", "scores")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("both classes must be present")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def crps_samples(y: float, draws) -> float:
    """Sample CRPS: mean|X - y| - mean|X - X'|/2 over all ordered draw pairs."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    m = x.size
    if m == 0:
        raise ValueError("draws must be nonempty")
    first = float(np.mean(np.abs(x - y)))
    # sum_{i,j} |x_i - x_j| = 2 sum_k (2k - m - 1) x_(k) for sorted x
    k = np.arange(1, m + 1)
    pair_sum = 2.0 * float(np.sum((2 * k - m - 1) * x))
    return first - 0.5 * pair_sum / (m * m)


def crps_matrix(truth, draws) -> np.ndarray:
    """Per-location sample CRPS for a (draws, locations) matrix."""
    truth = np.asarray(truth, dtype=float).ravel()
    draws = np.atleast_2d(draws)
    if draws.shape[1] != truth.size:
        raise ValueError("draw columns must match truth length")
    return np.array([crps_samples(t, draws[:, i]) for i, t in enumerate(truth)])


def coverage95(truth, lower, upper) -> float:
    """Fraction of locations whose interval [lower, upper] contains the truth."""
    t = np.asarray(truth, dtype=float).ravel()
    lo = np.asarray(lower, dtype=float).ravel()
    hi = np.asarray(upper, dtype=float).ravel()
    if not (t.size == lo.size == hi.size) or t.size == 0:
        raise ValueError("truth and interval lengths must agree and be nonempty")
    if (lo > hi).any():
        raise ValueError(f"inverted interval at index {int(np.flatnonzero(lo > hi)[0])}")
    return float(np.mean((lo <= t) & (t <= hi)))


@dataclass(frozen=True, eq=False)
class ScoreReport:
    kind: str
    rmspe: float | None
    auc: float | None
    crps: float
    coverage: float | None
    detail: dict

    def __post_init__(self):
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError("auc out of range")
        if self.coverage is not None and not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage out of range")
        if self.crps < 0:
            raise ValueError("crps must be nonnegative")

    def row(self) -> dict:
        return {"kind": self.kind, "rmspe": self.rmspe, "auc": self.auc, "crps": self.crps,
                "coverage95": self.coverage}


def score_predictions(kind, z_test, response, eta_summary, eta_true=None) -> ScoreReport:
    """Score test-set predictions.

    RMSPE of the response-scale prediction (gaussian, poisson) or AUC of the
    predicted probabilities (bernoulli); CRPS on the linear-predictor scale
    against the true eta when known, else against the observed response;
    coverage of the true eta by the 95% intervals when known.
    """
    kind = getattr(kind, "value", str(kind))
    z_test = np.asarray(z_test, dtype=float)
    r = rmspe(z_test, response) if kind != "bernoulli" else None
    a = auc(z_test, response) if kind == "bernoulli" else None
    target = eta_true if eta_true is not None else z_test
    per_crps = crps_matrix(target, eta_summary.draws)
    cov = coverage95(eta_true, eta_summary.q025, eta_summary.q975) if eta_true is not None else None
    detail = {"z": z_test, "prediction": np.asarray(response), "crps": per_crps}
    return ScoreReport(kind, r, a, float(per_crps.mean()), cov, detail)
