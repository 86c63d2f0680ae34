"""Point and probabilistic scores, plus dataset roughness statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from djgp.dataset import Dataset
from djgp.errors import InputError

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


@dataclass(frozen=True)
class ScoreReport:
    rmse: float
    mean_crps: float
    per_point: list = field(default_factory=list, repr=False)  # (mean, variance, target, crps)

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mean_crps": self.mean_crps,
            "per_point": [
                {"mean": m, "variance": v, "target": t, "crps": c} for m, v, t, c in self.per_point
            ],
        }


@dataclass(frozen=True)
class RoughnessReport:
    g_avg: float
    g_max: float
    tv2: float
    knn_k: int
    skipped_pairs: int = 0

    def to_dict(self) -> dict:
        return {
            "g_avg": self.g_avg, "g_max": self.g_max, "tv2": self.tv2,
            "knn_k": self.knn_k, "skipped_pairs": self.skipped_pairs,
        }


def _pair(preds, targets):
    p = np.asarray(preds, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise InputError(f"{p.size} predictions but {t.size} targets")
    if p.size == 0:
        raise InputError("no predictions")
    return p, t


def rmse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def crps_gaussian(mu: float, variance: float, y: float) -> float:
    """Closed-form CRPS of N(mu, variance) at observation y."""
    if not variance > 0:
        raise InputError("CRPS needs a positive variance")
    sd = math.sqrt(variance)
    z = (y - mu) / sd
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return sd * (z * (2.0 * float(ndtr(z)) - 1.0) + 2.0 * pdf - INV_SQRT_PI)


def score(means, variances, targets) -> ScoreReport:
    m, t = _pair(means, targets)
    v, _ = _pair(variances, targets)
    crps = [crps_gaussian(a, b, c) for a, b, c in zip(m, v, t)]
    rows = [(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(m, v, t, crps)]
    return ScoreReport(rmse(m, t), float(np.mean(crps)), rows)


def knn_edges(X: np.ndarray, k: int) -> set:
    """Union-symmetrized k-nearest-neighbor edges (i < j); ties go to the lower index."""
    n = X.shape[0]
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    edges = set()
    for i in range(n):
        row = d2[i].copy()
        row[i] = np.inf
        for j in np.argsort(row, kind="stable")[: min(k, n - 1)]:
            edges.add((min(i, int(j)), max(i, int(j))))
    return edges


def first_pc(X: np.ndarray, tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
    """Leading eigenvector of the centered covariance by power iteration.

    The sign makes the largest-magnitude loading positive.
    """
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    v = np.ones(C.shape[0]) / math.sqrt(C.shape[0])
    for _ in range(max_iter):
        w = C @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            break
        w /= nrm
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    i = int(np.argmax(np.abs(v)))
    return v if v[i] >= 0 else -v


def roughness(data: Dataset, k: int = 6) -> RoughnessReport:
    """Average/maximum finite-difference gradients on the k-NN graph and TV2 along the first PC."""
    n = len(data)
    if n < 3:
        raise InputError("roughness needs at least 3 rows")
    if k < 1:
        raise InputError("k must be positive")
    X, y = data.X, data.y
    grads = []
    skipped = 0
    for i, j in sorted(knn_edges(X, k)):
        dist = float(np.linalg.norm(X[i] - X[j]))
        if dist == 0.0:
            skipped += 1
            continue
        grads.append(abs(y[i] - y[j]) / dist)
    g = np.array(grads) if grads else np.zeros(1)
    scores = (X - X.mean(axis=0)) @ first_pc(X)
    order = np.argsort(scores, kind="stable")
    ys = y[order]
    tv2 = float(np.sum(np.abs(np.diff(ys, n=2))))
    return RoughnessReport(float(g.mean()), float(g.max()), tv2, k, skipped)
