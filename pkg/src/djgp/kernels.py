"""Covariance functions and a jitter-escalating Cholesky factorization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from djgp.errors import InputError, NumericalError

JITTER_SCHEDULE = (0.0, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class SeParams:
    """Squared-exponential kernel with per-dimension lengthscales."""

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not self.signal_variance > 0 or np.any(ls <= 0):
            raise InputError("SE parameters must be strictly positive")


@dataclass(frozen=True)
class ScaleFamilyParams:
    amplitude: float
    lengthscale: float = 1.0

    def __post_init__(self):
        if not (self.amplitude > 0 and self.lengthscale > 0):
            raise InputError("scale-family parameters must be strictly positive")


@dataclass(frozen=True)
class IsoParams:
    signal_std: float
    lengthscale: float

    def __post_init__(self):
        if not (self.signal_std > 0 and self.lengthscale > 0):
            raise InputError("isotropic parameters must be strictly positive")


def se_kernel(x_i, x_j, p: SeParams) -> float:
    """sigma_f^2 * exp(-0.5 * sum_m (x_im - x_jm)^2 / l_m^2)."""
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    x_j = np.atleast_1d(np.asarray(x_j, dtype=float))
    if x_i.shape != x_j.shape or x_i.shape[0] != p.lengthscales.shape[0]:
        raise InputError(
            f"dimension mismatch: {x_i.shape}, {x_j.shape}, "
            f"{p.lengthscales.shape[0]} lengthscales"
        )
    r = (x_i - x_j) / p.lengthscales
    return float(p.signal_variance * np.exp(-0.5 * np.dot(r, r)))


def se_matrix(X1: np.ndarray, X2: np.ndarray, p: SeParams) -> np.ndarray:
    """Vectorized SE cross-covariance between the rows of X1 and X2."""
    A = np.asarray(X1, dtype=float) / p.lengthscales
    B = np.asarray(X2, dtype=float) / p.lengthscales
    d2 = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    return p.signal_variance * np.exp(-0.5 * np.maximum(d2, 0.0))


def unit_corr(d):
    """Unit-lengthscale isotropic correlation C(d) = exp(-d^2 / 2)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise InputError("distance must be nonnegative")
    out = np.exp(-0.5 * d * d)
    return float(out) if out.ndim == 0 else out


def scale_family_kernel(z, z2, p: ScaleFamilyParams) -> float:
    d = float(np.linalg.norm(np.asarray(z, float) - np.asarray(z2, float)))
    return p.amplitude * unit_corr(p.lengthscale * d)


def iso_kernel(x, x2, p: IsoParams) -> float:
    d2 = float(np.sum((np.asarray(x, float) - np.asarray(x2, float)) ** 2))
    return p.signal_std**2 * np.exp(-0.5 * d2 / p.lengthscale**2)


def cov_matrix(points: Sequence, kernel: Callable) -> np.ndarray:
    """Assemble the symmetric covariance matrix of a point list.

    ``kernel`` is any pair function ``k(x, x')``.  Only the upper triangle is
    evaluated; the lower triangle is mirrored so the result is exactly
    symmetric.
    """
    pts = list(points)
    if not pts:
        raise InputError("empty point list")
    n = len(pts)
    M = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            M[i, j] = M[j, i] = kernel(pts[i], pts[j])
    return M


@dataclass(frozen=True)
class CholResult:
    factor: np.ndarray
    jitter: float


def chol_psd(M: np.ndarray, jitter_start: float = 0.0) -> CholResult:
    """Lower Cholesky factor of ``M + delta * I`` with escalating jitter.

    delta walks through ``JITTER_SCHEDULE`` scaled by the mean diagonal,
    skipping levels below ``jitter_start`` (given in absolute units).
    """
    M = np.asarray(M, dtype=float)
    scale = float(np.mean(np.diag(M))) if M.size else 1.0
    if not np.isfinite(scale):
        raise NumericalError("non-finite matrix passed to chol_psd", jitter=None)
    if scale <= 0:
        scale = 1.0
    tried = []
    for level in JITTER_SCHEDULE:
        delta = level * scale
        if delta < jitter_start:
            continue
        tried.append(delta)
        try:
            L = linalg.cholesky(
                M + delta * np.eye(M.shape[0]), lower=True, check_finite=False
            )
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return CholResult(L, delta)
    if not tried:
        tried.append(jitter_start)
    raise NumericalError(
        f"Cholesky failed at maximum jitter {tried[-1]:.3g}", jitter=tried[-1]
    )


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    return linalg.cho_solve((L, True), b, check_finite=False)
