"""Stationary GP regression with a constant mean and an ARD squared-exponential kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from djgp.dataset import Dataset
from djgp.errors import InputError, NumericalError
from djgp.kernels import SeParams, chol_psd, chol_solve, se_matrix

LOG_2PI = math.log(2.0 * math.pi)

# number of predictive variances clamped to zero since import
variance_clamps = {"count": 0}


@dataclass(frozen=True)
class GpHyper:
    mean: float
    noise_variance: float
    kernel: SeParams

    def __post_init__(self):
        if not self.noise_variance > 0:
            raise InputError("noise variance must be positive")


@dataclass(frozen=True)
class GpFit:
    hyper: GpHyper
    train_inputs: np.ndarray
    train_targets: np.ndarray
    chol_factor: np.ndarray
    jitter: float = 0.0
    alpha: np.ndarray = field(repr=False, default=None)


def pack(h: GpHyper) -> np.ndarray:
    """Unconstrained vector [mu, log noise, log signal var, log lengthscales]."""
    return np.concatenate(
        [
            [h.mean, math.log(h.noise_variance), math.log(h.kernel.signal_variance)],
            np.log(h.kernel.lengthscales),
        ]
    )


def unpack(theta: np.ndarray) -> GpHyper:
    theta = np.asarray(theta, dtype=float)
    return GpHyper(
        float(theta[0]),
        float(np.exp(theta[1])),
        SeParams(float(np.exp(theta[2])), np.exp(theta[3:])),
    )


def default_hyper(X: np.ndarray, y: np.ndarray) -> GpHyper:
    """Data-driven starting point: sample mean, 10/90 noise/signal split, input spreads."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    var = max(float(np.var(y)), 1e-6)
    sd = X.std(axis=0) if X.shape[0] > 1 else np.ones(X.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    return GpHyper(float(np.mean(y)), 0.1 * var, SeParams(0.9 * var, sd))


def _check(data: Dataset, h: GpHyper):
    if len(data) == 0:
        raise InputError("empty dataset")
    if data.dim != h.kernel.lengthscales.shape[0]:
        raise InputError(
            f"data has {data.dim} columns but kernel has "
            f"{h.kernel.lengthscales.shape[0]} lengthscales"
        )


def _factor(X, h: GpHyper):
    K = se_matrix(X, X, h.kernel)
    K[np.diag_indices_from(K)] += h.noise_variance
    res = chol_psd(K)
    return K, res.factor, res.jitter


def _lml_from_factor(L, r):
    alpha = chol_solve(L, r)
    n = r.shape[0]
    val = -0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    return float(val), alpha


def log_marginal_likelihood(data: Dataset, h: GpHyper) -> float:
    _check(data, h)
    _, L, _ = _factor(data.X, h)
    return _lml_from_factor(L, data.y - h.mean)[0]


def lml_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Log marginal likelihood and its gradient in the unconstrained parameters."""
    h = unpack(theta)
    X = np.atleast_2d(X)
    K, L, _ = _factor(X, h)
    r = y - h.mean
    val, alpha = _lml_from_factor(L, r)
    n, D = X.shape
    Kinv = chol_solve(L, np.eye(n))
    B = np.outer(alpha, alpha) - Kinv
    # jitter is held fixed, so it does not enter the derivatives
    C = K - h.noise_variance * np.eye(n)
    g = np.empty(3 + D)
    g[0] = alpha.sum()
    g[1] = 0.5 * h.noise_variance * np.trace(B)
    BC = B * C
    g[2] = 0.5 * BC.sum()
    ls = h.kernel.lengthscales
    for m in range(D):
        d = (X[:, m][:, None] - X[:, m][None, :]) / ls[m]
        g[3 + m] = 0.5 * np.sum(BC * d * d)
    return val, g


def fit(
    data: Dataset,
    init: GpHyper | None = None,
    steps: int = 300,
    rate: float = 0.01,
    tol: float = 0.0,
    bounds: tuple | None = None,
) -> GpFit:
    """Maximize the log marginal likelihood by gradient ascent.

    Steps are taken on the log-transformed positive parameters and the raw
    mean.  A step that lowers the objective is rejected and the step size is
    halved, so the returned hyperparameters never score below ``init``.
    ``tol`` > 0 stops once an accepted step improves by less than
    ``tol * (1 + |L|)``.  ``bounds`` is an optional (lower, upper) pair on
    the unconstrained vector (see :func:`pack`); steps are projected onto it.
    """
    if init is None:
        init = default_hyper(data.X, data.y)
    _check(data, init)
    X, y = data.X, data.y
    theta = pack(init)
    if bounds is not None:
        lo, hi = bounds
        theta = np.clip(theta, lo, hi)
    if steps > 0:
        try:
            val, grad = lml_and_grad(theta, X, y)
        except NumericalError as exc:
            raise NumericalError(
                f"likelihood evaluation failed at {unpack(theta)}", params=theta
            ) from exc
        if not (np.isfinite(val) and np.all(np.isfinite(grad))):
            raise NumericalError(
                f"non-finite likelihood at {unpack(theta)}", params=theta
            )
        for _ in range(steps):
            cand = theta + rate * grad
            if bounds is not None:
                cand = np.clip(cand, lo, hi)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    cval, cgrad = lml_and_grad(cand, X, y)
                ok = np.isfinite(cval) and np.all(np.isfinite(cgrad))
            except (NumericalError, InputError, FloatingPointError):
                ok = False
            if ok and cval >= val:
                improved = cval - val
                theta, val, grad = cand, cval, cgrad
                if tol > 0 and improved < tol * (1.0 + abs(val)):
                    break
            else:
                rate *= 0.5
                if rate < 1e-12:
                    break
    return make_fit(data, unpack(theta))


def make_fit(data: Dataset, h: GpHyper) -> GpFit:
    _check(data, h)
    _, L, jitter = _factor(data.X, h)
    alpha = chol_solve(L, data.y - h.mean)
    return GpFit(h, data.X, data.y, L, jitter, alpha)


def gp_predict_many(fit: GpFit, X_star: np.ndarray):
    """Predictive means and latent-function variances at the rows of X_star."""
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    h = fit.hyper
    Ks = se_matrix(X_star, fit.train_inputs, h.kernel)
    mean = h.mean + Ks @ fit.alpha
    V = chol_solve(fit.chol_factor, Ks.T)
    var = h.kernel.signal_variance - np.sum(Ks * V.T, axis=1)
    neg = var < 0
    if np.any(neg):
        variance_clamps["count"] += int(neg.sum())
        var = np.where(neg, 0.0, var)
    return mean, var


def gp_predict(fit: GpFit, x_star) -> tuple[float, float]:
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    if x_star.shape[0] != fit.train_inputs.shape[1]:
        raise InputError("test point dimension does not match the fit")
    m, v = gp_predict_many(fit, x_star[None, :])
    return float(m[0]), float(v[0])
