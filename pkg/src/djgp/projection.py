"""Global projection layer: GP prior over region projections with sparse inducing outputs.

Every region j owns a K x D projection W_j.  Entry (k, d) of the W_j's is a
zero-mean GP over test locations with covariance s^2 exp(-|x - x'|^2 / 2 l_k^2).
The process is summarized at L2 trainable inducing inputs whose outputs carry
a per-element Gaussian posterior q(R).  The torch functions here are shared with
the ELBO so that autograd sees the same arithmetic the public API reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from djgp.dataset import Dataset
from djgp.errors import InputError, NumericalError
from djgp.kernels import JITTER_SCHEDULE

DTYPE = torch.float64


@dataclass
class GlobalInducing:
    inputs: np.ndarray      # (L2, D)
    post_mean: np.ndarray   # (L2, K, D)
    post_var: np.ndarray    # (L2, K, D)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.post_mean = np.asarray(self.post_mean, dtype=float)
        self.post_var = np.asarray(self.post_var, dtype=float)
        L2, D = self.inputs.shape
        if self.post_mean.shape != self.post_var.shape or self.post_mean.shape[::2] != (L2, D):
            raise InputError("inducing posterior shape does not match inputs")
        if np.any(self.post_var <= 0):
            raise InputError("inducing posterior variances must be positive")


@dataclass(frozen=True)
class ThetaW:
    signal_std: float
    row_lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.row_lengthscales, dtype=float))
        object.__setattr__(self, "row_lengthscales", ls)
        if not self.signal_std > 0 or np.any(ls <= 0):
            raise InputError("projection kernel parameters must be positive")


@dataclass(frozen=True)
class ProjectionPosterior:
    mean: np.ndarray  # (K, D)
    var: np.ndarray   # (K, D), entrywise


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def cholesky_jitter(M: torch.Tensor) -> torch.Tensor:
    """Batched lower Cholesky with the shared jitter schedule.

    The jitter level is chosen on a detached copy and applied as a constant,
    so gradients flow through the factorization of ``M + delta I``.
    """
    scale = torch.diagonal(M, dim1=-2, dim2=-1).mean().detach().clamp_min(1e-300)
    eye = torch.eye(M.shape[-1], dtype=M.dtype)
    for level in JITTER_SCHEDULE:
        delta = float(level * scale)
        L, info = torch.linalg.cholesky_ex((M + delta * eye).detach())
        if int(info.max()) == 0 and torch.isfinite(L).all():
            return torch.linalg.cholesky(M + delta * eye)
    raise NumericalError(
        f"Cholesky failed at maximum jitter {delta:.3g}", jitter=delta
    )


def iso_cov(A: torch.Tensor, B: torch.Tensor, s, ls) -> torch.Tensor:
    """Per-row covariance stack (K, nA, nB) with entries s^2 exp(-d^2 / 2 l_k^2)."""
    d2 = (A[:, None, :] - B[None, :, :]).pow(2).sum(-1)
    return s * s * torch.exp(-0.5 * d2[None, :, :] / (ls * ls)[:, None, None])


def qw_moments_t(x_tilde, R_mean, R_var, s, ls, X_star):
    """Entrywise moments of q(W_j) for every row of X_star: (J, K, D) mean and var."""
    K_RR = iso_cov(x_tilde, x_tilde, s, ls)
    L = cholesky_jitter(K_RR)
    K_Rj = iso_cov(x_tilde, X_star, s, ls)             # (K, L2, J)
    A = torch.cholesky_solve(K_Rj, L)                  # K_RR^-1 K_Rj
    mean = torch.einsum("klj,lkd->jkd", A, R_mean)
    shrink = (A * K_Rj).sum(dim=1)                     # (K, J)
    inflate = torch.einsum("klj,lkd->jkd", A * A, R_var)
    var = (s * s - shrink).T[:, :, None] + inflate
    return mean, var.clamp_min(0.0)


def kl_global_t(x_tilde, R_mean, R_var, s, ls):
    """sum_{k,d} KL(N(mu_kd, diag(sigma_kd^2)) || N(0, K_RR^(k)))."""
    L2 = x_tilde.shape[0]
    K_RR = iso_cov(x_tilde, x_tilde, s, ls)
    L = cholesky_jitter(K_RR)                          # (K, L2, L2)
    logdet = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)  # (K,)
    Kinv = torch.cholesky_inverse(L)
    mu = R_mean.permute(1, 0, 2)                       # (K, L2, D)
    var = R_var.permute(1, 0, 2)
    trace = torch.einsum("kll,kld->kd", Kinv, var)
    maha = (mu * torch.cholesky_solve(mu, L)).sum(1)   # (K, D)
    kl = 0.5 * (
        logdet[:, None] - torch.log(var).sum(1) - L2 + trace + maha
    )
    return kl.sum()


def qw_moments(g: GlobalInducing, tw: ThetaW, x_star) -> ProjectionPosterior:
    K = tw.row_lengthscales.shape[0]
    if g.post_mean.shape[1] != K:
        raise InputError(f"inducing posterior has {g.post_mean.shape[1]} rows, expected {K}")
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    if x_star.shape[0] != g.inputs.shape[1]:
        raise InputError("test location dimension does not match inducing inputs")
    with torch.no_grad():
        m, v = qw_moments_t(
            _t(g.inputs), _t(g.post_mean), _t(g.post_var),
            _t(tw.signal_std), _t(tw.row_lengthscales), _t(x_star[None, :]),
        )
    return ProjectionPosterior(m[0].numpy(), v[0].numpy())


def sample_w(p: ProjectionPosterior, rng: np.random.Generator) -> np.ndarray:
    return p.mean + np.sqrt(p.var) * rng.standard_normal(p.mean.shape)


def kl_global(g: GlobalInducing, tw: ThetaW) -> float:
    with torch.no_grad():
        return float(
            kl_global_t(
                _t(g.inputs), _t(g.post_mean), _t(g.post_var),
                _t(tw.signal_std), _t(tw.row_lengthscales),
            )
        )


def init_global_inducing(
    data: Dataset, L2: int, rng: np.random.Generator, K: int = 1
) -> GlobalInducing:
    """Inducing inputs scattered around the input mean by the column spreads."""
    if L2 < 1:
        raise InputError("need at least one global inducing point")
    X = data.X
    xbar = X.mean(axis=0)
    sd = X.std(axis=0)
    D = X.shape[1]
    inputs = xbar + rng.standard_normal((L2, D)) * sd
    post_mean = 0.1 * rng.standard_normal((L2, K, D))
    return GlobalInducing(inputs, post_mean, np.ones((L2, K, D)))
