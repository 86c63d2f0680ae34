"""Synthetic piecewise-GP benchmarks and latent-to-observed dimension expansions.

Latent responses are independent GP draws per region with covariance
``theta1 * exp(-|z - z'|^2 / theta2)`` (no 1/2 factor) plus a region mean.
Train targets carry N(0, 4) noise; test targets are noiseless.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from djgp.errors import InputError, NumericalError
from djgp.kernels import chol_psd, chol_solve

THETA1 = 9.0
THETA2 = 200.0
NOISE_VAR = 4.0
L2_MEANS = (0.0, 27.0)
LH_MEAN_STEP = 13.5
LH_BAND = 0.05
EXACT_DRAW_MAX = 2000
MAX_REJECTION_ATTEMPTS = 10**6


@dataclass
class LatentDataset:
    Z: np.ndarray
    y: np.ndarray
    region_labels: np.ndarray
    noise_variance: float
    f: np.ndarray | None = None  # noiseless response
    meta: dict = field(default_factory=dict)


def latent_cov(Z1, Z2, theta1=THETA1, theta2=THETA2):
    d2 = (
        np.sum(Z1**2, 1)[:, None] + np.sum(Z2**2, 1)[None, :] - 2.0 * Z1 @ Z2.T
    )
    return theta1 * np.exp(-np.maximum(d2, 0.0) / theta2)


def gp_draw(Z: np.ndarray, rng: np.random.Generator, theta1=THETA1, theta2=THETA2):
    """Zero-mean GP draw at the rows of Z.

    Up to EXACT_DRAW_MAX points the draw is exact.  Beyond that the first
    EXACT_DRAW_MAX points are drawn jointly and the rest, block by block,
    from their conditional given those anchors (independent residuals).
    """
    N = Z.shape[0]
    if N == 0:
        return np.zeros(0)
    m = min(N, EXACT_DRAW_MAX)
    anchors = Z[:m]
    L = chol_psd(latent_cov(anchors, anchors, theta1, theta2)).factor
    f = np.empty(N)
    f[:m] = L @ rng.standard_normal(m)
    if N > m:
        alpha = chol_solve(L, f[:m])
        for start in range(m, N, EXACT_DRAW_MAX):
            blk = Z[start:start + EXACT_DRAW_MAX]
            Kc = latent_cov(blk, anchors, theta1, theta2)
            mean = Kc @ alpha
            V = np.linalg.solve(L, Kc.T)
            var = np.maximum(theta1 - np.sum(V * V, axis=0), 0.0)
            f[start:start + blk.shape[0]] = mean + np.sqrt(var) * rng.standard_normal(blk.shape[0])
    return f


def piecewise_response(Z, labels, means: dict, rng):
    """Region mean plus an independent GP draw per region."""
    f = np.empty(Z.shape[0])
    for r in np.unique(labels):
        idx = np.flatnonzero(labels == r)
        f[idx] = means[int(r)] + gp_draw(Z[idx], rng)
    return f


# --- L2 phantom ---------------------------------------------------------------

def l2_boundary(z1):
    return 0.25 * np.sin(2.0 * np.pi * z1)


def l2_region(Z: np.ndarray) -> np.ndarray:
    """0 below the sine curve z2 = 0.25 sin(2 pi z1), 1 on or above it."""
    Z = np.atleast_2d(Z)
    return (Z[:, 1] >= l2_boundary(Z[:, 0])).astype(int)


def gen_l2(n_train: int = 1000, n_test: int = 100, rng: np.random.Generator | None = None):
    if n_train < 1 or n_test < 1:
        raise InputError("sample counts must be positive")
    rng = np.random.default_rng() if rng is None else rng
    N = n_train + n_test
    Z = rng.uniform(-0.5, 0.5, size=(N, 2))
    labels = l2_region(Z)
    # the two regions get distinct means in random order
    means = dict(enumerate(rng.permutation(L2_MEANS)))
    f = piecewise_response(Z, labels, means, rng)
    noise = rng.normal(0.0, math.sqrt(NOISE_VAR), N)
    test = np.zeros(N, dtype=bool)
    test[rng.choice(N, n_test, replace=False)] = True
    meta = {
        "generator": "L2",
        "K": 2,
        "theta1": THETA1,
        "theta2": THETA2,
        "noise_variance": NOISE_VAR,
        "region_means": {str(k): float(v) for k, v in means.items()},
        "boundary": "region 1 iff z2 >= 0.25*sin(2*pi*z1)",
    }
    tr = ~test
    train_ds = LatentDataset(Z[tr], f[tr] + noise[tr], labels[tr], NOISE_VAR, f[tr], meta)
    test_ds = LatentDataset(Z[test], f[test], labels[test], 0.0, f[test], meta)
    return train_ds, test_ds


# --- LH family ----------------------------------------------------------------

def lh_partition_values(Z: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Columns f_0 .. f_K of the LH partitioning functions."""
    Z = np.atleast_2d(Z)
    sq = np.sum(Z**2, axis=1)
    cols = [sq - 0.4**2]
    for j in range(Z.shape[1]):
        cols.append(sq - Z[:, j] ** 2 + (Z[:, j] + r[j] * 0.5) ** 2 - 0.3**2)
    return np.stack(cols, axis=1)


def lh_partition_grads(Z: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Gradient norms of f_0 .. f_K at each row of Z."""
    Z = np.atleast_2d(Z)
    out = [2.0 * np.linalg.norm(Z, axis=1)]
    for j in range(Z.shape[1]):
        G = 2.0 * Z.copy()
        G[:, j] = 2.0 * (Z[:, j] + r[j] * 0.5)
        out.append(np.linalg.norm(G, axis=1))
    return np.stack(out, axis=1)


def lh_region(Z: np.ndarray, r: np.ndarray) -> np.ndarray:
    bits = lh_partition_values(Z, r) >= 0
    return (bits * (2 ** np.arange(bits.shape[1]))).sum(axis=1).astype(int)


def near_boundary(Z, r, band=LH_BAND) -> np.ndarray:
    """First-order proximity test: |f_j| <= band * (1 + |grad f_j|) for some j."""
    F = np.abs(lh_partition_values(Z, r))
    G = lh_partition_grads(Z, r)
    return np.any(F <= band * (1.0 + G), axis=1)


def gen_lh(K: int = 4, N: int = 1000, J: int = 100, rng: np.random.Generator | None = None):
    if K < 2:
        raise InputError("LH needs K >= 2")
    if N < 1 or J < 1:
        raise InputError("sample counts must be positive")
    rng = np.random.default_rng() if rng is None else rng
    r = rng.choice([-1.0, 1.0], size=K)
    Z_train = rng.uniform(-0.5, 0.5, size=(N, K))
    accepted = []
    attempts = 0
    while sum(a.shape[0] for a in accepted) < J:
        batch = rng.uniform(-0.5, 0.5, size=(max(4 * J, 256), K))
        attempts += batch.shape[0]
        accepted.append(batch[near_boundary(batch, r)])
        if attempts > MAX_REJECTION_ATTEMPTS and sum(a.shape[0] for a in accepted) < J:
            raise NumericalError(
                f"boundary-proximal sampling exceeded {MAX_REJECTION_ATTEMPTS} attempts",
                attempts=attempts,
            )
    Z_test = np.concatenate(accepted)[:J]
    Z = np.vstack([Z_train, Z_test])
    labels = lh_region(Z, r)
    n_regions = 2 ** (K + 1)
    signs = rng.choice([-1.0, 1.0], size=n_regions)
    means = {k: float(signs[k] * LH_MEAN_STEP * k) for k in range(n_regions)}
    f = piecewise_response(Z, labels, means, rng)
    noise = rng.normal(0.0, math.sqrt(NOISE_VAR), N)
    meta = {
        "generator": "LH",
        "K": K,
        "theta1": THETA1,
        "theta2": THETA2,
        "noise_variance": NOISE_VAR,
        "r": r.tolist(),
        "test_band": LH_BAND,
        "test_band_rule": "min_j |f_j(z)| <= band * (1 + |grad f_j(z)|)",
    }
    train_ds = LatentDataset(Z_train, f[:N] + noise, labels[:N], NOISE_VAR, f[:N], meta)
    test_ds = LatentDataset(Z_test, f[N:], labels[N:], 0.0, f[N:], meta)
    return train_ds, test_ds


# --- dimension expansion ------------------------------------------------------

@dataclass(frozen=True)
class ExpansionSpec:
    kind: str
    target_dim: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("RP", "RF", "PE"):
            raise InputError(f"unknown expansion {self.kind!r}")
        if self.target_dim < 1:
            raise InputError("target dimension must be positive")


def monomial_exponents(K: int, max_degree: int = 3) -> list[tuple[int, ...]]:
    """Index tuples of all monomials of degree 1..max_degree in lexicographic order."""
    out = []
    for deg in range(1, max_degree + 1):
        out.extend(itertools.combinations_with_replacement(range(K), deg))
    return out


def make_expansion(spec: ExpansionSpec, K: int, rng: np.random.Generator | None = None):
    """Draw the random parameters of an expansion; returns a dict usable by apply_expansion."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    D = spec.target_dim
    if spec.kind == "RP":
        if D < K:
            raise InputError("random projection needs target_dim >= K")
        while True:
            W = rng.standard_normal((D, K))
            if np.linalg.matrix_rank(W) == K:
                return {"kind": "RP", "W": W}
    if spec.kind == "RF":
        return {
            "kind": "RF",
            "Omega": rng.standard_normal((D, K)),
            "b": rng.uniform(0.0, 2.0 * np.pi, D),
        }
    terms = monomial_exponents(K)
    if D > len(terms):
        raise InputError(f"PE basis has only {len(terms)} terms for K={K}")
    if D < K:
        raise InputError("polynomial expansion needs target_dim >= K")
    return {"kind": "PE", "terms": terms[:D]}


def apply_expansion(Z: np.ndarray, params: dict) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    kind = params["kind"]
    if kind == "RP":
        return Z @ params["W"].T
    if kind == "RF":
        D = params["Omega"].shape[0]
        return math.sqrt(2.0 / D) * np.cos(Z @ params["Omega"].T + params["b"])
    cols = [np.prod(Z[:, list(t)], axis=1) for t in params["terms"]]
    return np.stack(cols, axis=1)


def expand(Z: np.ndarray, spec: ExpansionSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return apply_expansion(Z, make_expansion(spec, Z.shape[1], rng))
