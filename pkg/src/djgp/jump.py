"""Transductive Jump GP: a local GP that keeps only the neighbors sharing the test point's regime.

Each neighbor carries a binary indicator.  In-regime points are explained by a
stationary GP, the rest by a uniform density 1/u over the local target range,
and a logistic model on a linear boundary h(x) = nu^T [1, x] gives the prior
odds.  Fitting is classification EM: hard labels at the E-step, then a refit of
the GP on the in-regime subset and of nu on the labels.

Inputs are handled relative to the test location, so the boundary returned
in :class:`JgpFit` is expressed in coordinates centered at ``x_star``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_expit

from djgp import gp
from djgp.dataset import Dataset
from djgp.errors import InputError
from djgp.gp import GpHyper
from djgp.kernels import chol_solve

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LocalRegion:
    x_star: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        x_star = np.atleast_1d(np.asarray(self.x_star, dtype=float))
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0] or X.shape[1] != x_star.shape[0]:
            raise InputError("region inputs, targets and test location disagree")
        object.__setattr__(self, "x_star", x_star)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    def centered(self) -> np.ndarray:
        return self.inputs - self.x_star


@dataclass(frozen=True)
class JgpConfig:
    max_iters: int = 25
    gp_steps: int = 100
    gp_refit_steps: int = 40
    gp_rate: float = 0.01
    gp_tol: float = 1e-7
    boundary_steps: int = 50
    u_floor: float = 1e-6
    # lower bound on GP lengthscales, as a multiple of the neighborhood's per-axis spread
    min_lengthscale: float = 0.5
    # extra EM starts from the two-cluster split of the targets
    target_split_starts: bool = True
    # prefer fits whose in-region side contains x_star under a near max-margin boundary
    side_check: bool = True
    side_ridge: float = 0.01


@dataclass(frozen=True)
class JgpFit:
    boundary: np.ndarray
    indicators: np.ndarray
    local_gp: GpHyper
    outlier_level: float
    collapsed: bool = False
    iterations: int = 0
    log_joint: list = field(default_factory=list, repr=False)

    @property
    def in_region(self) -> np.ndarray:
        return self.indicators >= 0.5


def select_neighborhood(data: Dataset, x_star, n: int) -> LocalRegion:
    """The n training rows closest to x_star; ties go to the lower row index."""
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    if n > len(data):
        raise InputError(f"neighborhood size {n} exceeds {len(data)} training rows")
    if n < 1:
        raise InputError("neighborhood size must be positive")
    if x_star.shape[0] != data.dim:
        raise InputError("test location dimension does not match the data")
    d2 = np.sum((data.X - x_star) ** 2, axis=1)
    idx = np.argsort(d2, kind="stable")[:n]
    return LocalRegion(x_star, data.X[idx], data.y[idx], idx)


def outlier_level(y: np.ndarray, floor: float = 1e-6) -> float:
    return max(float(np.max(y) - np.min(y)), floor)


def _design(Xc):
    return np.hstack([np.ones((Xc.shape[0], 1)), Xc])


def _label_loglik(nu, A, v):
    h = A @ nu
    return float(np.sum(v * log_expit(h) + (1.0 - v) * log_expit(-h)))


def fit_boundary(A: np.ndarray, v: np.ndarray, nu: np.ndarray, steps: int) -> np.ndarray:
    """Logistic-regression ascent on hard labels; rejected steps halve the rate."""
    val = _label_loglik(nu, A, v)
    rate = 1.0
    for _ in range(steps):
        grad = A.T @ (v - expit(A @ nu)) / A.shape[0]
        if not np.any(grad):
            break
        cand = nu + rate * grad
        cval = _label_loglik(cand, A, v)
        if cval >= val:
            nu, val = cand, cval
            rate = min(rate * 1.5, 1e3)
        else:
            rate *= 0.5
            if rate < 1e-10:
                break
    return nu


def ridge_boundary(A: np.ndarray, v: np.ndarray, ridge: float, iters: int = 50) -> np.ndarray:
    """Damped Newton solve of ridge logistic regression (intercept unpenalized).

    A small ridge gives nearly the max-margin direction on separable labels,
    which places the boundary in the middle of the gap between the groups.
    """
    p = A.shape[1]
    P = np.full(p, ridge)
    P[0] = 1e-8

    def obj(nu):
        return _label_loglik(nu, A, v) - 0.5 * float(np.sum(P * nu * nu))

    nu = np.zeros(p)
    val = obj(nu)
    for _ in range(iters):
        pr = expit(A @ nu)
        g = A.T @ (v - pr) - P * nu
        H = (A * (pr * (1 - pr))[:, None]).T @ A + np.diag(P)
        step = np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-8:
            cand = nu + t * step
            cval = obj(cand)
            if cval >= val:
                break
            t *= 0.5
        else:
            break
        done = cval - val < 1e-10
        nu, val = cand, cval
        if done:
            break
    return nu


def _gp_loglik(Xc, y, S, h: GpHyper):
    if not np.any(S):
        return 0.0
    return gp.log_marginal_likelihood(Dataset(Xc[S], y[S]), h)


def log_joint(Xc, y, S, h: GpHyper, nu, u, Xb=None) -> float:
    """log p(y_S | GP) - |not S| log u + sum_i log p(v_i | nu).

    ``Xb`` are the boundary coordinates when they differ from ``Xc``.
    """
    Xb = Xc if Xb is None else Xb
    prior = _label_loglik(nu, _design(Xb), S.astype(float))
    return _gp_loglik(Xc, y, S, h) - (S.size - S.sum()) * math.log(u) + prior


def _flip_gains(Xc, y, S, h: GpHyper, nu, u, Xb):
    """Exact change of the log-joint from flipping each label alone."""
    fitted = gp.make_fit(Dataset(Xc[S], y[S]), h)
    hb = _design(Xb) @ nu
    prior_gain = log_expit(hb) - log_expit(-hb)  # moving a point in-region
    gains = np.empty(S.size)
    ins = np.flatnonzero(S)
    outs = np.flatnonzero(~S)
    log_u = math.log(u)
    if outs.size:
        m, v = gp.gp_predict_many(fitted, Xc[outs])
        v = v + h.noise_variance
        ll = -0.5 * (LOG_2PI + np.log(v) + (y[outs] - m) ** 2 / v)
        gains[outs] = ll + log_u + prior_gain[outs]
    if ins.size > 1:
        Kinv = chol_solve(fitted.chol_factor, np.eye(ins.size))
        d = np.diag(Kinv)
        resid = fitted.alpha / d           # y_i - loo mean
        ll = -0.5 * (LOG_2PI - np.log(d) + resid**2 * d)
        gains[ins] = -ll - log_u - prior_gain[ins]
    elif ins.size == 1:
        gains[ins] = -np.inf
    return gains


def lengthscale_bounds(Xc: np.ndarray, factor: float):
    """Box on the unconstrained GP vector that only floors the lengthscales."""
    D = Xc.shape[1]
    lo = np.full(3 + D, -np.inf)
    hi = np.full(3 + D, np.inf)
    if factor > 0:
        sd = Xc.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        lo[3:] = np.log(factor * sd)
    return lo, hi


def target_split(y: np.ndarray) -> np.ndarray:
    """Low/high labels from the best two-cluster split of sorted targets (1-D k-means optimum)."""
    order = np.argsort(y, kind="stable")
    ys = y[order]
    n = ys.size
    csum = np.cumsum(ys)
    csq = np.cumsum(ys**2)
    best, cut = np.inf, 1
    for c in range(1, n):
        left = csq[c - 1] - csum[c - 1] ** 2 / c
        rs, rq = csum[-1] - csum[c - 1], csq[-1] - csq[c - 1]
        right = rq - rs**2 / (n - c)
        if left + right < best:
            best, cut = left + right, c
    high = np.zeros(n, dtype=bool)
    high[order[cut:]] = True
    return high


def _run_em(Xc, Xb, y, S, nu, u, bounds, config: JgpConfig) -> JgpFit:
    """One classification-EM run from labels S; boundary in the coordinates Xb."""
    A = _design(Xb)
    h = gp.unpack(np.clip(gp.pack(gp.default_hyper(Xc[S], y[S])), *bounds))
    trace = [log_joint(Xc, y, S, h, nu, u, Xb)]
    it = 0
    gp_steps = config.gp_steps
    while it < config.max_iters:
        it += 1
        # M-step
        h = gp.fit(
            Dataset(Xc[S], y[S]), h, steps=gp_steps, rate=config.gp_rate,
            tol=config.gp_tol, bounds=bounds,
        ).hyper
        gp_steps = config.gp_refit_steps
        nu = fit_boundary(A, S.astype(float), nu, config.boundary_steps)
        current = log_joint(Xc, y, S, h, nu, u, Xb)
        trace.append(current)
        # E-step
        gains = _flip_gains(Xc, y, S, h, nu, u, Xb)
        if S.sum() == 1:
            gains[S] = -np.inf    # never empty the in-region set
        flips = gains > 1e-12
        if not np.any(flips):
            break
        cand = S ^ flips
        cand_val = -np.inf
        if np.any(cand):
            cand_val = log_joint(Xc, y, cand, h, nu, u, Xb)
        if cand_val > current:
            S = cand
        else:
            S = S.copy()
            S[int(np.argmax(gains))] ^= True
        trace.append(log_joint(Xc, y, S, h, nu, u, Xb))
    return JgpFit(nu, S.astype(float), h, u, bool(S.sum() < 2), it, trace)


def _holds_test_point(Xb, S, ridge) -> bool:
    """True when the near max-margin boundary between S and the rest keeps the origin on the S side."""
    if S.all() or not S.any():
        return True
    nu = ridge_boundary(_design(Xb), S.astype(float), ridge)
    return nu[0] >= 0.0


def fit_jgp(region: LocalRegion, config: JgpConfig = JgpConfig()) -> JgpFit:
    """Classification-EM fit of the Jump GP on one neighborhood.

    The primary start labels the nearest half of the points in-region.  With
    ``config.target_split_starts`` EM also runs from each side of the
    two-cluster split of the targets.  With ``config.side_check`` a run whose
    in-region set lies across the boundary from x_star is rerun from the
    complementary labels, and runs on x_star's side are preferred.  Among the
    preferred runs the highest final log-joint wins.
    """
    Xc = region.centered()
    y = region.targets
    n = region.n
    u = outlier_level(y, config.u_floor)
    nu0 = np.zeros(Xc.shape[1] + 1)
    nu0[0] = 0.1

    if np.ptp(y) <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
        S = np.ones(n, dtype=bool)
        return JgpFit(nu0, S.astype(float), gp.default_hyper(Xc, y), u, False, 0, [])

    order = np.argsort(np.sum(Xc**2, axis=1), kind="stable")
    S0 = np.zeros(n, dtype=bool)
    S0[order[: math.ceil(n / 2)]] = True
    starts = [S0]
    if config.target_split_starts and config.max_iters > 0:
        high = target_split(y)
        starts += [side for side in (high, ~high) if not np.array_equal(side, S0)]
    bounds = lengthscale_bounds(Xc, config.min_lengthscale)
    # the boundary is fitted on spread-scaled coordinates for conditioning
    sd = Xc.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Xb = Xc / sd

    seen = set()
    fits = []
    queue = list(starts)
    while queue:
        S = queue.pop(0)
        key = S.tobytes()
        if key in seen:
            continue
        seen.add(key)
        fit = _run_em(Xc, Xb, y, S, nu0.copy(), u, bounds, config)
        ok = True
        if config.side_check and config.max_iters > 0:
            ok = _holds_test_point(Xb, fit.in_region, config.side_ridge)
            if not ok and fit.in_region.sum() < n:
                queue.append(~fit.in_region)
        fits.append((ok, fit.log_joint[-1], fit))
    pool = [f for f in fits if f[0]] or fits
    best = max(pool, key=lambda f: f[1])[2]
    nu = best.boundary.copy()
    nu[1:] /= sd
    return replace(best, boundary=nu)


def jgp_predict(fit: JgpFit, region: LocalRegion) -> tuple[float, float]:
    """GP predictive mean and latent variance at x_star from the in-regime subset."""
    S = fit.in_region
    Xc = region.centered()
    fitted = gp.make_fit(Dataset(Xc[S], region.targets[S]), fit.local_gp)
    m, v = gp.gp_predict_many(fitted, np.zeros((1, Xc.shape[1])))
    return float(m[0]), float(v[0])


def local_gp_predict(
    region: LocalRegion, steps: int = 100, rate: float = 0.01, min_lengthscale: float = 0.5
) -> tuple[float, float]:
    """Plain local GP on the whole neighborhood, the no-jump baseline."""
    Xc = region.centered()
    fitted = gp.fit(
        Dataset(Xc, region.targets), steps=steps, rate=rate, tol=1e-7,
        bounds=lengthscale_bounds(Xc, min_lengthscale),
    )
    m, v = gp.gp_predict_many(fitted, np.zeros((1, Xc.shape[1])))
    return float(m[0]), float(v[0])
