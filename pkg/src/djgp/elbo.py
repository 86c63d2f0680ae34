"""Evidence lower bound of the two-layer model and its gradient-ascent trainer.

All J regions share n, L1 and K, so the per-region terms are evaluated as
batched torch tensors in float64 and differentiated by autograd.  Public
scalar helpers (:func:`psi1`, :func:`psi2`, :func:`likelihood_scalars`, ...)
are thin numpy wrappers over the same torch code.

Conventions fixed here:

* local inputs enter every formula centered at the region's test location,
  so the projected test point sits at the origin;
* ``a`` is the kernel amplitude: K_fr = a C(.), Psi1 ~ a, Psi2 ~ a^2 and the
  prior variance of f is a^2, which gives V1 = a^2 - tr(K_r^-1 Psi2);
* the squared inducing-pair distance in Psi2 carries a factor 1/4, the
  exact value of E[k(w, z) k(w, z')] for the unit SE correlation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from djgp import projection as proj
from djgp.errors import InputError, NumericalError
from djgp.jump import LocalRegion
from djgp.projection import DTYPE, GlobalInducing, ProjectionPosterior, ThetaW, _t

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
AMPLITUDE_FLOOR = 1e-8
# 50 nodes keep the logistic expectations within 1e-6 for |mu| <= 5, sigma <= 3
DEFAULT_N_Q = 50


@dataclass
class LocalInducing:
    inputs: np.ndarray     # (L1, K), fixed
    post_mean: np.ndarray  # (L1,)
    post_root: np.ndarray  # (L1, L1) upper triangular U, Sigma_r = U^T U

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.post_mean = np.asarray(self.post_mean, dtype=float).reshape(-1)
        self.post_root = np.triu(np.asarray(self.post_root, dtype=float))
        L1 = self.inputs.shape[0]
        if self.post_mean.shape != (L1,) or self.post_root.shape != (L1, L1):
            raise InputError("local inducing shapes disagree")

    @property
    def post_cov(self) -> np.ndarray:
        return self.post_root.T @ self.post_root

    @classmethod
    def from_cov(cls, inputs, post_mean, post_cov) -> "LocalInducing":
        L = np.linalg.cholesky(np.asarray(post_cov, dtype=float))
        return cls(inputs, post_mean, L.T)


@dataclass
class RegionParams:
    boundary: np.ndarray      # (K+1,)
    noise_variance: float
    mean: float
    amplitude: float
    outlier_level: float
    rho: np.ndarray           # (n,)

    def __post_init__(self):
        self.boundary = np.asarray(self.boundary, dtype=float).reshape(-1)
        self.rho = np.asarray(self.rho, dtype=float).reshape(-1)
        if not (self.noise_variance > 0 and self.amplitude > 0 and self.outlier_level > 0):
            raise InputError("noise variance, amplitude and outlier level must be positive")
        if np.any((self.rho < 0) | (self.rho > 1)):
            raise InputError("rho must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    rate: float = 0.01
    n_q: int = DEFAULT_N_Q
    rel_tol: float = 1e-5
    patience: int = 10
    # u_j enters as -log u_j, which is unbounded above as u_j -> 0
    train_outlier_level: bool = False


@dataclass
class RegionState:
    region: LocalRegion
    inducing: LocalInducing
    params: RegionParams


@dataclass
class VariationalState:
    global_inducing: GlobalInducing
    theta_w: ThetaW
    regions: list = field(default_factory=list)
    config: TrainConfig = TrainConfig()

    @property
    def K(self) -> int:
        return self.theta_w.row_lengthscales.shape[0]

    @property
    def D(self) -> int:
        return self.global_inducing.inputs.shape[1]


# --- closed-form pieces (torch) -------------------------------------------------

def unit_kernel_t(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """exp(-|a - b|^2 / 2) over the last axis, batched over leading axes."""
    d2 = (A[..., :, None, :] - B[..., None, :, :]).pow(2).sum(-1)
    return torch.exp(-0.5 * d2)


def projected_moments_t(X, mean, var):
    """Means and variances of W x for rows x of X: X (..., n, D), mean/var (..., K, D)."""
    m = torch.einsum("...nd,...kd->...nk", X, mean)
    v = torch.einsum("...nd,...kd->...nk", X * X, var)
    return m, v


def psi1_t(m, v, Z, a):
    """m, v (..., n, K); Z (..., L1, K); a (...,) -> (..., n, L1)."""
    denom = 1.0 + v[..., :, None, :]
    diff = m[..., :, None, :] - Z[..., None, :, :]
    log_terms = -0.5 * torch.log(denom) - diff.pow(2) / (2.0 * denom)
    return a[..., None, None] * torch.exp(log_terms.sum(-1))


def psi2_t(m, v, Z, a):
    """(..., n, L1, L1): expected outer product of the kernel row of each point."""
    zz = Z[..., :, None, :] - Z[..., None, :, :]
    pair = torch.exp(-0.25 * zz.pow(2).sum(-1))                  # (..., L1, L1)
    zbar = 0.5 * (Z[..., :, None, :] + Z[..., None, :, :])       # (..., L1, L1, K)
    denom = 1.0 + 2.0 * v[..., :, None, None, :]                # (..., n, 1, 1, K)
    diff = m[..., :, None, None, :] - zbar[..., None, :, :, :]
    log_terms = -0.5 * torch.log(denom) - diff.pow(2) / denom
    return (a * a)[..., None, None, None] * pair[..., None, :, :] * torch.exp(log_terms.sum(-1))


def hermgauss_t(n_q: int):
    x, w = np.polynomial.hermite.hermgauss(n_q)
    return _t(x), _t(w / math.sqrt(math.pi))


def expected_log_sigmoid_t(mu, sd, nodes, weights):
    z = mu[..., None] + math.sqrt(2.0) * sd[..., None] * nodes
    e_pos = (F.logsigmoid(z) * weights).sum(-1)
    e_neg = (F.logsigmoid(-z) * weights).sum(-1)
    return e_pos, e_neg


def boundary_moments_t(m, v, nu):
    """nu (..., K+1); m, v (..., n, K) -> mean and std of nu^T [1, W x]."""
    mu = nu[..., None, 0] + (m * nu[..., None, 1:]).sum(-1)
    var = (v * nu[..., None, 1:].pow(2)).sum(-1)
    # masked root: the quadrature is even in sd, so zero is the right slope at sd = 0
    pos = var > 0
    return mu, torch.where(pos, torch.sqrt(torch.where(pos, var, torch.ones_like(var))), 0.0 * var)


def gauss_kl_t(mu, U, L):
    """KL(N(mu, U^T U) || N(0, L L^T)), batched; U upper, L lower triangular."""
    n = mu.shape[-1]
    logdet_p = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    logdet_q = torch.log(torch.diagonal(U, dim1=-2, dim2=-1).pow(2)).sum(-1)
    # tr(K^-1 U^T U) = |L^-1 U^T|_F^2
    A = torch.linalg.solve_triangular(L, U.transpose(-1, -2), upper=False)
    b = torch.linalg.solve_triangular(L, mu[..., None], upper=False)
    return 0.5 * (logdet_p - logdet_q - n + A.pow(2).sum((-1, -2)) + b.pow(2).sum((-1, -2)))


# --- public numpy wrappers ------------------------------------------------------

def psi1(region_inputs, qw: ProjectionPosterior, li: LocalInducing, amplitude: float) -> np.ndarray:
    X = _t(np.atleast_2d(region_inputs))
    m, v = projected_moments_t(X, _t(qw.mean), _t(qw.var))
    return psi1_t(m, v, _t(li.inputs), _t(amplitude)).numpy()


def psi2(region_inputs, i: int, qw: ProjectionPosterior, li: LocalInducing, amplitude: float) -> np.ndarray:
    X = _t(np.atleast_2d(region_inputs)[i:i + 1])
    m, v = projected_moments_t(X, _t(qw.mean), _t(qw.var))
    return psi2_t(m, v, _t(li.inputs), _t(amplitude))[0].numpy()


def expected_log_sigmoid(mu_z: float, sigma_z: float, n_q: int = DEFAULT_N_Q) -> tuple[float, float]:
    if sigma_z < 0:
        raise InputError("sigma_z must be nonnegative")
    if n_q < 1:
        raise InputError("n_q must be positive")
    nodes, weights = hermgauss_t(n_q)
    e_pos, e_neg = expected_log_sigmoid_t(_t(mu_z), _t(sigma_z), nodes, weights)
    return float(e_pos), float(e_neg)


def boundary_moments(x_i, qw: ProjectionPosterior, nu) -> tuple[float, float]:
    X = _t(np.atleast_2d(x_i))
    m, v = projected_moments_t(X, _t(qw.mean), _t(qw.var))
    mu, sd = boundary_moments_t(m, v, _t(nu))
    return float(mu[0]), float(sd[0])


def optimal_rho(T1: float, T2: float) -> float:
    """sigma(T1 - T2): the Bernoulli posterior maximizing the bound."""
    d = T1 - T2
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def local_kernel(li: LocalInducing) -> np.ndarray:
    Z = _t(li.inputs)
    return unit_kernel_t(Z, Z).numpy()


def kl_local(li: LocalInducing) -> float:
    Z = _t(li.inputs)
    L = proj.cholesky_jitter(unit_kernel_t(Z, Z))
    return float(gauss_kl_t(_t(li.post_mean), _t(li.post_root), L))


def likelihood_scalars(region_inputs, targets, li: LocalInducing, qw: ProjectionPosterior,
                       params: RegionParams) -> dict:
    """Per-point V1, T2, E_f and quad; targets are centered by params.mean here."""
    X = _t(np.atleast_2d(region_inputs))
    m, v = projected_moments_t(X, _t(qw.mean), _t(qw.var))
    Z = _t(li.inputs)
    a = _t(params.amplitude)
    with torch.no_grad():
        out = _scalars_t(
            m, v, Z, a, _t(li.post_mean), _t(li.post_root),
            proj.cholesky_jitter(unit_kernel_t(Z, Z)),
            _t(np.asarray(targets, dtype=float)) - params.mean, _t(params.noise_variance),
        )
    return {k: t.numpy() for k, t in out.items()}


def _scalars_t(m, v, Z, a, mu_r, U, L, y_c, noise_var):
    P1 = psi1_t(m, v, Z, a)                                   # (..., n, L1)
    P2 = psi2_t(m, v, Z, a)                                   # (..., n, L1, L1)
    Kinv = torch.cholesky_inverse(L)                          # (..., L1, L1)
    S = U.transpose(-1, -2) @ U
    E = mu_r[..., :, None] * mu_r[..., None, :] + S
    B = Kinv @ E @ Kinv
    V1 = (a * a)[..., None] - (P2 * Kinv[..., None, :, :]).sum((-1, -2))
    T2 = (P2 * B[..., None, :, :]).sum((-1, -2))
    Ef = (P1 @ (Kinv @ mu_r[..., None]))[..., 0]
    quad = (y_c * y_c - 2.0 * y_c * Ef + V1 + T2) / (2.0 * noise_var[..., None])
    return {"V1": V1, "T2": T2, "E_f": Ef, "quad": quad}


# --- batched state <-> tensors ----------------------------------------------------

PARAM_NAMES = (
    "mu_r", "U", "R_mean", "R_logvar", "x_tilde",
    "nu", "log_u", "log_noise", "mean", "log_a", "log_s", "log_lw",
)


class _Batch:
    """Constant tensors of a state: centered local inputs, targets and fixed inducing inputs."""

    def __init__(self, state: VariationalState):
        regs = state.regions
        self.J = len(regs)
        if self.J:
            self.X = _t(np.stack([r.region.centered() for r in regs]))
            self.Y = _t(np.stack([r.region.targets for r in regs]))
            self.x_star = _t(np.stack([r.region.x_star for r in regs]))
            self.Z = _t(np.stack([r.inducing.inputs for r in regs]))
            self.L = proj.cholesky_jitter(unit_kernel_t(self.Z, self.Z))
            self.Kinv = torch.cholesky_inverse(self.L)
        self.nodes, self.weights = hermgauss_t(state.config.n_q)


def pack_state(state: VariationalState) -> dict:
    g, tw = state.global_inducing, state.theta_w
    regs = state.regions
    p = {
        "R_mean": _t(g.post_mean),
        "R_logvar": _t(np.log(g.post_var)),
        "x_tilde": _t(g.inputs),
        "log_s": _t(math.log(tw.signal_std)),
        "log_lw": _t(np.log(tw.row_lengthscales)),
    }
    if regs:
        p.update({
            "mu_r": _t(np.stack([r.inducing.post_mean for r in regs])),
            "U": _t(np.stack([r.inducing.post_root for r in regs])),
            "nu": _t(np.stack([r.params.boundary for r in regs])),
            "log_u": _t([math.log(r.params.outlier_level) for r in regs]),
            "log_noise": _t([math.log(r.params.noise_variance) for r in regs]),
            "mean": _t([r.params.mean for r in regs]),
            "log_a": _t([math.log(r.params.amplitude) for r in regs]),
        })
    return p


def unpack_state(state: VariationalState, p: dict, rho=None) -> VariationalState:
    d = {k: v.detach().numpy().copy() for k, v in p.items()}
    g = GlobalInducing(d["x_tilde"], d["R_mean"], np.exp(d["R_logvar"]))
    tw = ThetaW(float(np.exp(d["log_s"])), np.exp(d["log_lw"]))
    regions = []
    for j, r in enumerate(state.regions):
        li = LocalInducing(r.inducing.inputs, d["mu_r"][j], d["U"][j])
        rj = r.params.rho if rho is None else rho[j]
        params = RegionParams(
            d["nu"][j], float(np.exp(d["log_noise"][j])), float(d["mean"][j]),
            float(np.exp(d["log_a"][j])), float(np.exp(d["log_u"][j])), rj,
        )
        regions.append(RegionState(r.region, li, params))
    return replace(state, global_inducing=g, theta_w=tw, regions=regions)


def elbo_terms(p: dict, batch: _Batch):
    """ELBO and per-point (T1, T2) from packed tensors."""
    x_tilde, R_mean, R_var = p["x_tilde"], p["R_mean"], torch.exp(p["R_logvar"])
    s, lw = torch.exp(p["log_s"]), torch.exp(p["log_lw"])
    kl_g = proj.kl_global_t(x_tilde, R_mean, R_var, s, lw)
    if batch.J == 0:
        return -kl_g, None, None
    W_mean, W_var = proj.qw_moments_t(x_tilde, R_mean, R_var, s, lw, batch.x_star)
    m, v = projected_moments_t(batch.X, W_mean, W_var)
    a = torch.exp(p["log_a"]).clamp_min(AMPLITUDE_FLOOR)
    noise_var = torch.exp(p["log_noise"])
    U = torch.triu(p["U"])
    y_c = batch.Y - p["mean"][:, None]
    sc = _scalars_t(m, v, batch.Z, a, p["mu_r"], U, batch.L, y_c, noise_var)
    mu_z, sd_z = boundary_moments_t(m, v, p["nu"])
    e_pos, e_neg = expected_log_sigmoid_t(mu_z, sd_z, batch.nodes, batch.weights)
    T1 = -0.5 * (LOG_2PI + torch.log(noise_var))[:, None] - sc["quad"] + e_pos
    T2 = -p["log_u"][:, None] + e_neg
    kl_l = gauss_kl_t(p["mu_r"], U, batch.L)
    val = torch.logaddexp(T1, T2).sum() - kl_l.sum() - kl_g
    return val, T1, T2


def elbo(state: VariationalState) -> float:
    batch = _Batch(state)
    with torch.no_grad():
        val, _, _ = elbo_terms(pack_state(state), batch)
    return float(val)


def elbo_and_grad(state: VariationalState) -> tuple[float, dict]:
    """ELBO and its gradient with respect to every unconstrained parameter."""
    batch = _Batch(state)
    p = {k: v.clone().requires_grad_(True) for k, v in pack_state(state).items()}
    val, _, _ = elbo_terms(p, batch)
    val.backward()
    return float(val.detach()), {k: v.grad.numpy().copy() for k, v in p.items()}


def rho_from(T1, T2) -> np.ndarray:
    return torch.sigmoid(T1 - T2).detach().numpy()


# --- initialization -------------------------------------------------------------

def init_state(
    regions: list,
    K: int,
    L1: int,
    L2: int,
    rng: np.random.Generator,
    config: TrainConfig = TrainConfig(),
    pool_inputs: np.ndarray | None = None,
) -> VariationalState:
    """Starting point for training.

    ``pool_inputs`` (training inputs) place the global inducing inputs; the
    test locations are used when it is omitted.
    """
    if K < 1 or L1 < 1 or L2 < 1:
        raise InputError("K, L1 and L2 must be positive")
    if not regions:
        raise InputError("need at least one region")
    D = regions[0].x_star.shape[0]
    X_star = np.stack([r.x_star for r in regions])
    pool = X_star if pool_inputs is None else np.asarray(pool_inputs, dtype=float)
    from djgp.dataset import Dataset

    g = proj.init_global_inducing(Dataset(pool, np.zeros(pool.shape[0])), L2, rng, K)
    if X_star.shape[0] > 1:
        d = np.sqrt(((X_star[:, None, :] - X_star[None, :, :]) ** 2).sum(-1))
        med = float(np.median(d[np.triu_indices(X_star.shape[0], 1)]))
    else:
        med = 1.0
    tw = ThetaW(1.0, np.full(K, med if med > 0 else 1.0))
    states = []
    for reg in regions:
        if reg.x_star.shape[0] != D:
            raise InputError("regions disagree on the input dimension")
        y = reg.targets
        order = np.argsort(np.sum(reg.centered() ** 2, axis=1), kind="stable")
        near = y[order[: math.ceil(reg.n / 2)]]
        var = max(float(np.var(near)), 1e-6)
        Z = rng.standard_normal((L1, K))
        Kr = unit_kernel_t(_t(Z), _t(Z)).numpy()
        Lr = np.linalg.cholesky(Kr + 1e-6 * np.eye(L1))
        Uroot = np.triu(Lr.T + 0.01 * rng.standard_normal((L1, L1)))
        li = LocalInducing(Z, 0.1 * rng.standard_normal(L1), Uroot)
        nu = np.zeros(K + 1)
        nu[0] = 0.1
        params = RegionParams(
            nu, 0.1 * var, float(np.mean(near)), math.sqrt(0.9 * var),
            max(float(np.ptp(y)), 1e-6), np.full(reg.n, 0.5),
        )
        states.append(RegionState(reg, li, params))
    return VariationalState(g, tw, states, config)


# --- trainer --------------------------------------------------------------------

@dataclass
class TrainResult:
    state: VariationalState
    trace: list          # (step, elbo) of accepted iterates, best-so-far monotone
    initial_elbo: float
    best_elbo: float
    steps_taken: int


def train(state: VariationalState, steps: int | None = None, rate: float | None = None,
          progress=None) -> TrainResult:
    """Gradient ascent on the ELBO with reject-and-halve steps and restore-best.

    After an accepted step the rate grows by 10% back toward its starting
    value.  rho is set to its closed-form optimum from the returned state.
    ``progress`` receives (step, elbo, rate) once per step.
    """
    cfg = state.config
    steps = cfg.steps if steps is None else steps
    base_rate = cfg.rate if rate is None else rate
    if steps < 0 or base_rate < 0:
        raise InputError("steps and rate must be nonnegative")
    batch = _Batch(state)
    frozen = set()
    if not cfg.train_outlier_level:
        frozen.add("log_u")
    params = {k: v.clone().requires_grad_(k not in frozen) for k, v in pack_state(state).items()}

    def evaluate(p):
        for t in p.values():
            t.grad = None
        val, T1, T2 = elbo_terms(p, batch)
        if not torch.isfinite(val):
            return val.detach(), None, None, False
        val.backward()
        ok = all(t.grad is None or bool(torch.isfinite(t.grad).all()) for t in p.values())
        return val.detach(), T1.detach(), T2.detach(), ok

    try:
        val, T1, T2, ok = evaluate(params)
    except NumericalError as exc:
        raise NumericalError(f"step 0: {exc}", step=0) from exc
    if not ok:
        raise NumericalError("step 0: non-finite ELBO or gradient", step=0)
    init_val = best = float(val)
    best_params = {k: v.detach().clone() for k, v in params.items()}
    best_T = (T1, T2)
    trace = [(0, best)]
    cur_rate = base_rate
    quiet = 0
    taken = 0
    for step in range(1, steps + 1):
        if cur_rate <= 0:
            break
        taken = step
        with torch.no_grad():
            cand = {
                k: (v + cur_rate * v.grad if v.grad is not None else v.detach().clone())
                for k, v in params.items()
            }
        cand = {k: v.detach().requires_grad_(k not in frozen) for k, v in cand.items()}
        try:
            cval, cT1, cT2, cok = evaluate(cand)
        except NumericalError:
            cok = False
        if cok and float(cval) >= best:
            rel = (float(cval) - best) / max(abs(best), 1e-300)
            params, best = cand, float(cval)
            best_params = {k: v.detach().clone() for k, v in params.items()}
            best_T = (cT1, cT2)
            cur_rate = min(cur_rate * 1.1, base_rate)
            quiet = quiet + 1 if rel < cfg.rel_tol else 0
        else:
            cur_rate *= 0.5
            quiet = quiet + 1 if cur_rate < 1e-12 * max(base_rate, 1e-300) else 0
        trace.append((step, best))
        if progress is not None:
            progress(step, best, cur_rate)
        log.debug("step %d elbo %.10g rate %.3g", step, best, cur_rate)
        if quiet >= cfg.patience:
            break
    rho = rho_from(*best_T) if best_T[0] is not None else None
    out = unpack_state(state, best_params, rho)
    return TrainResult(out, trace, init_val, best, taken)
