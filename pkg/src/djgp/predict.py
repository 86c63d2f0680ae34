"""Two-stage Monte-Carlo prediction: sample a projection, refit a Jump GP in the projected space, aggregate.

Random streams are keyed by (seed, region, sample, attempt), so serial and
parallel schedules draw the same projections.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from djgp.errors import DjgpError, InputError, NumericalError
from djgp.jump import JgpConfig, LocalRegion, fit_jgp, jgp_predict
from djgp.projection import ProjectionPosterior, qw_moments, sample_w

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: float
    variance: float
    per_sample: list = field(default_factory=list)


def aggregate(per_sample) -> PredictiveDistribution:
    """Mixture moments: mean of means; mean of within-sample variances plus the spread of means."""
    if not per_sample:
        raise InputError("nothing to aggregate")
    m = np.array([s[0] for s in per_sample], dtype=float)
    v = np.array([s[1] for s in per_sample], dtype=float)
    mu = float(m.mean())
    var = float(np.mean(v + (m - mu) ** 2))
    return PredictiveDistribution(mu, var, [(float(a), float(b)) for a, b in per_sample])


def project_region(region: LocalRegion, W: np.ndarray) -> LocalRegion:
    """Neighborhood in the projected space; the test point maps to the origin."""
    Z = region.centered() @ W.T
    return LocalRegion(np.zeros(W.shape[0]), Z, region.targets, region.indices)


def predict_region(
    region: LocalRegion,
    qw: ProjectionPosterior,
    Mc: int,
    seed: int,
    j: int,
    config: JgpConfig = JgpConfig(),
) -> PredictiveDistribution:
    """Monte-Carlo prediction for one region given its projection posterior."""
    if Mc < 1:
        raise InputError("Mc must be at least 1")
    out = []
    for m in range(Mc):
        for attempt in range(2):
            rng = np.random.default_rng([seed, j, m, attempt])
            W = sample_w(qw, rng)
            try:
                pr = project_region(region, W)
                out.append(jgp_predict(fit_jgp(pr, config), pr))
                break
            except (DjgpError, np.linalg.LinAlgError, FloatingPointError) as exc:
                if attempt == 0:
                    log.warning("region %d sample %d failed (%s); redrawing", j, m, exc)
                else:
                    log.warning("region %d sample %d failed again; skipped", j, m)
    if not out:
        raise NumericalError(f"region {j}: all {Mc} samples failed", region=j)
    return aggregate(out)


def djgp_predict_one(state, j: int, Mc: int = 5, seed: int = 0,
                     config: JgpConfig = JgpConfig()) -> PredictiveDistribution:
    if not 0 <= j < len(state.regions):
        raise InputError(f"region index {j} out of range")
    reg = state.regions[j].region
    qw = qw_moments(state.global_inducing, state.theta_w, reg.x_star)
    return predict_region(reg, qw, Mc, seed, j, config)


def _task(args):
    j, region, qw, Mc, seed, config = args
    try:
        return j, predict_region(region, qw, Mc, seed, j, config), None
    except DjgpError as exc:
        return j, None, str(exc)


def djgp_predict_all(state, Mc: int = 5, seed: int = 0, workers: int = 1,
                     config: JgpConfig = JgpConfig()) -> list[PredictiveDistribution]:
    """Predictions for every region in order; failures are collected and reported together."""
    if not state.regions:
        raise InputError("state has no regions")
    tasks = []
    for j, r in enumerate(state.regions):
        qw = qw_moments(state.global_inducing, state.theta_w, r.region.x_star)
        tasks.append((j, r.region, qw, Mc, seed, config))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_task(t) for t in tasks]
    errors = [f"region {j}: {msg}" for j, _, msg in results if msg is not None]
    if errors:
        raise NumericalError("; ".join(errors), regions=[j for j, _, m in results if m])
    return [p for _, p, _ in results]
