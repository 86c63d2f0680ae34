"""Shared builders for small random variational states."""

import numpy as np
import torch

from djgp.elbo import (
    LocalInducing, RegionParams, RegionState, TrainConfig, VariationalState, _Batch,
    elbo_terms, pack_state,
)
from djgp.jump import LocalRegion
from djgp.projection import GlobalInducing, ThetaW


def random_state(seed, J=2, n=5, L1=2, L2=3, K=2, D=3, config=TrainConfig()):
    rng = np.random.default_rng(seed)
    g = GlobalInducing(rng.normal(size=(L2, D)), rng.normal(size=(L2, K, D)) * 0.5,
                       rng.uniform(0.1, 0.5, size=(L2, K, D)))
    tw = ThetaW(rng.uniform(0.6, 1.2), rng.uniform(1.0, 2.0, K))
    regions = []
    for _ in range(J):
        x_star = rng.normal(size=D)
        region = LocalRegion(x_star, x_star + 0.5 * rng.normal(size=(n, D)), rng.normal(size=n))
        li = LocalInducing(rng.normal(size=(L1, K)), rng.normal(size=L1),
                           np.triu(rng.normal(size=(L1, L1)) * 0.3) + np.eye(L1) * 0.5)
        params = RegionParams(rng.normal(size=K + 1), rng.uniform(0.2, 1.0), rng.normal(),
                              rng.uniform(0.5, 1.5), rng.uniform(1.0, 3.0), np.full(n, 0.5))
        regions.append(RegionState(region, li, params))
    return VariationalState(g, tw, regions, config)


def finite_difference_check(state, eps=1e-5):
    """Largest violation of |fd - g| <= max(1e-4 |fd|, 1e-7) over all parameters, and the count."""
    from djgp.elbo import elbo_and_grad

    _, grads = elbo_and_grad(state)
    batch = _Batch(state)
    base = pack_state(state)
    worst = 0.0
    count = 0
    with torch.no_grad():
        for name, tensor in base.items():
            flat = tensor.reshape(-1)
            for idx in range(flat.numel()):
                vals = []
                for sign in (1.0, -1.0):
                    p = {k: v.clone() for k, v in base.items()}
                    p[name].reshape(-1)[idx] += sign * eps
                    vals.append(float(elbo_terms(p, batch)[0]))
                fd = (vals[0] - vals[1]) / (2 * eps)
                g = float(np.asarray(grads[name]).reshape(-1)[idx])
                tol = max(1e-4 * abs(fd), 1e-7)
                worst = max(worst, abs(fd - g) / tol)
                count += 1
    return worst, count
