import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from djgp.dataset import Dataset
from djgp.errors import InputError
from djgp.projection import (
    GlobalInducing, ProjectionPosterior, ThetaW, init_global_inducing, kl_global,
    qw_moments, sample_w,
)


def k_rr(X, s, l):
    d2 = np.sum((X[:, None] - X[None]) ** 2, axis=-1)
    return s * s * np.exp(-0.5 * d2 / l**2)


def gauss_kl_dense(mu, S, K):
    n = len(mu)
    Ki = np.linalg.inv(K)
    return 0.5 * (np.trace(Ki @ S) + mu @ Ki @ mu - n
                  + np.linalg.slogdet(K)[1] - np.linalg.slogdet(S)[1])


def random_inducing(seed, L2=4, K=2, D=3):
    rng = np.random.default_rng(seed)
    g = GlobalInducing(rng.normal(size=(L2, D)), rng.normal(size=(L2, K, D)),
                       rng.uniform(0.05, 0.5, size=(L2, K, D)))
    return g, ThetaW(rng.uniform(0.5, 1.5), rng.uniform(0.8, 2.0, K))


def test_validation():
    with pytest.raises(InputError):
        GlobalInducing(np.zeros((2, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1, 1)))
    with pytest.raises(InputError):
        ThetaW(1.0, [1.0, -1.0])
    g, tw = random_inducing(0)
    with pytest.raises(InputError):
        qw_moments(g, ThetaW(1.0, [1.0]), np.zeros(3))
    with pytest.raises(InputError):
        qw_moments(g, tw, np.zeros(2))


def test_interpolation_at_inducing_site():
    g, tw = random_inducing(1, L2=3)
    g = GlobalInducing(g.inputs * 3, g.post_mean, np.full(g.post_var.shape, 1e-12))
    p = qw_moments(g, tw, g.inputs[0])
    np.testing.assert_allclose(p.mean, g.post_mean[0], atol=1e-6)
    np.testing.assert_allclose(p.var, 0.0, atol=1e-6)


def test_prior_reversion():
    g, tw = random_inducing(2)
    p = qw_moments(g, tw, np.full(3, 1e3))
    np.testing.assert_allclose(p.mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(p.var, tw.signal_std**2, rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_qw_dense_oracle(seed):
    g, tw = random_inducing(seed)
    x = np.random.default_rng(seed).normal(size=3)
    p = qw_moments(g, tw, x)
    for k in range(2):
        l = tw.row_lengthscales[k]
        Kr = k_rr(g.inputs, tw.signal_std, l)
        kj = tw.signal_std**2 * np.exp(-0.5 * np.sum((g.inputs - x) ** 2, axis=1) / l**2)
        a = np.linalg.solve(Kr, kj)
        for d in range(3):
            m = a @ g.post_mean[:, k, d]
            v = tw.signal_std**2 - a @ kj + a @ np.diag(g.post_var[:, k, d]) @ a
            assert p.mean[k, d] == pytest.approx(m, abs=1e-10)
            assert p.var[k, d] == pytest.approx(v, abs=1e-10)


def test_prior_consistency():
    """q(R) equal to the prior at the sites recovers the prior at any x*.

    Only the marginal variances are held, so the check uses one inducing point.
    """
    tw = ThetaW(1.3, [0.7])
    g = GlobalInducing([[0.2, -0.1]], np.zeros((1, 1, 2)), np.full((1, 1, 2), 1.69))
    for x in ([0.0, 0.0], [1.0, 2.0], [-3.0, 0.5]):
        p = qw_moments(g, tw, x)
        np.testing.assert_allclose(p.mean, 0.0, atol=1e-12)
        np.testing.assert_allclose(p.var, 1.69, atol=1e-8)


def test_two_stage_sampling_small():
    rng = np.random.default_rng(5)
    g = GlobalInducing(rng.normal(size=(3, 1)), rng.normal(size=(3, 1, 1)),
                       rng.uniform(0.1, 0.4, size=(3, 1, 1)))
    tw = ThetaW(1.0, [1.2])
    x = np.array([0.4])
    p = qw_moments(g, tw, x)
    M = 20000
    R = g.post_mean[:, 0, 0] + np.sqrt(g.post_var[:, 0, 0]) * rng.standard_normal((M, 3))
    Kr = k_rr(g.inputs, 1.0, 1.2)
    kj = np.exp(-0.5 * (g.inputs[:, 0] - x[0]) ** 2 / 1.44)
    a = np.linalg.solve(Kr, kj)
    w = R @ a + math.sqrt(1.0 - a @ kj) * rng.standard_normal(M)
    assert w.mean() == pytest.approx(p.mean[0, 0], abs=4 * math.sqrt(p.var[0, 0] / M))
    assert w.var() == pytest.approx(p.var[0, 0], rel=0.05)


def test_sample_w_properties():
    p = ProjectionPosterior(np.array([[0.5, -1.0]]), np.zeros((1, 2)))
    np.testing.assert_array_equal(sample_w(p, np.random.default_rng(0)), p.mean)
    q = ProjectionPosterior(np.array([[0.5]]), np.array([[0.3]]))
    a = sample_w(q, np.random.default_rng(9))
    b = sample_w(q, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    rng = np.random.default_rng(1)
    draws = np.array([sample_w(q, rng)[0, 0] for _ in range(100000)])
    assert abs(draws.mean() - 0.5) < 0.01
    assert abs(draws.var() - 0.3) < 0.01


def test_sample_moment_rate():
    q = ProjectionPosterior(np.array([[1.0]]), np.array([[2.0]]))
    for M in (10**4, 10**5):
        rng = np.random.default_rng(M)
        w = q.mean[0, 0] + np.sqrt(q.var[0, 0]) * rng.standard_normal(M)
        assert abs(w.mean() - 1.0) < 4 * math.sqrt(2.0 / M)


def test_kl_zero_when_q_equals_p():
    tw = ThetaW(0.8, [1.0, 2.0])
    g = GlobalInducing([[0.3, 0.1]], np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.64))
    assert abs(kl_global(g, tw)) < 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_kl_dense_oracle(seed):
    g, tw = random_inducing(seed, L2=4)
    expect = 0.0
    for k in range(2):
        Kr = k_rr(g.inputs, tw.signal_std, tw.row_lengthscales[k])
        for d in range(3):
            expect += gauss_kl_dense(g.post_mean[:, k, d], np.diag(g.post_var[:, k, d]), Kr)
    assert kl_global(g, tw) == pytest.approx(expect, abs=1e-8)


def test_kl_permutation_invariant():
    g, tw = random_inducing(3, L2=5)
    p = np.array([4, 2, 0, 1, 3])
    h = GlobalInducing(g.inputs[p], g.post_mean[p], g.post_var[p])
    assert abs(kl_global(g, tw) - kl_global(h, tw)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_kl_nonnegative(seed):
    g, tw = random_inducing(seed, L2=3)
    assert kl_global(g, tw) >= -1e-8


def test_init_global_inducing():
    d = Dataset(np.tile([1.0, -2.0], (5, 1)), np.zeros(5))
    g = init_global_inducing(d, 4, np.random.default_rng(0), K=2)
    np.testing.assert_array_equal(g.inputs, np.tile([1.0, -2.0], (4, 1)))
    assert g.post_mean.shape == (4, 2, 2)
    np.testing.assert_array_equal(g.post_var, 1.0)
    rng = np.random.default_rng(1)
    d = Dataset(rng.normal(size=(50, 2)) * [1.0, 3.0] + [5.0, 0.0], np.zeros(50))
    a = init_global_inducing(d, 3, np.random.default_rng(7))
    b = init_global_inducing(d, 3, np.random.default_rng(7))
    np.testing.assert_array_equal(a.inputs, b.inputs)
    pts = np.vstack([init_global_inducing(d, 1, np.random.default_rng(s)).inputs for s in range(1000)])
    se = d.X.std(axis=0) / math.sqrt(1000)
    assert np.all(np.abs(pts.mean(axis=0) - d.X.mean(axis=0)) < 3 * se)
    with pytest.raises(InputError):
        init_global_inducing(d, 0, rng)
