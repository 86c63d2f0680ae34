import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from djgp.dataset import Dataset
from djgp.errors import InputError
from djgp.gp import (
    GpHyper, default_hyper, fit, gp_predict, gp_predict_many, lml_and_grad,
    log_marginal_likelihood, make_fit, pack, unpack,
)
from djgp.kernels import SeParams


def dense_cov(X, h):
    n = X.shape[0]
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            d = (X[i] - X[j]) / h.kernel.lengthscales
            K[i, j] = h.kernel.signal_variance * math.exp(-0.5 * d @ d)
    return K


def lml_oracle(X, y, h):
    A = dense_cov(X, h) + h.noise_variance * np.eye(len(y))
    r = y - h.mean
    _, logdet = np.linalg.slogdet(A)
    return -0.5 * r @ np.linalg.inv(A) @ r - 0.5 * logdet - 0.5 * len(y) * math.log(2 * math.pi)


def random_instance(seed, n=3, D=2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, D))
    y = rng.normal(size=n)
    h = GpHyper(rng.normal(), rng.uniform(0.1, 1), SeParams(rng.uniform(0.5, 2), rng.uniform(0.5, 2, D)))
    return X, y, h


def test_lml_scalar():
    h = GpHyper(0.3, 0.25, SeParams(0.75, [1.0]))
    v = log_marginal_likelihood(Dataset([[0.0]], [0.3]), h)
    assert v == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert v == pytest.approx(-0.91894, abs=1e-5)


def test_lml_degenerate_kernel():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(6, 2)), rng.normal(size=6)
    h = GpHyper(0.0, 1.0, SeParams(1e-300, [1.0, 1.0]))
    expect = np.sum(-0.5 * y**2 - 0.5 * math.log(2 * math.pi))
    assert log_marginal_likelihood(Dataset(X, y), h) == pytest.approx(expect, abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_lml_dense_oracle(seed):
    X, y, h = random_instance(seed)
    assert log_marginal_likelihood(Dataset(X, y), h) == pytest.approx(lml_oracle(X, y, h), abs=1e-8)


def test_lml_permutation_invariant():
    X, y, h = random_instance(7, n=12)
    p = np.random.default_rng(1).permutation(12)
    a = log_marginal_likelihood(Dataset(X, y), h)
    b = log_marginal_likelihood(Dataset(X[p], y[p]), h)
    assert abs(a - b) < 1e-10


def test_dimension_mismatch():
    X, y, h = random_instance(0, D=3)
    with pytest.raises(InputError):
        log_marginal_likelihood(Dataset(X[:, :2], y), h)


def test_pack_roundtrip():
    h = GpHyper(0.2, 0.3, SeParams(1.5, [0.4, 2.0]))
    g = unpack(pack(h))
    assert g.mean == h.mean
    assert g.noise_variance == pytest.approx(h.noise_variance, rel=1e-15)
    np.testing.assert_allclose(g.kernel.lengthscales, h.kernel.lengthscales, rtol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    n, D = int(rng.integers(2, 21)), int(rng.integers(1, 4))
    X, y, h = random_instance(100 + seed, n=n, D=D)
    theta = pack(h)
    _, g = lml_and_grad(theta, X, y)
    eps = 1e-5
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        fd = (lml_and_grad(theta + e, X, y)[0] - lml_and_grad(theta - e, X, y)[0]) / (2 * eps)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), 1e-2)


def test_default_hyper():
    X = np.array([[0.0, 1.0], [2.0, 1.0], [4.0, 1.0]])
    y = np.array([1.0, 2.0, 3.0])
    h = default_hyper(X, y)
    assert h.mean == 2.0
    assert h.noise_variance == pytest.approx(0.1 * np.var(y))
    assert h.kernel.signal_variance == pytest.approx(0.9 * np.var(y))
    np.testing.assert_allclose(h.kernel.lengthscales, [np.std(X[:, 0]), 1.0])


def test_fit_zero_steps_returns_init():
    X, y, h = random_instance(3, n=8)
    f = fit(Dataset(X, y), h, steps=0)
    assert f.hyper.mean == h.mean
    np.testing.assert_allclose(pack(f.hyper), pack(h), rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_fit_monotone(seed):
    X, y, h = random_instance(seed, n=15)
    d = Dataset(X, y)
    f = fit(d, h, steps=100)
    assert log_marginal_likelihood(d, f.hyper) >= log_marginal_likelihood(d, h)


def test_fit_constant_targets():
    X = np.linspace(0, 1, 10)[:, None]
    d = Dataset(X, np.full(10, 3.0))
    f = fit(d, GpHyper(2.5, 0.1, SeParams(0.5, [0.3])), steps=300)
    assert f.hyper.mean == pytest.approx(3.0, abs=1e-3)
    assert f.hyper.kernel.signal_variance < 0.5


def test_fit_recovers_lengthscale():
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-3, 3, size=(200, 1))
        true = GpHyper(0.0, 0.01, SeParams(1.0, [0.7]))
        C = dense_cov(X, true) + 0.01 * np.eye(200)
        y = np.linalg.cholesky(C) @ rng.normal(size=200)
        f = fit(Dataset(X, y), steps=300, rate=0.01)
        errs.append(abs(f.hyper.kernel.lengthscales[0] - 0.7) / 0.7)
    assert np.median(errs) < 0.5


def test_chol_factor_reconstructs():
    X, y, h = random_instance(2, n=10)
    f = make_fit(Dataset(X, y), h)
    A = dense_cov(X, h) + (h.noise_variance + f.jitter) * np.eye(10)
    assert np.max(np.abs(f.chol_factor @ f.chol_factor.T - A)) < 1e-8


def test_predict_interpolates():
    X = np.array([[0.0], [1.0], [2.5]])
    y = np.array([1.0, -2.0, 0.5])
    f = make_fit(Dataset(X, y), GpHyper(0.0, 1e-10, SeParams(1.0, [1.0])))
    m, v = gp_predict(f, [1.0])
    assert m == pytest.approx(-2.0, abs=1e-4)
    assert v >= 0


def test_predict_prior_reversion():
    X = np.array([[0.0], [1.0]])
    f = make_fit(Dataset(X, [1.0, 2.0]), GpHyper(0.7, 0.1, SeParams(1.3, [0.5])))
    m, v = gp_predict(f, [100.0])
    assert m == pytest.approx(0.7, abs=1e-12)
    assert v == pytest.approx(1.3, abs=1e-12)


def test_predict_dense_oracle():
    X, y, h = random_instance(11, n=2)
    f = make_fit(Dataset(X, y), h)
    xs = np.array([0.3, -0.2])
    c = np.array([h.kernel.signal_variance * math.exp(-0.5 * np.sum(((xs - x) / h.kernel.lengthscales) ** 2)) for x in X])
    Ainv = np.linalg.inv(dense_cov(X, h) + h.noise_variance * np.eye(2))
    m, v = gp_predict(f, xs)
    assert m == pytest.approx(h.mean + c @ Ainv @ (y - h.mean), abs=1e-10)
    assert v == pytest.approx(h.kernel.signal_variance - c @ Ainv @ c, abs=1e-10)


def test_predict_dimension_check():
    X, y, h = random_instance(0)
    with pytest.raises(InputError):
        gp_predict(make_fit(Dataset(X, y), h), [1.0, 2.0, 3.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_predictive_variance_bounded(seed):
    X, y, h = random_instance(seed, n=6)
    f = make_fit(Dataset(X, y), h)
    Xs = np.random.default_rng(seed).normal(size=(10, 2)) * 2
    _, v = gp_predict_many(f, Xs)
    assert np.all(v >= 0)
    assert np.all(v <= h.kernel.signal_variance + 1e-10)
