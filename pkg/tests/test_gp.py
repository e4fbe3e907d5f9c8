import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskmpc.errors import ContractViolation, NumericalError
from riskmpc.gp import (
    GpHyperparams,
    GpSurrogate,
    fit,
    kernel,
    kernel_matrix,
    lml_and_grad,
    log_marginal_likelihood,
    model_from_dict,
    optimize_hyperparams,
    predict,
)


def raw_hyper(d, sf=1.3, noise=0.05, seed=0):
    ls = np.random.default_rng(seed).uniform(0.5, 2.0, size=d)
    return GpHyperparams(sf, ls, noise)


def k_naive(a, b, h):
    s = 0.0
    for i in range(len(a)):
        s += ((a[i] - b[i]) / h.length_scales[i]) ** 2
    return h.signal_var * np.exp(-0.5 * s)


def test_kernel_examples():
    h = GpHyperparams(1.0, [1.0], 0.1)
    assert kernel([0.3], [0.3], h) == 1.0
    assert kernel([0.0], [np.sqrt(2.0)], h) == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert kernel([0.0], [np.sqrt(2.0)], h) == pytest.approx(0.367879, abs=1e-6)


def test_kernel_symmetry():
    rng = np.random.default_rng(0)
    h = raw_hyper(4)
    for _ in range(1000):
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert abs(kernel(a, b, h) - kernel(b, a, h)) <= 1e-15


def test_kernel_dimension_check():
    with pytest.raises(ContractViolation):
        kernel([0.0, 1.0], [0.0], GpHyperparams(1.0, [1.0], 0.1))


def test_kernel_matrix_is_psd():
    rng = np.random.default_rng(1)
    for n in (5, 50, 200):
        x = rng.normal(size=(n, 3))
        k = kernel_matrix(x, x, raw_hyper(3))
        assert np.min(np.linalg.eigvalsh(k)) >= -1e-8


def test_fit_scalar_alpha():
    m = fit([[0.0]], [2.0], GpHyperparams(1.0, [1.0], 0.1), standardize=False)
    assert m.alpha_vec[0] == pytest.approx(2.0 / 1.1, abs=1e-15)


def test_fit_matches_inverse_oracle():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(3, 2)), rng.normal(size=3)
    h = raw_hyper(2)
    m = fit(x, y, h, standardize=False)
    k = np.array([[k_naive(a, b, h) for b in x] for a in x]) + h.noise_var * np.eye(3)
    assert np.max(np.abs(m.alpha_vec - np.linalg.inv(k) @ y)) <= 1e-10
    lower = m.chol_factor
    assert np.max(np.abs(lower @ lower.T - k)) <= 1e-8 * np.max(np.abs(k))


def test_refit_bit_identical():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(20, 3)), rng.normal(size=20)
    a, b = fit(x, y, raw_hyper(3)), fit(x, y, raw_hyper(3))
    assert a.chol_factor.tobytes() == b.chol_factor.tobytes()


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_predict_matches_direct_inverse(n):
    rng = np.random.default_rng(10 + n)
    x, y = rng.normal(size=(n, 3)), rng.normal(size=n)
    h = raw_hyper(3, seed=n)
    m = fit(x, y, h, standardize=False)
    k_inv = np.linalg.inv(np.array([[k_naive(a, b, h) for b in x] for a in x]) + h.noise_var * np.eye(n))
    for q in rng.normal(size=(5, 3)):
        ks = np.array([k_naive(a, q, h) for a in x])
        mu, var = predict(m, q)
        assert abs(mu - ks @ k_inv @ y) <= 1e-10
        assert abs(var - (h.signal_var - ks @ k_inv @ ks)) <= 1e-10


def test_predict_two_point_closed_form():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(2, 2)), rng.normal(size=2)
    h = raw_hyper(2, seed=7)
    m = fit(x, y, h, standardize=False)
    a = h.signal_var + h.noise_var
    c = k_naive(x[0], x[1], h)
    det = a * a - c * c
    inv = np.array([[a, -c], [-c, a]]) / det
    q = rng.normal(size=2)
    ks = np.array([k_naive(x[0], q, h), k_naive(x[1], q, h)])
    mu, var = predict(m, q)
    assert abs(mu - ks @ inv @ y) <= 1e-10
    assert abs(var - (h.signal_var - ks @ inv @ ks)) <= 1e-10


def test_noiseless_interpolation():
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(4, 2)), rng.normal(size=4)
    m = fit(x, y, GpHyperparams(1.0, [1.0, 1.0], 1e-12), standardize=False)
    mu, var = predict(m, x[0])
    assert abs(mu - y[0]) <= 1e-4 and var <= 1e-6


def test_prior_reversion():
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=6)
    h = GpHyperparams(2.5, [0.5, 0.5], 0.01)
    m = fit(x, y, h)
    mu, var = predict(m, np.array([1e3, -1e3]))
    assert abs(mu) <= 1e-6 and abs(var - 2.5) <= 1e-6


def test_variance_bounds_and_monotone():
    rng = np.random.default_rng(11)
    x, y = rng.normal(size=(30, 3)), rng.normal(size=30)
    h = raw_hyper(3)
    m = fit(x, y, h, standardize=False)
    q = rng.normal(size=(10_000, 3)) * 2
    _, var = predict(m, q)
    assert np.all(var >= 0) and np.all(var <= h.signal_var + h.noise_var)
    m2 = fit(np.vstack([x, rng.normal(size=(1, 3))]), np.append(y, 0.3), h, standardize=False)
    _, v1 = predict(m, q[:100])
    _, v2 = predict(m2, q[:100])
    assert np.all(v2 <= v1 + 1e-12)


def test_singular_kernel_raises():
    x = np.zeros((5, 1))
    with pytest.raises(NumericalError, match="numerically singular"):
        fit(x, np.arange(5.0), GpHyperparams(1e12, [1.0], 1e-300), standardize=False)


def test_lml_single_zero_target():
    h = GpHyperparams(1.7, [1.0], 0.2)
    m = fit([[0.0]], [0.0], h, standardize=False)
    assert log_marginal_likelihood(m) == pytest.approx(-0.5 * np.log(1.9) - 0.5 * np.log(2 * np.pi), abs=1e-14)


def test_lml_matches_dense_formula():
    rng = np.random.default_rng(12)
    x, y = rng.normal(size=(8, 2)), rng.normal(size=8)
    h = raw_hyper(2)
    m = fit(x, y, h, standardize=False)
    k = kernel_matrix(x, x, h) + h.noise_var * np.eye(8)
    _, logdet = np.linalg.slogdet(k)
    ref = -0.5 * y @ np.linalg.solve(k, y) - 0.5 * logdet - 4 * np.log(2 * np.pi)
    assert log_marginal_likelihood(m) == pytest.approx(ref, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_lml_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=5)
    theta = np.concatenate([[rng.uniform(-1, 1)], rng.uniform(-0.5, 1, 3), [rng.uniform(-4, -1)]])
    _, g = lml_and_grad(theta, x, y)
    h = 1e-5
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (lml_and_grad(tp, x, y)[0] - lml_and_grad(tm, x, y)[0]) / (2 * h)
        assert abs(g[i] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_optimize_improves_on_every_init():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(40, 2))
    y = np.sin(2 * x[:, 0]) + 0.05 * rng.normal(size=40)
    res = optimize_hyperparams(x, y, restarts=5, max_iter=200, rng=np.random.default_rng(0))
    assert not res.fell_back
    assert all(res.lml >= v - 1e-9 for v in res.init_lml)
    # the irrelevant dimension ends up with the longer length scale
    assert res.hyper.length_scales[1] > res.hyper.length_scales[0]


def test_optimize_needs_two_points():
    with pytest.raises(ContractViolation):
        optimize_hyperparams([[0.0]], [1.0])


def test_snapshot_roundtrip():
    rng = np.random.default_rng(14)
    m = fit(rng.normal(size=(10, 3)), rng.normal(size=10), raw_hyper(3))
    m2 = model_from_dict(json.loads(json.dumps(m.to_dict())))
    q = rng.normal(size=(4, 3))
    assert np.array_equal(predict(m, q)[0], predict(m2, q)[0])


def test_surrogate_fifo_and_regrow():
    s = GpSurrogate(2, capacity=20, restarts=1, max_iter=20, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    s.add(rng.normal(size=(10, 2)), rng.normal(size=10))
    s.refit()
    assert s.n_at_last_opt == 10
    s.add(rng.normal(size=(2, 2)), rng.normal(size=2))
    s.refit()
    assert s.n_at_last_opt == 10  # grew by 20% < 25%
    s.add(rng.normal(size=(20, 2)), rng.normal(size=20))
    assert s.y.size == 20
    s.refit()
    assert s.n_at_last_opt == 20 and s.model.n == 20
