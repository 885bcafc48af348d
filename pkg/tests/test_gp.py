import math
import time

import numpy as np
import pytest
from conftest import fd_grad, random_instance, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from itemmetric.data import ItemFeatures
from itemmetric.exceptions import NumericalError
from itemmetric.gp import (
    JITTER_LADDER,
    GPState,
    InducingSet,
    choose_inducing,
    fitted_values,
    gram,
    kernel,
    nll,
    nll_dense,
    nll_grad,
    nystrom_grad,
    nystrom_nll,
    predict,
    robust_cholesky,
    spectral_shift,
)
from itemmetric.siamese import init_params, pair_distances
from itemmetric.theory import scale_model


def make_state(params, f, r=None, sigma2=0.1, rng=None, psd_shift=True):
    rng = rng or np.random.default_rng(0)
    n = len(f)
    r = rng.normal(size=n) if r is None else r
    return GPState(params, math.log(sigma2), list(range(n)), r, f, psd_shift=psd_shift)


def indefinite_instance(seed=12):
    """An ensemble Gram with lambda_min about -0.1 (found by search, kept fixed)."""
    rng = np.random.default_rng(seed)
    params, f = random_instance(rng, n=8, p=2, d=3, h=3)
    return params.with_w(np.array([6.0, 6.0, -3.0])), f


def state_grad_vector(state):
    g = nll_grad(state)
    return np.append(g.metric.to_vector(), g.log_noise)


def state_fd(state, objective=nll, h=1e-6):
    base = np.append(state.metric.to_vector(), state.log_noise)

    def f(v):
        return objective(state.with_params(metric=state.metric.from_vector(v[:-1]), log_noise=v[-1]))

    return fd_grad(f, base, h)


# -- kernel and Gram -------------------------------------------------------


def test_kernel_values(rng):
    params, f = random_instance(rng, n=2, mode="single")
    assert kernel(params, f.take([0]), f.take([0])) == 1.0
    d = pair_distances(params, f.take([0]), f.take([1]))[0]
    assert kernel(params, f.take([0]), f.take([1])) == pytest.approx(math.exp(-d / 2))
    assert math.exp(-0.5 * 2 * math.log(2)) == pytest.approx(0.5)


def test_ensemble_kernel_lower_bound(rng):
    params, f = random_instance(rng, n=8, p=3)
    params = params.with_w(np.append(50.0 * np.ones(3), 5.0))
    assert gram(params, f).min() > math.exp(-0.5)


def test_gram_entrywise(rng):
    params, f = random_instance(rng, n=3, p=2)
    K = gram(params, f)
    for i in range(3):
        for j in range(3):
            assert K[i, j] == pytest.approx(kernel(params, f.take([i]), f.take([j])), abs=1e-15)
    single, g = random_instance(rng, n=5, mode="single")
    assert np.array_equal(np.diag(gram(single, g)), np.ones(5))
    twin = g.take([1, 1])
    Kt = gram(single, twin)
    assert np.all(Kt == Kt[0, 0])


# -- NLL -------------------------------------------------------------------


def test_nll_closed_forms():
    for n in (1, 3, 7):
        assert nll_dense(np.eye(n), np.zeros(n), 1.0) == pytest.approx(0.5 * n * math.log(2), abs=1e-14)
    params = init_params((2,), 3, mode="single")
    f = ItemFeatures((np.array([[0.3, -0.1]]),), [0])
    state = GPState(params, 0.0, [0], [2.0], f)
    assert nll(state) == pytest.approx(0.5 * math.log(2) + 1.0, abs=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_nll_matches_dense_path(seed):
    rng = np.random.default_rng(seed)
    params, f = random_instance(rng, mode="single" if seed % 2 else "ensemble")
    state = make_state(params, f, sigma2=rng.uniform(0.05, 1.0), rng=rng)
    K = gram(params, f)
    assert abs(nll(state) - nll_dense(K, state.r, state.noise_total)) < 1e-10


def test_nll_dense_rejects_indefinite():
    with pytest.raises(NumericalError):
        nll_dense(np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros(2), 0.5)


@pytest.mark.parametrize("seed", range(10))
def test_nll_gradient(seed):
    rng = np.random.default_rng(50 + seed)
    mode = "single" if seed % 3 == 2 else "ensemble"
    params, f = random_instance(rng, mode=mode, include_id=(seed % 4 == 1 and mode == "ensemble"))
    state = make_state(params, f, sigma2=rng.uniform(0.05, 0.5), rng=rng)
    assert rel_err(state_grad_vector(state), state_fd(state)) < 1e-4


def test_nll_gradient_zero_targets(rng):
    params, f = random_instance(rng, n=5, p=2)
    state = make_state(params, f, r=np.zeros(5))
    assert rel_err(state_grad_vector(state), state_fd(state)) < 1e-4


def test_zero_h_only_aggregation_gradient(rng):
    params, f = random_instance(rng, n=5, p=2)
    params = params.with_w(np.array([0.0, 0.0, 0.3]))
    g = nll_grad(make_state(params, f, rng=rng)).metric
    for ch in g.channels:
        assert np.all(ch.tower.W_o == 0) and np.all(ch.lam == 0)
    assert g.agg_b != 0


# -- spectral shift --------------------------------------------------------


def test_shift_zero_for_psd_kernel(rng):
    params, f = random_instance(rng, n=8, mode="single")
    state = make_state(params, f)
    assert state.shift == 0.0 or state.factorize().shift == 0.0
    assert state.noise_total == pytest.approx(state.sigma2)


def test_shift_repairs_indefinite_gram():
    params, f = indefinite_instance()
    lam_min = np.linalg.eigvalsh(gram(params, f))[0]
    assert lam_min < -0.05
    state = make_state(params, f, sigma2=0.01)
    state.factorize()
    assert state.shift == pytest.approx(-lam_min - 0.005, rel=1e-10)
    assert state.jitter == 0.0
    assert abs(nll(state) - nll_dense(state.K, state.r, state.noise_total)) < 1e-10
    assert np.linalg.eigvalsh(state.K + state.noise_total * np.eye(8))[0] == pytest.approx(0.005, rel=1e-8)
    # a negative eigenvalue within noise/2 is left alone
    assert make_state(params, f, sigma2=-3 * lam_min).factorize().shift == 0.0


def test_shift_gradient_matches_fd():
    params, f = indefinite_instance()
    state = make_state(params, f, sigma2=0.02)
    assert state.factorize().shift > 0
    assert rel_err(state_grad_vector(state), state_fd(state)) < 1e-4


def test_without_shift_ladder_fails():
    params, f = indefinite_instance()
    state = make_state(params, f, sigma2=0.01, psd_shift=False)
    with pytest.raises(NumericalError) as info:
        nll(state)
    assert tuple(info.value.jitter_ladder) == JITTER_LADDER


def test_spectral_shift_oracle(rng):
    M = rng.normal(size=(6, 6))
    M = 0.5 * (M + M.T)
    s, v = spectral_shift(M)
    lam, vec = np.linalg.eigh(M)
    assert s == pytest.approx(max(0.0, -lam[0]))
    assert spectral_shift(M, slack=0.25)[0] == pytest.approx(max(0.0, -lam[0] - 0.25))
    assert spectral_shift(np.ones((4, 4)))[0] == 0.0
    assert abs(abs(v @ vec[:, 0]) - 1.0) < 1e-10


def test_robust_cholesky_jitter():
    A = np.ones((3, 3))
    L, jitter = robust_cholesky(A)
    assert jitter > 0 and np.allclose(L @ L.T, A + jitter * np.eye(3))


# -- prediction and residuals ---------------------------------------------


def near_linear(n, rng, scale=8.0):
    """Single-mode metric ``~ scale * ||x - x'||^2 / 16`` on points in the unit cube."""
    params = scale_model(2)
    params.channels[0].lam[...] = scale
    return params, ItemFeatures((rng.uniform(-0.5, 0.5, size=(n, 2)),), np.arange(n))


def test_predict_interpolates(rng):
    params, f = near_linear(3, rng)
    r = np.array([1.0, -2.0, 0.5])
    state = make_state(params, f, r=r, sigma2=1e-12)
    mean, var = predict(state, f)
    assert np.allclose(mean, r, atol=1e-6)
    assert np.all(var >= 0) and np.all(var < 1e-6)


def test_predict_dense_formula(rng):
    params, f = random_instance(rng, n=3, p=2)
    state = make_state(params, f, sigma2=0.3, rng=rng)
    x = type(f)(tuple(rng.normal(size=(4, k)) for k in f.dims), np.zeros(4))
    mean, var = predict(state, x)
    K = gram(params, f)
    Ks = np.exp(-0.5 * np.array([[pair_distances(params, f.take([i]), x.take([j]))[0] for j in range(4)] for i in range(3)]))
    kss = np.exp(-0.5 * pair_distances(params, x, x))
    A = K + state.noise_total * np.eye(3)
    assert np.allclose(mean, Ks.T @ np.linalg.solve(A, state.r), atol=1e-12)
    assert np.allclose(var, kss - np.einsum("ij,ij->j", Ks, np.linalg.solve(A, Ks)), atol=1e-12)
    zero = make_state(params, f, r=np.zeros(3))
    assert np.all(predict(zero, x)[0] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 50), st.floats(1e-3, 2.0))
def test_residual_identity(seed, n, sigma2):
    rng = np.random.default_rng(seed)
    params, f = random_instance(rng, n=n)
    state = make_state(params, f, sigma2=sigma2, rng=rng)
    lhs = state.r - fitted_values(state)
    A = gram(params, f) + state.noise_total * np.eye(n)
    rhs = state.noise_total * np.linalg.solve(A, state.r)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_fitted_value_limits(rng):
    params, f = near_linear(4, rng)
    r = rng.normal(size=4)
    assert np.allclose(fitted_values(make_state(params, f, r=r, sigma2=1e-10)), r, atol=1e-6)
    assert np.all(fitted_values(make_state(params, f, r=np.zeros(4))) == 0)


# -- Nystrom ---------------------------------------------------------------


def test_nystrom_full_set_equals_dense(rng):
    params, f = random_instance(rng, n=8, mode="single")
    state = make_state(params, f, sigma2=0.2, rng=rng)
    full = InducingSet(np.arange(8))
    assert abs(nystrom_nll(state, full) - nll(state)) < 1e-8
    gd, gn = nll_grad(state), nystrom_grad(state, full)
    assert rel_err(gn.metric.to_vector(), gd.metric.to_vector()) < 1e-6
    assert gn.log_noise == pytest.approx(gd.log_noise, rel=1e-6)


def test_nystrom_rank_one_oracle(rng):
    params, f = random_instance(rng, n=6, p=2)
    state = make_state(params, f, sigma2=0.3, rng=rng)
    K = gram(params, f)
    Q = np.outer(K[:, 2], K[2, :]) / K[2, 2]
    assert abs(nystrom_nll(state, InducingSet([2])) - nll_dense(Q, state.r, 0.3)) < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_nystrom_gradient(seed):
    rng = np.random.default_rng(300 + seed)
    params, f = random_instance(rng, n=20, p=2, d=3, h=3)
    state = make_state(params, f, sigma2=0.2, rng=rng)
    ind = choose_inducing(state, 5, seed)
    g = nystrom_grad(state, ind)
    num = state_fd(state, lambda s: nystrom_nll(s, ind))
    assert rel_err(np.append(g.metric.to_vector(), g.log_noise), num) < 1e-4


def test_nystrom_zero_targets_gradient(rng):
    params, f = random_instance(rng, n=10, p=2)
    state = make_state(params, f, r=np.zeros(10), sigma2=0.2)
    ind = choose_inducing(state, 4)
    g = nystrom_grad(state, ind)
    num = state_fd(state, lambda s: nystrom_nll(s, ind))
    assert rel_err(np.append(g.metric.to_vector(), g.log_noise), num) < 1e-4


def test_nystrom_shift_gradient():
    params, f = indefinite_instance()
    state = make_state(params, f, sigma2=0.05)
    ind = InducingSet([0, 2, 3, 5, 7])
    assert np.linalg.eigvalsh(gram(params, f.take(ind.index)))[0] < 0
    g = nystrom_grad(state, ind)
    num = state_fd(state, lambda s: nystrom_nll(s, ind))
    assert rel_err(np.append(g.metric.to_vector(), g.log_noise), num) < 1e-4


def test_nystrom_speed():
    rng = np.random.default_rng(0)
    params, f = random_instance(rng, n=2000, p=2, d=4, h=3)
    state = make_state(params, f, sigma2=0.2, rng=rng)
    ind = choose_inducing(state, 50)

    def best_of(fn, reps=3):
        out = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
        return min(out)

    dense = best_of(lambda: nll(state.with_params()))
    low = best_of(lambda: nystrom_nll(state, ind))
    assert dense / low >= 10.0, (dense, low)
