import math

import numpy as np
import pytest

from itemmetric.data import ItemCatalog, ItemFeatures, MetaChannel
from itemmetric.exceptions import ConfigError, DimensionError, DivergenceError, InvariantError
from itemmetric.gp import GPState, nll
from itemmetric.optim import ParamView, freeze_mask, make_optimizer, softplus, softplus_inv
from itemmetric.siamese import init_params
from itemmetric.ssl import TrainConfig, fit_ssl


def two_clusters(n=12, seed=0):
    rng = np.random.default_rng(seed)
    lab = np.arange(n) % 2
    X1 = np.where(lab[:, None] == 1, 1.0, -1.0) + 0.2 * rng.normal(size=(n, 3))
    X2 = rng.normal(size=(n, 2))
    r = np.where(lab == 1, 1.0, -1.0) + 0.1 * rng.normal(size=n)
    return ItemFeatures((X1, X2), np.arange(n)), r - r.mean()


def test_zero_steps_wraps_init():
    f, r = two_clusters()
    init = init_params(f.dims, 3, seed=0)
    state, trace = fit_ssl(f, range(12), r, init, TrainConfig(steps=0))
    assert len(trace) == 1 and trace.rows[0][0] == 0
    assert np.array_equal(state.metric.to_vector(), init.to_vector())
    assert state.sigma2 == pytest.approx(0.1)
    assert trace.rows[0][1] == pytest.approx(nll(state), abs=1e-12)


def test_nll_decreases_and_inputs_untouched():
    f, r = two_clusters()
    init = init_params(f.dims, 3, seed=0)
    before, r0 = init.to_vector().copy(), r.copy()
    state, trace = fit_ssl(f, range(12), r, init, TrainConfig(steps=200, learning_rate=0.01))
    assert nll(state) < trace.nll[0] - 1.0
    assert nll(state) == pytest.approx(trace.nll.min(), abs=1e-12)
    assert np.array_equal(init.to_vector(), before) and np.array_equal(r, r0)


def test_deterministic_traces():
    f, r = two_clusters()
    init = init_params(f.dims, 3, seed=0)
    cfg = TrainConfig(steps=30, learning_rate=0.01, batch_items=6, seed=3, eval_every=5)
    a = fit_ssl(f, range(12), r, init, cfg)
    b = fit_ssl(f, range(12), r, init, cfg)
    assert a[1].rows == b[1].rows
    assert np.array_equal(a[0].metric.to_vector(), b[0].metric.to_vector())


def test_plain_gradient_monotone():
    f, r = two_clusters()
    init = init_params(f.dims, 3, seed=2)
    cfg = TrainConfig(steps=50, learning_rate=1e-3, optimizer="plain-gradient", eval_every=1)
    _, trace = fit_ssl(f, range(12), r, init, cfg)
    assert len(trace) == 51
    assert np.all(np.diff(trace.nll) < 0)


def test_catalog_input_and_ids():
    f, r = two_clusters()
    items = [f"x{k}" for k in range(12)]
    cat = ItemCatalog(
        items,
        [MetaChannel("a", "dense", 3, dict(zip(items, f.channels[0]))), MetaChannel("b", "dense", 2, dict(zip(items, f.channels[1])))],
    )
    init = init_params(f.dims, 3, seed=0)
    train = items[::2]
    s1, t1 = fit_ssl(cat, train, r[::2], init, TrainConfig(steps=5))
    s2, t2 = fit_ssl(f, range(0, 12, 2), r[::2], init, TrainConfig(steps=5))
    assert t1.rows == t2.rows and s1.train_items == train


def test_nystrom_path_used_above_threshold():
    f, r = two_clusters(n=30)
    g = ItemFeatures((f.channels[0],), f.ids)
    init = init_params((3,), 3, seed=0, mode="single")
    _, trace = fit_ssl(g, range(30), r, init, TrainConfig(steps=5, nystrom_above=10, inducing=30))
    _, ref = fit_ssl(g, range(30), r, init, TrainConfig(steps=5))
    # m = n and a positive semidefinite kernel: Q = K up to Cholesky round-off
    assert np.allclose(trace.nll, ref.nll, rtol=1e-7)
    _, low = fit_ssl(g, range(30), r, init, TrainConfig(steps=5, nystrom_above=10, inducing=1))
    assert not np.allclose(low.nll, ref.nll)


def test_config_validation():
    f, r = two_clusters()
    init = init_params(f.dims, 3)
    for bad in (TrainConfig(steps=-1), TrainConfig(learning_rate=0), TrainConfig(optimizer="sgd"), TrainConfig(batch_items=50)):
        with pytest.raises(ConfigError):
            fit_ssl(f, range(12), r, init, bad)
    with pytest.raises(DimensionError):
        fit_ssl(f, range(12), r[:5], init, TrainConfig(steps=1))
    with pytest.raises(DimensionError):
        fit_ssl(f, range(12), r, init_params((3,), 3), TrainConfig(steps=1))


def test_non_finite_targets_rejected():
    f, r = two_clusters()
    with pytest.raises(InvariantError):
        fit_ssl(f, range(12), r * np.inf, init_params(f.dims, 3), TrainConfig(steps=3))


def test_divergence_carries_trace(monkeypatch):
    import itemmetric.ssl as ssl_mod

    calls = {"n": 0}
    real = ssl_mod.nll

    def flaky(state):
        calls["n"] += 1
        return real(state) if calls["n"] <= 3 else math.nan

    monkeypatch.setattr(ssl_mod, "nll", flaky)
    f, r = two_clusters()
    with pytest.raises(DivergenceError) as info:
        fit_ssl(f, range(12), r, init_params(f.dims, 3), TrainConfig(steps=10, eval_every=1))
    assert info.value.step == 3 and len(info.value.trace) == 3


# -- masks and optimizers --------------------------------------------------


def test_freeze_all_channels_moves_only_aggregation():
    f, r = two_clusters()
    init = init_params(f.dims, 3, seed=0)
    cfg = TrainConfig(steps=1, learning_rate=0.05, frozen=("channel0", "channel1", "noise"))
    state, _ = fit_ssl(f, range(12), r, init, TrainConfig(steps=3, learning_rate=0.05, frozen=cfg.frozen, eval_every=100))
    moved = {k for k, v in state.metric.named_arrays().items() if not np.array_equal(v, init.named_arrays()[k])}
    assert moved == {"agg_h", "agg_b"}
    assert state.log_noise == pytest.approx(math.log(0.1))


def test_freeze_lambda_single_mode():
    f, r = two_clusters()
    init = init_params((3,), 3, seed=0, mode="single")
    g = ItemFeatures((f.channels[0],), f.ids)
    state, _ = fit_ssl(g, range(12), r, init, TrainConfig(steps=100, learning_rate=0.01, learn_lambda=True, frozen=("lambda",)))
    assert np.array_equal(state.metric.channels[0].lam, init.channels[0].lam)
    state, _ = fit_ssl(g, range(12), r, init, TrainConfig(steps=100, learning_rate=0.01, learn_lambda=True))
    assert not np.array_equal(state.metric.channels[0].lam, init.channels[0].lam)


def test_mask_semantics():
    params = init_params((2, 3), 2, include_id=True, n_items=4)
    m = freeze_mask(params)
    assert not any(m.is_frozen(n) for n in m.names)
    m = freeze_mask(params, ("towers", "id"))
    assert set(m.active) == {"channel0.lam", "channel1.lam", "agg_h", "agg_b", "log_noise"}
    grads = {n: np.ones(3) for n in m.names}
    out = m.apply(grads)
    assert np.all(out["channel0.W_o"] == 0) and np.all(out["agg_h"] == 1)
    with pytest.raises(ConfigError):
        freeze_mask(params, ("nonsense",))


def test_unmasked_view_equals_plain_step():
    params = init_params((2,), 2, seed=1)
    g = params.from_vector(np.linspace(-1, 1, params.size()))
    view = ParamView(params.copy(), frozen=())
    opt = make_optimizer("plain-gradient", 0.1)
    opt.step(view.variables, view.gradient(g))
    assert np.allclose(view.params.to_vector(), params.to_vector() - 0.1 * g.to_vector())


def test_softplus_inverse():
    x = np.array([1e-6, 0.3, 1.0, 12.0, 40.0])
    assert np.allclose(softplus(softplus_inv(x)), x, rtol=1e-12)


def test_state_alignment_checked():
    f, r = two_clusters()
    with pytest.raises(DimensionError):
        GPState(init_params(f.dims, 2), 0.0, list(range(11)), r, f)
