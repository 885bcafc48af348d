import numpy as np
import pytest
from sklearn.base import clone

from itemmetric.estimators import ContrastiveSiameseMetric, PersonalizedMetric, SSLMetricRegressor, split_channels
from itemmetric.exceptions import DimensionError
from itemmetric.gp import fitted_values
from itemmetric.siamese import distance_matrix


def _blobs(seed=0, n=24):
    rng = np.random.default_rng(seed)
    lab = np.arange(n) % 2
    X = np.hstack([np.where(lab[:, None] == 0, -1.0, 1.0) + 0.2 * rng.normal(size=(n, 2)), rng.normal(size=(n, 3))])
    y = 2.0 * lab - 1.0 + 0.1 * rng.normal(size=n) + 5.0
    return X, y, lab


def test_split_channels():
    X = np.arange(10.0).reshape(2, 5)
    f = split_channels(X, (2, 3))
    assert f.dims == (2, 3) and np.array_equal(f.channels[1], X[:, 2:])
    with pytest.raises(DimensionError):
        split_channels(X, (2, 2))


def test_regressor_matches_functional_core():
    X, y, _ = _blobs()
    est = SSLMetricRegressor(channel_dims=(2, 3), hidden=3, steps=30, learning_rate=0.01).fit(X, y)
    mean = est.predict(X)
    # in-sample prediction is the GP fitted value plus the removed mean
    assert np.allclose(mean, fitted_values(est.state_) + y.mean(), rtol=1e-8, atol=1e-8)
    assert est.score(X, y) > 0.5
    m2, sd = est.predict(X[:3], return_std=True)
    assert sd.shape == (3,) and np.all(sd >= 0) and np.allclose(m2, mean[:3])
    assert np.allclose(est.pairwise_distances(X), distance_matrix(est.metric_, split_channels(X, (2, 3))))
    assert est.transform(X).shape == (24, 2 * 3)


def test_clone_and_params():
    est = SSLMetricRegressor(hidden=5, steps=3)
    c = clone(est)
    assert c.get_params() == est.get_params() and not hasattr(c, "state_")
    X, y, _ = _blobs()
    a = SSLMetricRegressor(steps=5, random_state=3).fit(X, y).predict(X)
    b = clone(SSLMetricRegressor(steps=5, random_state=3)).fit(X, y).predict(X)
    assert np.array_equal(a, b)


def test_contrastive_pairs():
    X, _, lab = _blobs()
    pairs = np.array([(i, j, int(lab[i] != lab[j])) for i in range(24) for j in range(i + 1, 24)])
    est = ContrastiveSiameseMetric(channel_dims=(2, 3), hidden=3, steps=100).fit(X, pairs)
    assert est.losses_[-1] < est.losses_[0]
    D = est.pairwise_distances(X)
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(24, dtype=bool)
    assert D[same & off].mean() < D[~same].mean()
    with pytest.raises(DimensionError):
        est.fit(X, pairs[:, :2])


def test_personalized_metric():
    X, y, _ = _blobs()
    base = SSLMetricRegressor(channel_dims=(2, 3), hidden=3, steps=20, learning_rate=0.01).fit(X, y)
    groups = np.array(["u1"] * 10 + ["u2"] * 13 + ["u3"])
    pm = PersonalizedMetric(base, outer_steps=3).fit(X, y, groups)
    assert set(pm.user_weights_) == {"u1", "u2"}
    assert np.array_equal(pm.weights("nobody"), pm.w_meta_)
    assert not np.array_equal(pm.weights("u1"), pm.w_meta_)
    D = pm.pairwise_distances(X[:4], user="u1")
    assert np.allclose(D, distance_matrix(base.metric_.with_w(pm.weights("u1")), split_channels(X[:4], (2, 3))))
    with pytest.raises(DimensionError):
        pm.fit(X, y[:-1], groups)
