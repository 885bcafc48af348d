"""scikit-learn style wrappers over the functional core.

Items are rows of a 2-D array whose columns are the channel vectors laid
side by side; ``channel_dims`` says how to cut a row into channels (one
channel spanning all columns by default). Row ``i`` is item index ``i``
for the optional ID tower. The wrappers only translate arguments; all the
work is done by :mod:`itemmetric.ssl`, :mod:`itemmetric.siamese` and
:mod:`itemmetric.personalize`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import ItemFeatures
from .exceptions import DimensionError
from .gp import predict
from .personalize import FrozenMetric, MetaConfig, UserContext, fit_meta, personalize_user
from .siamese import BaselineConfig, PairBatch, distance_matrix, embed, init_params, train_siamese_baseline
from .ssl import TrainConfig, fit_ssl


def split_channels(X, channel_dims=None) -> ItemFeatures:
    """Cut the columns of ``X`` into channel matrices."""
    X = check_array(X, dtype=np.float64)
    dims = (X.shape[1],) if channel_dims is None else tuple(int(d) for d in channel_dims)
    if sum(dims) != X.shape[1]:
        raise DimensionError(f"channel_dims {dims} do not add up to {X.shape[1]} columns")
    cuts = np.cumsum((0,) + dims)
    return ItemFeatures(tuple(X[:, a:b] for a, b in zip(cuts[:-1], cuts[1:])), np.arange(X.shape[0]))


class _MetricMixin:
    """``transform`` (embeddings) and ``pairwise_distances`` for a fitted ``metric_``."""

    def _features(self, X):
        return split_channels(X, self.channel_dims)

    def transform(self, X):
        check_is_fitted(self, "metric_")
        e = embed(self.metric_, self._features(X))
        return np.hstack([e.points(self.metric_, m) for m in range(len(self.metric_.channels))])

    def pairwise_distances(self, X, Y=None):
        check_is_fitted(self, "metric_")
        return distance_matrix(self.metric_, self._features(X), None if Y is None else self._features(Y))


class SSLMetricRegressor(_MetricMixin, RegressorMixin, BaseEstimator):
    """GP regression with a learned Siamese kernel, fit by the marginal likelihood.

    ``fit(X, y)`` centers ``y``, trains the metric and noise on the NLL and
    keeps the best state. ``predict`` returns the posterior mean (plus the
    latent standard deviation with ``return_std=True``).
    """

    def __init__(
        self, channel_dims=None, hidden=8, mode="ensemble", steps=1000, learning_rate=1e-3,
        optimizer="adaptive-moment", noise_init=0.1, batch_items=None, learn_lambda=False, random_state=0,
    ):
        self.channel_dims = channel_dims
        self.hidden = hidden
        self.mode = mode
        self.steps = steps
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.noise_init = noise_init
        self.batch_items = batch_items
        self.learn_lambda = learn_lambda
        self.random_state = random_state

    def fit(self, X, y):
        feats = self._features(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape[0] != len(feats):
            raise DimensionError("X and y have different numbers of rows")
        self.y_mean_ = float(y.mean())
        init = init_params(feats.dims, self.hidden, n_items=len(feats), mode=self.mode, seed=self.random_state)
        config = TrainConfig(
            steps=self.steps, learning_rate=self.learning_rate, optimizer=self.optimizer, batch_items=self.batch_items,
            seed=self.random_state, noise_init=self.noise_init, learn_lambda=self.learn_lambda,
        )
        self.state_, self.trace_ = fit_ssl(feats, np.arange(len(feats)), y - self.y_mean_, init, config)
        self.metric_ = self.state_.metric
        self.noise_ = self.state_.sigma2
        self.n_features_in_ = sum(feats.dims)
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "state_")
        mean, var = predict(self.state_, self._features(X))
        mean = mean + self.y_mean_
        return (mean, np.sqrt(var)) if return_std else mean


class ContrastiveSiameseMetric(_MetricMixin, TransformerMixin, BaseEstimator):
    """Siamese ensemble trained on labelled pairs by the contrastive loss.

    ``fit(X, pairs)`` takes item rows ``X`` and an ``(m, 3)`` integer array
    of ``(row_a, row_b, label)`` with label 0 for similar, 1 for dissimilar.
    """

    def __init__(
        self, channel_dims=None, hidden=8, mode="ensemble", steps=500, learning_rate=1e-2,
        optimizer="adaptive-moment", margin_tau=0.9, batch_pairs=None, random_state=0,
    ):
        self.channel_dims = channel_dims
        self.hidden = hidden
        self.mode = mode
        self.steps = steps
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.margin_tau = margin_tau
        self.batch_pairs = batch_pairs
        self.random_state = random_state

    def fit(self, X, pairs):
        feats = self._features(X)
        pairs = np.asarray(pairs, dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 3:
            raise DimensionError("pairs must be an (m, 3) array of (row_a, row_b, label)")
        batch = PairBatch(pairs[:, 0], pairs[:, 1], pairs[:, 2])
        init = init_params(feats.dims, self.hidden, n_items=len(feats), mode=self.mode, seed=self.random_state)
        config = BaselineConfig(
            steps=self.steps, learning_rate=self.learning_rate, optimizer=self.optimizer, margin_tau=self.margin_tau,
            batch_pairs=self.batch_pairs, seed=self.random_state,
        )
        self.metric_, self.losses_ = train_siamese_baseline(batch, init, config, feats)
        return self


class PersonalizedMetric(BaseEstimator):
    """Meta-learned ensemble weights adapted to each user.

    ``base`` is a fitted :class:`SSLMetricRegressor` in ensemble mode. In
    ``fit(X, y, groups)`` every row is one rating: the item's features, the
    rating and the user id. Users with fewer than two rows are skipped.
    """

    def __init__(
        self, base=None, inner_rate=0.1, inner_steps=1, outer_rate=1e-2, outer_steps=100,
        jacobian_mode="exact-one-step", random_state=0,
    ):
        self.base = base
        self.inner_rate = inner_rate
        self.inner_steps = inner_steps
        self.outer_rate = outer_rate
        self.outer_steps = outer_steps
        self.jacobian_mode = jacobian_mode
        self.random_state = random_state

    def _config(self):
        return MetaConfig(
            inner_rate=self.inner_rate, inner_steps=self.inner_steps, outer_rate=self.outer_rate,
            outer_steps=self.outer_steps, jacobian_mode=self.jacobian_mode, seed=self.random_state,
        )

    def fit(self, X, y, groups):
        check_is_fitted(self.base, "state_")
        self.channel_dims_ = self.base.channel_dims
        feats = split_channels(X, self.channel_dims_)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        groups = np.asarray(groups, dtype=object).reshape(-1)
        if not (y.shape[0] == groups.shape[0] == len(feats)):
            raise DimensionError("X, y and groups have different numbers of rows")
        self.frozen_ = FrozenMetric(self.base.metric_, self.base.state_.log_noise)
        users = []
        for u in sorted(set(groups.tolist()), key=str):
            rows = np.flatnonzero(groups == u)
            if rows.size >= 2:
                users.append(UserContext(u, list(rows), y[rows] - y[rows].mean(), X=feats.take(rows)))
        config = self._config()
        self.w_meta_, self.trace_ = fit_meta(users, self.frozen_.w, config, self.frozen_)
        self.user_weights_ = {c.user: personalize_user(self.w_meta_, c, config, self.frozen_) for c in users}
        return self

    def weights(self, user=None) -> np.ndarray:
        """Adapted weights of ``user`` (the meta weights for unknown users or None)."""
        check_is_fitted(self, "w_meta_")
        return self.user_weights_.get(user, self.w_meta_) if user is not None else self.w_meta_

    def pairwise_distances(self, X, Y=None, user=None):
        params = self.frozen_.params.with_w(self.weights(user))
        fa = split_channels(X, self.channel_dims_)
        return distance_matrix(params, fa, None if Y is None else split_channels(Y, self.channel_dims_))
