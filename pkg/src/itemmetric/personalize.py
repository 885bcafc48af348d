"""Personalizable metrics: per-user adaptation of the ensemble weights.

With the tower and scale parameters frozen, only the aggregation weights
``w = (h, b)`` move. Each user ``u`` has a local NLL ``l_u(w)`` on their own
rated items, an adaptation map ``kappa_u(w)`` (``t`` gradient-descent steps
of size ``omega``) and the meta objective

    L(w) = mean_u l_u(kappa_u(w)),

whose gradient is ``mean_u J_u(w)^T grad l_u(kappa_u(w))`` with ``J_u`` the
Jacobian of ``kappa_u``. ``J_u`` is either exact for one step,
``I - omega H_u(w)``, or the second-order Taylor construction around
``w = 0``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from .data import ItemCatalog, ItemFeatures, InteractionLog, user_targets
from .exceptions import ConfigError, DataError, DimensionError, DivergenceError, NumericalError
from .gp import shift_adjoint, shifted_cholesky
from .optim import OPTIMIZERS, make_optimizer
from .siamese import EnsembleParams, component_matrix, embed

logger = logging.getLogger(__name__)

JACOBIAN_MODES = ("exact-one-step", "taylor")
HESSIAN_STEP = 1e-5
TAYLOR_OUTER_STEP = 1e-3


@dataclass
class UserContext:
    """One user's rated items, centered ratings and meta-average weight."""

    user: object
    items: list
    r_u: np.ndarray
    weight: float = 1.0
    X: ItemFeatures | None = field(default=None, repr=False)

    def __post_init__(self):
        self.items = list(self.items)
        self.r_u = np.asarray(self.r_u, dtype=np.float64).reshape(-1)
        if len(self.items) != self.r_u.shape[0]:
            raise DimensionError(f"user {self.user!r}: items and ratings differ in length")
        if len(self.items) < 2:
            raise DataError(f"user {self.user!r} has fewer than 2 rated items")
        if not self.weight > 0:
            raise DataError(f"user {self.user!r}: weight must be positive")
        if self.X is not None and len(self.X) != len(self.items):
            raise DimensionError(f"user {self.user!r}: features do not match items")

    @classmethod
    def from_log(cls, log: InteractionLog, catalog: ItemCatalog, user, train_items=None, weight=1.0):
        sub = log.for_user(user)
        if train_items is not None:
            sub = sub.restrict_items(set(train_items))
        items, r = user_targets(sub, user)
        return cls(user, items, r, weight, catalog.features.take(catalog.indices(items)))


def build_user_contexts(log: InteractionLog, catalog: ItemCatalog, users=None, train_items=None):
    """Contexts for every user with at least two rated (train) items.

    Returns ``(contexts, skipped)`` with contexts in sorted user order.
    """
    if users is None:
        users = sorted(log.users(), key=lambda u: (str(type(u)), str(u)))
    out, skipped = [], 0
    for u in users:
        try:
            out.append(UserContext.from_log(log, catalog, u, train_items))
        except DataError:
            skipped += 1
    if skipped:
        logger.info("personalization: skipped %d users with fewer than 2 rated items", skipped)
    return out, skipped


@dataclass
class MetaConfig:
    inner_rate: float = 0.1
    inner_steps: int = 1
    outer_rate: float = 1e-2
    outer_steps: int = 100
    jacobian_mode: str = "exact-one-step"
    optimizer: str = "adaptive-moment"
    users_per_step: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if not self.inner_rate >= 0:
            raise ConfigError("inner_rate must be >= 0")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if not self.outer_rate > 0:
            raise ConfigError("outer_rate must be positive")
        if self.outer_steps < 0:
            raise ConfigError("outer_steps must be >= 0")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ConfigError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.jacobian_mode == "exact-one-step" and self.inner_steps != 1:
            raise ConfigError("exact-one-step Jacobians need inner_steps = 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.users_per_step is not None and self.users_per_step < 1:
            raise ConfigError("users_per_step must be >= 1")


class FrozenMetric:
    """Towers and scales held fixed; only ``w = (h, b)`` is free."""

    def __init__(self, params: EnsembleParams, log_noise: float):
        if params.mode != "ensemble":
            raise ConfigError("personalization adapts ensemble weights; the metric is in single mode")
        self.params = params.copy()
        self.log_noise = float(log_noise)

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.log_noise))

    @property
    def w(self) -> np.ndarray:
        return self.params.w

    @property
    def dim(self) -> int:
        return self.params.n_components + 1

    def components(self, X: ItemFeatures) -> np.ndarray:
        """Component distances ``(P, n, n)`` among ``X`` (symmetrized)."""
        e = embed(self.params, X)
        C = component_matrix(self.params, e, e)
        return 0.5 * (C + np.swapaxes(C, 1, 2))

    def objective(self, user: UserContext) -> "UserObjective":
        if user.X is None:
            raise DataError(f"user {user.user!r} has no item features attached")
        return UserObjective(self, user)


class UserObjective:
    """``l_u(w)``: GP NLL of one user's centered ratings under weights ``w``."""

    def __init__(self, metric: FrozenMetric, user: UserContext):
        self.metric = metric
        self.user = user
        self.weight = user.weight
        self.C = metric.components(user.X)

    def value_and_grad(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.C.shape[0] + 1,):
            raise DimensionError(f"w must have {self.C.shape[0] + 1} entries")
        n = self.C.shape[1]
        D = expit(np.tensordot(w[:-1], self.C, axes=1) + w[-1])
        K = np.exp(-0.5 * D)
        L, _, _, v = shifted_cholesky(K, self.metric.sigma2)
        r = self.user.r_u
        alpha = linalg.cho_solve((L, True), r)
        value = float(np.sum(np.log(np.diag(L))) + 0.5 * r @ alpha)
        Ainv = linalg.cho_solve((L, True), np.eye(n))
        G = shift_adjoint(0.5 * (Ainv - np.outer(alpha, alpha)), v)
        ds = -0.5 * K * G * D * (1.0 - D)
        grad = np.append(np.tensordot(self.C, ds, axes=([1, 2], [0, 1])), ds.sum())
        return value, grad

    def value(self, w) -> float:
        return self.value_and_grad(w)[0]

    def grad(self, w) -> np.ndarray:
        return self.value_and_grad(w)[1]


def _objective(user, metric=None):
    if isinstance(user, UserContext):
        if metric is None:
            raise ConfigError("a UserContext needs the frozen metric")
        return metric.objective(user)
    return user


def _user_label(obj):
    u = getattr(obj, "user", None)
    return getattr(u, "user", u)


# --------------------------------------------------------------------------
# Local pieces
# --------------------------------------------------------------------------


def local_loss(w, metric: FrozenMetric, user) -> float:
    """The user's NLL at weights ``w`` with towers and noise held fixed."""
    return _objective(user, metric).value(w)


def local_update(w, user, omega: float, t: int = 1, metric: FrozenMetric | None = None) -> np.ndarray:
    """``kappa_u(w)``: ``t`` descent steps ``w <- w - omega grad l_u(w)``.

    ``user`` is a :class:`UserContext` (with ``metric``) or any object with
    a ``grad(w)`` method.
    """
    obj = _objective(user, metric)
    w = np.array(w, dtype=np.float64)
    for _ in range(int(t)):
        g = obj.grad(w)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite local gradient for user {_user_label(obj)!r}")
        w = w - omega * g
    return w


def local_hessian(w, user, metric=None, step: float = HESSIAN_STEP) -> np.ndarray:
    """Symmetrized central differences of the analytic local gradient."""
    obj = _objective(user, metric)
    w = np.asarray(w, dtype=np.float64)
    k = w.shape[0]
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = step
        H[:, j] = (obj.grad(w + e) - obj.grad(w - e)) / (2.0 * step)
    if not np.all(np.isfinite(H)):
        raise NumericalError(f"non-finite Hessian for user {_user_label(obj)!r}")
    return 0.5 * (H + H.T)


def _kappa_jacobian_fd(w, obj, omega, t, step=HESSIAN_STEP):
    """Central-difference Jacobian ``J[i, j] = d kappa_i / d w_j``."""
    k = w.shape[0]
    J = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = step
        J[:, j] = (local_update(w + e, obj, omega, t) - local_update(w - e, obj, omega, t)) / (2.0 * step)
    return J


def update_jacobian(w, user, omega: float, mode: str = "exact-one-step", t: int = 1, metric=None) -> np.ndarray:
    """Jacobian of ``kappa_u`` at ``w`` (``J[i, j] = d kappa_i / d w_j``).

    ``exact-one-step`` returns ``I - omega H_u(w)`` and needs ``t = 1``.
    ``taylor`` expands every component of ``kappa_u`` to second order around
    ``w = 0``: row ``i`` is ``grad kappa_i(0) + hess kappa_i(0) w``, both
    estimated by central differences.
    """
    obj = _objective(user, metric)
    w = np.asarray(w, dtype=np.float64)
    k = w.shape[0]
    if mode == "exact-one-step":
        if t != 1:
            raise ConfigError("exact-one-step Jacobians need t = 1")
        if omega == 0:
            return np.eye(k)
        return np.eye(k) - omega * local_hessian(w, obj)
    if mode != "taylor":
        raise ConfigError(f"unknown jacobian mode {mode!r}")
    zero = np.zeros(k)
    J0 = _kappa_jacobian_fd(zero, obj, omega, t)
    # T[i, :, j] = d/dw_j grad kappa_i, i.e. row j of hess kappa_i
    T = np.empty((k, k, k))
    h = TAYLOR_OUTER_STEP
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        T[:, :, j] = (_kappa_jacobian_fd(e, obj, omega, t) - _kappa_jacobian_fd(-e, obj, omega, t)) / (2.0 * h)
    T = 0.5 * (T + np.swapaxes(T, 1, 2))
    J = J0 + T @ w
    if not np.all(np.isfinite(J)):
        raise NumericalError(f"non-finite Taylor Jacobian for user {_user_label(obj)!r}")
    return J


# --------------------------------------------------------------------------
# Meta objective
# --------------------------------------------------------------------------


def _weights(objs):
    wts = np.array([float(getattr(o, "weight", 1.0)) for o in objs])
    return wts / wts.sum()


def post_update_loss(w, users, omega: float, t: int = 1, metric=None) -> float:
    """Weighted mean of ``l_u(kappa_u(w))`` (plain mean for unit weights)."""
    objs = [_objective(u, metric) for u in users]
    if not objs:
        raise DataError("post-update loss needs at least one user")
    vals = np.array([o.value(local_update(w, o, omega, t)) for o in objs])
    return float(_weights(objs) @ vals)


def meta_value_and_grad(w, users, config: MetaConfig, metric=None):
    objs = [_objective(u, metric) for u in users]
    if not objs:
        raise DataError("meta gradient needs at least one user")
    w = np.asarray(w, dtype=np.float64)
    wts = _weights(objs)
    total, grad = 0.0, np.zeros_like(w)
    for a, o in zip(wts, objs):
        w_u = local_update(w, o, config.inner_rate, config.inner_steps)
        v, g = o.value_and_grad(w_u)
        J = update_jacobian(w, o, config.inner_rate, config.jacobian_mode, config.inner_steps)
        total += a * v
        grad += a * (J.T @ g)
    return float(total), grad


def meta_gradient(w, users, config: MetaConfig, metric=None) -> np.ndarray:
    """``mean_u J_u(w)^T grad l_u(kappa_u(w))``."""
    return meta_value_and_grad(w, users, config, metric)[1]


@dataclass
class MetaTrace:
    rows: list = field(default_factory=list)
    best_step: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("step", "post_update_loss", "grad_norm"))
            for step, v, g in self.rows:
                wr.writerow([step, repr(v), repr(g)])


def fit_meta(users, w_init, config: MetaConfig, metric: FrozenMetric | None = None):
    """Outer-loop descent on the post-update loss.

    Each outer step uses all users, or ``users_per_step`` of them drawn
    under ``seed``. Returns ``(w, trace)`` with the weights of lowest
    recorded full post-update loss.
    """
    config.validate()
    objs = [_objective(u, metric) for u in users]
    if not objs:
        raise DataError("meta training needs at least one user")
    w = np.array(w_init, dtype=np.float64)
    opt = make_optimizer(config.optimizer, config.outer_rate)
    rng = np.random.default_rng(config.seed)
    trace = MetaTrace()
    best = (np.inf, w.copy())
    variables = {"w": w}
    for step in range(config.outer_steps + 1):
        full_value, full_grad = meta_value_and_grad(variables["w"], objs, config)
        gnorm = float(np.linalg.norm(full_grad))
        if not (np.isfinite(full_value) and np.isfinite(gnorm)):
            raise DivergenceError("non-finite post-update loss", step=step, trace=trace)
        trace.rows.append((step, full_value, gnorm))
        if full_value < best[0]:
            best = (full_value, variables["w"].copy())
            trace.best_step = step
        if step == config.outer_steps:
            break
        grad = full_grad
        if config.users_per_step and config.users_per_step < len(objs):
            pick = np.sort(rng.choice(len(objs), size=config.users_per_step, replace=False))
            grad = meta_gradient(variables["w"], [objs[i] for i in pick], config)
        opt.step(variables, {"w": grad})
    return best[1], trace


def personalize_user(w, user, config: MetaConfig, metric: FrozenMetric | None = None) -> np.ndarray:
    """Deployment-time adaptation: ``kappa_u(w)`` with the configured rate and steps."""
    return local_update(w, user, config.inner_rate, config.inner_steps, metric)


def write_user_weights(path, rows) -> None:
    """CSV ``user_id,h_1..h_P,b`` from ``(user, w_u)`` rows."""
    rows = list(rows)
    p = len(rows[0][1]) - 1 if rows else 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["user_id"] + [f"h_{i + 1}" for i in range(p)] + ["b"])
        for user, w_u in rows:
            wr.writerow([user] + [repr(float(x)) for x in w_u])
