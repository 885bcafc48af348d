"""Siamese towers, per-channel Mahalanobis distances and the ensemble metric.

Each meta channel ``m`` has a tower

    F_m(v) = tanh(W_t sigmoid(W_s relu(W_o v + b_o) + b_s) + b_t)

and a diagonal scale ``lam`` giving the component distance

    C_m(a, b) = sum_k lam_k (F_m(v_a)_k - F_m(v_b)_k)^2.

An optional ID-embedding table contributes one more component
``||E[id_a] - E[id_b]||^2``. In ``"ensemble"`` mode the components are
combined as ``sigmoid(h . C + b)``; in ``"single"`` mode the one component
is used directly (unbounded above).

All gradients are hand-written reverse mode over batches; every forward
function has a ``*_backward`` twin taking the upstream weights.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

from .data import ItemFeatures
from .exceptions import ConfigError, DimensionError, DivergenceError, InvariantError

logger = logging.getLogger(__name__)

MODES = ("ensemble", "single")
TOWER_FIELDS = ("W_o", "b_o", "W_s", "b_s", "W_t", "b_t")

empty_pair_warnings = 0


@dataclass
class TowerParams:
    W_o: np.ndarray
    b_o: np.ndarray
    W_s: np.ndarray
    b_s: np.ndarray
    W_t: np.ndarray
    b_t: np.ndarray

    def __post_init__(self):
        for name in TOWER_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h2, d = self.W_o.shape
        h = self.W_t.shape[0]
        if (
            self.b_o.shape != (h2,)
            or self.W_s.shape != (h, h2)
            or self.b_s.shape != (h,)
            or self.W_t.shape != (h, h)
            or self.b_t.shape != (h,)
        ):
            raise DimensionError("inconsistent tower shapes")

    @property
    def input_dim(self) -> int:
        return self.W_o.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_t.shape[0]

    @classmethod
    def zeros(cls, d: int, h: int) -> "TowerParams":
        return cls(
            np.zeros((2 * h, d)), np.zeros(2 * h), np.zeros((h, 2 * h)), np.zeros(h), np.zeros((h, h)), np.zeros(h)
        )


@dataclass
class ChannelMetricParams:
    tower: TowerParams
    lam: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if self.lam.shape != (self.tower.hidden,):
            raise DimensionError("lambda diagonal must match the tower output width")


@dataclass
class EnsembleParams:
    """Everything the ensemble metric learns.

    ``agg_h`` has one weight per distance component (channels, then the ID
    table when present). ``agg_b`` is a 0-d array so it can be updated in
    place like every other entry.
    """

    channels: list
    agg_h: np.ndarray
    agg_b: np.ndarray
    id_embed: np.ndarray | None = None
    mode: str = "ensemble"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        self.agg_h = np.asarray(self.agg_h, dtype=np.float64).reshape(-1)
        self.agg_b = np.asarray(self.agg_b, dtype=np.float64).reshape(())
        if self.id_embed is not None:
            self.id_embed = np.atleast_2d(np.asarray(self.id_embed, dtype=np.float64))
        if self.agg_h.shape[0] != self.n_components:
            raise DimensionError(
                f"agg_h has {self.agg_h.shape[0]} weights for {self.n_components} distance components"
            )
        if self.mode == "single" and self.n_components != 1:
            raise ConfigError("single mode needs exactly one distance component")

    @property
    def n_components(self) -> int:
        return len(self.channels) + (self.id_embed is not None)

    @property
    def dims(self) -> tuple:
        return tuple(c.tower.input_dim for c in self.channels)

    @property
    def w(self) -> np.ndarray:
        """Aggregation weights ``(h, b)`` as one vector."""
        return np.append(self.agg_h, self.agg_b)

    def with_w(self, w) -> "EnsembleParams":
        w = np.asarray(w, dtype=np.float64)
        out = EnsembleParams(self.channels, w[:-1].copy(), w[-1], self.id_embed, self.mode)
        return out

    # -- flat views ---------------------------------------------------------

    def named_arrays(self) -> dict:
        """Name -> array references, in a fixed order (no copies)."""
        out = {}
        for m, ch in enumerate(self.channels):
            for name in TOWER_FIELDS:
                out[f"channel{m}.{name}"] = getattr(ch.tower, name)
            out[f"channel{m}.lam"] = ch.lam
        if self.id_embed is not None:
            out["id_embed"] = self.id_embed
        out["agg_h"] = self.agg_h
        out["agg_b"] = self.agg_b
        return out

    def size(self) -> int:
        return sum(a.size for a in self.named_arrays().values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.named_arrays().values()])

    def from_vector(self, vec) -> "EnsembleParams":
        out = self.copy()
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != self.size():
            raise DimensionError(f"parameter vector has {vec.size} entries, expected {self.size()}")
        pos = 0
        for arr in out.named_arrays().values():
            arr[...] = vec[pos : pos + arr.size].reshape(arr.shape)
            pos += arr.size
        return out

    def copy(self) -> "EnsembleParams":
        chans = [
            ChannelMetricParams(TowerParams(*(getattr(c.tower, f).copy() for f in TOWER_FIELDS)), c.lam.copy())
            for c in self.channels
        ]
        return EnsembleParams(
            chans,
            self.agg_h.copy(),
            self.agg_b.copy(),
            None if self.id_embed is None else self.id_embed.copy(),
            self.mode,
        )

    def zeros_like(self) -> "EnsembleParams":
        return self.from_vector(np.zeros(self.size()))

    def validate(self) -> None:
        for m, ch in enumerate(self.channels):
            if np.any(ch.lam < 0):
                raise InvariantError(f"channel {m}: negative lambda entry")
        for name, arr in self.named_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise InvariantError(f"{name} has non-finite entries")


def parameter_count(dims, hidden: int, n_items: int = 0, p_id: int = 0, include_id: bool = False) -> int:
    """Learnable scalars of an ensemble with the given channel dims."""
    h = hidden
    per = [2 * h * d + 2 * h + h * 2 * h + h + h * h + h + h for d in dims]
    n_comp = len(dims) + int(include_id)
    return sum(per) + (n_items * p_id if include_id else 0) + n_comp + 1


def _glorot(rng, fan_out, fan_in):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_params(
    dims,
    hidden: int = 8,
    *,
    n_items: int = 0,
    p_id: int = 30,
    include_id: bool = False,
    mode: str = "ensemble",
    seed=0,
    agg_h: float = 1.0,
    agg_b: float = 0.0,
) -> EnsembleParams:
    """Glorot-uniform weights, zero biases, unit lambda."""
    rng = np.random.default_rng(seed)
    chans = []
    for d in dims:
        h = hidden
        tower = TowerParams(
            _glorot(rng, 2 * h, d), np.zeros(2 * h), _glorot(rng, h, 2 * h), np.zeros(h), _glorot(rng, h, h), np.zeros(h)
        )
        chans.append(ChannelMetricParams(tower, np.ones(h)))
    id_embed = None
    if include_id:
        if n_items < 1:
            raise ConfigError("the ID tower needs the catalog size")
        id_embed = _glorot(rng, n_items, p_id)
    n_comp = len(chans) + int(include_id)
    return EnsembleParams(chans, np.full(n_comp, agg_h), agg_b, id_embed, mode)


# --------------------------------------------------------------------------
# Towers
# --------------------------------------------------------------------------


@dataclass
class _TowerCache:
    v: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    z: np.ndarray


def _tower_forward_cached(t: TowerParams, V: np.ndarray) -> _TowerCache:
    if V.ndim != 2 or V.shape[1] != t.input_dim:
        raise DimensionError(f"tower expects input width {t.input_dim}, got {V.shape[-1]}")
    a1 = V @ t.W_o.T + t.b_o
    h1 = np.maximum(a1, 0.0)
    h2 = expit(h1 @ t.W_s.T + t.b_s)
    z = np.tanh(h2 @ t.W_t.T + t.b_t)
    return _TowerCache(V, a1, h1, h2, z)


def tower_forward(params: TowerParams, v) -> np.ndarray:
    """Embed one vector ``(d,)`` or a batch ``(n, d)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return _tower_forward_cached(params, v[None, :]).z[0]
    return _tower_forward_cached(params, v).z


def _tower_backward(t: TowerParams, cache: _TowerCache, dz: np.ndarray, grad: TowerParams) -> None:
    da3 = dz * (1.0 - cache.z**2)
    grad.W_t += da3.T @ cache.h2
    grad.b_t += da3.sum(axis=0)
    dh2 = da3 @ t.W_t
    da2 = dh2 * cache.h2 * (1.0 - cache.h2)
    grad.W_s += da2.T @ cache.h1
    grad.b_s += da2.sum(axis=0)
    da1 = (da2 @ t.W_s) * (cache.a1 > 0.0)
    grad.W_o += da1.T @ cache.v
    grad.b_o += da1.sum(axis=0)


# --------------------------------------------------------------------------
# Component distances
# --------------------------------------------------------------------------


@dataclass
class Embedding:
    """Tower outputs (and caches) for one batch of items."""

    caches: list
    id_rows: np.ndarray | None
    ids: np.ndarray

    def points(self, params: EnsembleParams, m: int) -> np.ndarray:
        """Coordinates of component ``m`` in which it is squared Euclidean."""
        if m < len(self.caches):
            return self.caches[m].z * np.sqrt(params.channels[m].lam)
        return self.id_rows


def embed(params: EnsembleParams, feats: ItemFeatures) -> Embedding:
    if len(feats.channels) != len(params.channels):
        raise DimensionError(f"items carry {len(feats.channels)} channels, metric expects {len(params.channels)}")
    caches = [_tower_forward_cached(ch.tower, V) for ch, V in zip(params.channels, feats.channels)]
    id_rows = None
    if params.id_embed is not None:
        if feats.ids.size and (feats.ids.min() < 0 or feats.ids.max() >= params.id_embed.shape[0]):
            raise DimensionError("item index outside the ID-embedding table")
        id_rows = params.id_embed[feats.ids]
    return Embedding(caches, id_rows, feats.ids)


def channel_distance(params: ChannelMetricParams, v_a, v_b) -> float:
    """Mahalanobis distance between two tower embeddings of one channel."""
    if np.any(params.lam < 0):
        raise InvariantError("negative lambda entry")
    dz = tower_forward(params.tower, v_a) - tower_forward(params.tower, v_b)
    return float(np.sum(params.lam * dz * dz))


def component_matrix(params: EnsembleParams, ea: Embedding, eb: Embedding) -> np.ndarray:
    """Component distances for every (a, b) pair, shape ``(P, na, nb)``."""
    return np.stack(
        [cdist(ea.points(params, m), eb.points(params, m), "sqeuclidean") for m in range(params.n_components)]
    )


def component_pairs(params: EnsembleParams, ea: Embedding, eb: Embedding) -> np.ndarray:
    """Component distances for aligned rows ``(a_i, b_i)``, shape ``(P, n)``."""
    out = []
    for m in range(params.n_components):
        diff = ea.points(params, m) - eb.points(params, m)
        out.append(np.einsum("ij,ij->i", diff, diff))
    return np.stack(out) if out else np.zeros((0, len(ea.ids)))


def aggregate(params: EnsembleParams, C: np.ndarray) -> np.ndarray:
    if params.mode == "single":
        return C[0].copy()
    s = np.tensordot(params.agg_h, C, axes=1) + params.agg_b
    return expit(s)


def _aggregate_backward(params: EnsembleParams, C: np.ndarray, D: np.ndarray, W: np.ndarray, grad: EnsembleParams):
    """Return upstream weights on each component; accumulate (h, b) grads."""
    if params.mode == "single":
        return W[None, ...]
    ds = W * D * (1.0 - D)
    grad.agg_h += np.tensordot(C, ds, axes=(tuple(range(1, C.ndim)), tuple(range(ds.ndim))))
    grad.agg_b += ds.sum()
    return params.agg_h.reshape((-1,) + (1,) * ds.ndim) * ds


def _embedding_backward(params: EnsembleParams, e: Embedding, dpoints: list, grad: EnsembleParams) -> None:
    """Push gradients w.r.t. component coordinates back to parameters.

    ``dpoints[m]`` is d(loss)/d(raw tower output z) for channels; for the ID
    component it is d(loss)/d(embedding rows).
    """
    for m, ch in enumerate(params.channels):
        if dpoints[m] is not None:
            _tower_backward(ch.tower, e.caches[m], dpoints[m], grad.channels[m].tower)
    if params.id_embed is not None and dpoints[-1] is not None:
        np.add.at(grad.id_embed, e.ids, dpoints[-1])


def _cross_backward(params, ea, eb, U, grad, same):
    """Backward of ``sum_m sum_ab U[m,a,b] C_m(a,b)`` for cross matrices."""
    da, db = [], []
    for m in range(params.n_components):
        Um = U[m]
        rs, cs = Um.sum(axis=1), Um.sum(axis=0)
        if m < len(params.channels):
            lam = params.channels[m].lam
            Za, Zb = ea.caches[m].z, eb.caches[m].z
        else:
            lam = 1.0
            Za, Zb = ea.id_rows, eb.id_rows
        ga = 2.0 * lam * (rs[:, None] * Za - Um @ Zb)
        gb = 2.0 * lam * (cs[:, None] * Zb - Um.T @ Za)
        if m < len(params.channels):
            grad.channels[m].lam += rs @ (Za * Za) + cs @ (Zb * Zb) - 2.0 * np.sum((Za.T @ Um) * Zb.T, axis=1)
        if same:
            da.append(ga + gb)
            db.append(None)
        else:
            da.append(ga)
            db.append(gb)
    _embedding_backward(params, ea, da, grad)
    if not same:
        _embedding_backward(params, eb, db, grad)


def _pair_backward(params, ea, eb, U, grad):
    """Backward of ``sum_m sum_i U[m,i] C_m(a_i,b_i)`` for aligned pairs."""
    da, db = [], []
    for m in range(params.n_components):
        if m < len(params.channels):
            lam = params.channels[m].lam
            diff = ea.caches[m].z - eb.caches[m].z
            grad.channels[m].lam += U[m] @ (diff * diff)
        else:
            lam = 1.0
            diff = ea.id_rows - eb.id_rows
        g = 2.0 * lam * U[m][:, None] * diff
        da.append(g)
        db.append(-g)
    _embedding_backward(params, ea, da, grad)
    _embedding_backward(params, eb, db, grad)


# --------------------------------------------------------------------------
# Public distance API
# --------------------------------------------------------------------------


def distance_matrix(params: EnsembleParams, fa: ItemFeatures, fb: ItemFeatures | None = None) -> np.ndarray:
    """Metric for every pair across two item batches (``fb=None``: within ``fa``)."""
    ea = embed(params, fa)
    eb = ea if fb is None else embed(params, fb)
    return aggregate(params, component_matrix(params, ea, eb))


def distance_matrix_backward(
    params: EnsembleParams, fa: ItemFeatures, fb: ItemFeatures | None, W: np.ndarray
) -> EnsembleParams:
    """Gradient of ``sum(W * distance_matrix(params, fa, fb))``."""
    same = fb is None
    ea = embed(params, fa)
    eb = ea if same else embed(params, fb)
    C = component_matrix(params, ea, eb)
    D = aggregate(params, C)
    grad = params.zeros_like()
    U = _aggregate_backward(params, C, D, np.asarray(W, dtype=np.float64), grad)
    _cross_backward(params, ea, eb, U, grad, same)
    return grad


def pair_distances(params: EnsembleParams, fa: ItemFeatures, fb: ItemFeatures) -> np.ndarray:
    """Metric for aligned pairs ``(fa[i], fb[i])``."""
    if len(fa) != len(fb):
        raise DimensionError("pair batches differ in length")
    ea, eb = embed(params, fa), embed(params, fb)
    return aggregate(params, component_pairs(params, ea, eb))


def pair_distances_backward(params: EnsembleParams, fa: ItemFeatures, fb: ItemFeatures, w) -> EnsembleParams:
    """Gradient of ``sum(w * pair_distances(params, fa, fb))``."""
    ea, eb = embed(params, fa), embed(params, fb)
    C = component_pairs(params, ea, eb)
    D = aggregate(params, C)
    grad = params.zeros_like()
    U = _aggregate_backward(params, C, D, np.asarray(w, dtype=np.float64), grad)
    _pair_backward(params, ea, eb, U, grad)
    return grad


def ensemble_distance(params: EnsembleParams, x_a: ItemFeatures, x_b: ItemFeatures) -> float:
    """Metric between two single items."""
    return float(pair_distances(params, x_a, x_b)[0])


def backward(params: EnsembleParams, x_a: ItemFeatures, x_b: ItemFeatures) -> EnsembleParams:
    """Gradient of ``ensemble_distance(params, x_a, x_b)`` w.r.t. all parameters."""
    return pair_distances_backward(params, x_a, x_b, np.ones(1))


# --------------------------------------------------------------------------
# Contrastive baseline
# --------------------------------------------------------------------------


@dataclass
class PairBatch:
    """Index-encoded pairs: rows ``a``, ``b`` of a feature view and labels."""

    a: np.ndarray
    b: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if not (self.a.shape == self.b.shape == self.y.shape):
            raise DimensionError("pair arrays differ in length")

    @classmethod
    def from_examples(cls, examples, catalog) -> "PairBatch":
        examples = list(examples)
        return cls(
            catalog.indices(p.a for p in examples),
            catalog.indices(p.b for p in examples),
            [p.label for p in examples],
        )

    def __len__(self):
        return int(self.a.shape[0])

    def subset(self, idx) -> "PairBatch":
        return PairBatch(self.a[idx], self.b[idx], self.y[idx])


def _check_margin(params, margin_tau):
    if margin_tau <= 0:
        raise ConfigError("contrastive margin must be positive")
    if params.mode == "ensemble" and margin_tau >= 1.0:
        warnings.warn(
            "margin >= 1 with a sigmoid-bounded distance keeps every dissimilar hinge active",
            RuntimeWarning,
            stacklevel=3,
        )


def contrastive_loss_and_grad(params: EnsembleParams, features: ItemFeatures, pairs: PairBatch, margin_tau: float = 1.0):
    global empty_pair_warnings
    if len(pairs) == 0:
        empty_pair_warnings += 1
        warnings.warn("contrastive loss over an empty pair list", RuntimeWarning, stacklevel=2)
        return 0.0, params.zeros_like()
    fa, fb = features.take(pairs.a), features.take(pairs.b)
    D = pair_distances(params, fa, fb)
    y = pairs.y
    loss = float(np.sum((1.0 - y) * D + y * np.maximum(0.0, margin_tau - D)))
    w = (1.0 - y) - y * (D < margin_tau)
    return loss, pair_distances_backward(params, fa, fb, w)


def contrastive_loss(params: EnsembleParams, features: ItemFeatures, pairs: PairBatch, margin_tau: float = 1.0) -> float:
    """Sum of ``(1-y) D + y max(0, tau - D)`` over the pairs."""
    _check_margin(params, margin_tau)
    return contrastive_loss_and_grad(params, features, pairs, margin_tau)[0]


@dataclass
class BaselineConfig:
    steps: int = 500
    learning_rate: float = 1e-2
    optimizer: str = "adaptive-moment"
    margin_tau: float = 0.9
    batch_pairs: int | None = None
    seed: int = 0
    frozen: tuple = ()
    learn_lambda: bool = False


def train_siamese_baseline(
    pairs: PairBatch, init: EnsembleParams, config: BaselineConfig, features: ItemFeatures
):
    """Fit the ensemble on labelled pairs by descending the contrastive loss.

    Returns ``(params, losses)`` where ``losses[s]`` is the (mini-batch) loss
    before step ``s``. ``init`` is never modified.
    """
    from .optim import ParamView, make_optimizer

    if len(pairs) == 0:
        raise ConfigError("training needs at least one pair")
    if config.learning_rate < 0:
        raise ConfigError("learning rate must be non-negative")
    _check_margin(init, config.margin_tau)
    params = init.copy()
    frozen = set(config.frozen)
    if not config.learn_lambda:
        frozen.add("lambda")
    view = ParamView(params, frozen=frozen, learn_lambda=config.learn_lambda)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    losses = []
    for step in range(config.steps):
        batch = pairs
        if config.batch_pairs and config.batch_pairs < len(pairs):
            batch = pairs.subset(rng.choice(len(pairs), size=config.batch_pairs, replace=False))
        loss, grad = contrastive_loss_and_grad(params, features, batch, config.margin_tau)
        g = view.gradient(grad)
        if not (np.isfinite(loss) and all(np.all(np.isfinite(v)) for v in g.values())):
            raise DivergenceError("non-finite contrastive loss or gradient", step=step, trace=losses)
        losses.append(loss)
        opt.step(view.variables, g)
        view.write_back()
    return params, losses
