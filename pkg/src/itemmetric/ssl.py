"""Self-supervised metric learning: fit the Siamese-kernel GP by its NLL.

The metric parameters and ``log_noise`` are moved by a first-order
optimizer on the negative log marginal likelihood of the centered surrogate
targets. Each step uses either the full training Gram, a uniformly
subsampled sub-Gram (``batch_items``) or, for large ``n``, the Nystrom
approximation. The returned state is the one with the lowest full-data NLL
seen at an evaluation point.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ItemCatalog, ItemFeatures
from .exceptions import ConfigError, DimensionError, DivergenceError, InvariantError, NumericalError
from .gp import GPState, choose_inducing, nll, nll_grad, nystrom_grad, nystrom_nll
from .optim import OPTIMIZERS, ParamView, freeze_mask, make_optimizer
from .siamese import EnsembleParams

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainTrace", "fit_ssl", "freeze_mask", "full_nll", "training_view"]

TRACE_HEADER = ("step", "nll", "grad_norm", "sigma2")


@dataclass
class TrainConfig:
    steps: int = 1000
    learning_rate: float = 1e-3
    optimizer: str = "adaptive-moment"
    batch_items: int | None = None
    seed: int = 0
    eval_every: int = 10
    noise_init: float = 0.1
    frozen: tuple = ()
    learn_lambda: bool = False
    nystrom_above: int = 4096
    inducing: int = 256

    def validate(self, n: int | None = None) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not self.noise_init > 0:
            raise ConfigError("initial noise variance must be positive")
        if self.batch_items is not None:
            if self.batch_items < 2:
                raise ConfigError("batch_items must be >= 2")
            if n is not None and self.batch_items > n:
                raise ConfigError(f"batch_items={self.batch_items} exceeds the {n} training items")


@dataclass
class TrainTrace:
    """Recorded ``(step, nll, grad_norm, sigma2)`` rows."""

    rows: list = field(default_factory=list)
    best_step: int = 0

    def append(self, step, value, grad_norm, sigma2):
        self.rows.append((int(step), float(value), float(grad_norm), float(sigma2)))

    def __len__(self):
        return len(self.rows)

    @property
    def steps(self):
        return np.array([r[0] for r in self.rows], dtype=np.int64)

    @property
    def nll(self):
        return np.array([r[1] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for step, v, g, s in self.rows:
                w.writerow([step, repr(v), repr(g), repr(s)])


def _training_features(data, train_items):
    """Features of the training items, in ``train_items`` order."""
    if isinstance(data, ItemCatalog):
        return data.features.take(data.indices(train_items))
    if isinstance(data, ItemFeatures):
        idx = np.asarray(train_items, dtype=np.int64)
        return data.take(idx)
    raise TypeError("expected an ItemCatalog or ItemFeatures")


def full_nll(state: GPState, nystrom_above: int = 4096, inducing: int = 256, seed=0) -> float:
    """Full-data objective: exact up to ``nystrom_above`` items, Nystrom beyond."""
    if state.n > nystrom_above:
        return nystrom_nll(state, choose_inducing(state, inducing, seed))
    return nll(state)


def training_view(params: EnsembleParams, config: TrainConfig, log_noise: float) -> ParamView:
    frozen = set(config.frozen)
    if not config.learn_lambda:
        frozen.add("lambda")
    return ParamView(params, frozen=frozen, learn_lambda=config.learn_lambda, extras={"log_noise": log_noise})


def fit_ssl(data, train_items, r, init: EnsembleParams, config: TrainConfig | None = None, log_noise=None):
    """Minimize the GP NLL over the metric and the noise level.

    ``data`` is an :class:`ItemCatalog` (``train_items`` are item ids) or an
    :class:`ItemFeatures` view (``train_items`` are row positions). ``init``
    and ``r`` are not modified. ``log_noise`` overrides
    ``log(config.noise_init)`` as the starting noise.

    Returns ``(state, trace)``; ``state`` holds copies of the best
    parameters seen at an evaluation point.
    """
    config = config or TrainConfig()
    train_items = list(train_items)
    r = np.array(r, dtype=np.float64).reshape(-1)
    if len(train_items) != r.shape[0]:
        raise DimensionError("r must align with train_items")
    if r.shape[0] < 1:
        raise DimensionError("need at least one training item")
    if not np.all(np.isfinite(r)):
        raise InvariantError("surrogate targets must be finite")
    config.validate(len(train_items))
    X = _training_features(data, train_items)
    if X.dims != init.dims:
        raise DimensionError(f"catalog channel dims {X.dims} do not match the metric's {init.dims}")
    init.validate()

    params = init.copy()
    ln0 = float(np.log(config.noise_init)) if log_noise is None else float(log_noise)
    view = training_view(params, config, ln0)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = r.shape[0]
    large = n > config.nystrom_above
    inducing = None
    if large and not config.batch_items:
        logger.info("n=%d > %d: using the Nystrom objective with m=%d", n, config.nystrom_above, config.inducing)

    trace = TrainTrace()
    best = (np.inf, params.copy(), ln0)

    def current_state(idx=None):
        ln = float(view.variables.get("log_noise", view.extras["log_noise"]))
        if idx is None:
            return GPState(params, ln, train_items, r, X)
        return GPState(params, ln, [train_items[i] for i in idx], r[idx], X.take(idx))

    for step in range(config.steps + 1):
        record = step % config.eval_every == 0 or step == config.steps
        batch = None
        if config.batch_items and config.batch_items < n:
            batch = np.sort(rng.choice(n, size=config.batch_items, replace=False))
        state = current_state(batch)
        try:
            if batch is None and large:
                if inducing is None:
                    inducing = choose_inducing(state, config.inducing, config.seed)
                value = nystrom_nll(state, inducing)
                grad = nystrom_grad(state, inducing)
            else:
                value = nll(state)
                grad = nll_grad(state)
        except (np.linalg.LinAlgError, NumericalError) as exc:
            raise DivergenceError(f"factorization failed: {exc}", step=step, trace=trace) from exc
        g = view.gradient(grad.metric, {"log_noise": grad.log_noise})
        gnorm = float(np.sqrt(sum(float(np.sum(v * v)) for v in g.values())))
        if not (np.isfinite(value) and np.isfinite(gnorm)):
            raise DivergenceError("non-finite NLL or gradient", step=step, trace=trace)
        if record:
            full = value if batch is None else full_nll(current_state(), config.nystrom_above, config.inducing, config.seed)
            if not np.isfinite(full):
                raise DivergenceError("non-finite full-data NLL", step=step, trace=trace)
            trace.append(step, full, gnorm, state.sigma2)
            if full < best[0]:
                best = (full, params.copy(), state.log_noise)
                trace.best_step = step
        if step == config.steps:
            break
        opt.step(view.variables, g)
        view.write_back()

    _, best_params, best_ln = best
    return GPState(best_params, best_ln, train_items, r.copy(), X), trace
