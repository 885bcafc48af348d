"""First-order optimizers and the trainable view over metric parameters."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .exceptions import ConfigError

OPTIMIZERS = ("plain-gradient", "momentum", "adaptive-moment")


class Optimizer:
    def __init__(self, lr: float):
        self.lr = float(lr)
        self.state: dict = {}

    def step(self, variables: dict, grads: dict) -> None:
        """Update ``variables[name]`` in place for every name in ``grads``."""
        for name, g in grads.items():
            variables[name] -= self._delta(name, g)

    def _delta(self, name, g):
        raise NotImplementedError


class GradientDescent(Optimizer):
    def _delta(self, name, g):
        return self.lr * g


class Momentum(Optimizer):
    def __init__(self, lr, beta=0.9):
        super().__init__(lr)
        self.beta = beta

    def _delta(self, name, g):
        v = self.state.get(name)
        v = g.copy() if v is None else self.beta * v + g
        self.state[name] = v
        return self.lr * v


class Adam(Optimizer):
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _delta(self, name, g):
        m, v, t = self.state.get(name, (np.zeros_like(g), np.zeros_like(g), 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * g
        v = self.beta2 * v + (1 - self.beta2) * g * g
        self.state[name] = (m, v, t)
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name: str, lr: float) -> Optimizer:
    if name == "plain-gradient":
        return GradientDescent(lr)
    if name == "momentum":
        return Momentum(lr)
    if name == "adaptive-moment":
        return Adam(lr)
    raise ConfigError(f"unknown optimizer {name!r}; choose one of {OPTIMIZERS}")


# --------------------------------------------------------------------------
# Freezing
# --------------------------------------------------------------------------


def _group_members(name: str, group: str) -> bool:
    chan, _, field = name.partition(".")
    if group == name:
        return True
    if group == "towers":
        return chan.startswith("channel") and field != "lam"
    if group == "lambda":
        return field == "lam"
    if group == "agg":
        return name in ("agg_h", "agg_b")
    if group == "id":
        return name == "id_embed"
    if group == "noise":
        return name == "log_noise"
    if group.startswith("channel"):
        return chan == group
    return False


class GradientMask:
    """Which named parameter arrays may move.

    Selectors: ``towers``, ``lambda``, ``agg``, ``agg_h``, ``agg_b``,
    ``id``, ``noise``, ``channel<m>`` or any exact array name.
    """

    def __init__(self, names, frozen=()):
        self.names = list(names)
        self.frozen_groups = tuple(frozen)
        valid = set(self.names) | {"towers", "lambda", "agg", "id", "noise"}
        valid |= {n.partition(".")[0] for n in self.names if n.startswith("channel")}
        for g in self.frozen_groups:
            if g not in valid:
                raise ConfigError(f"unknown parameter group {g!r}")
        self.active = [n for n in self.names if not any(_group_members(n, g) for g in self.frozen_groups)]

    def is_frozen(self, name: str) -> bool:
        return name not in self.active

    def apply(self, grads: dict) -> dict:
        """Copy of ``grads`` with frozen entries zeroed."""
        return {k: (v if k in self.active else np.zeros_like(v)) for k, v in grads.items()}


def freeze_mask(params, frozen=()) -> GradientMask:
    """Mask over a metric's arrays plus the GP ``log_noise`` scalar."""
    return GradientMask(list(params.named_arrays()) + ["log_noise"], frozen)


def softplus(u):
    return np.logaddexp(0.0, u)


def softplus_inv(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30.0, x, np.log(np.expm1(np.maximum(x, 1e-300))))


class ParamView:
    """Optimizer-facing variables over an :class:`EnsembleParams` (mutated in place).

    Frozen arrays are left out entirely, so optimizer state never touches
    them. With ``learn_lambda`` the lambda diagonals are optimized through
    ``lam = softplus(u)``. ``extras`` adds free scalars such as
    ``log_noise``.
    """

    def __init__(self, params, frozen=(), learn_lambda=False, extras=None):
        self.params = params
        self.extras = {k: np.asarray(v, dtype=np.float64).copy() for k, v in (extras or {}).items()}
        named = params.named_arrays()
        self.mask = GradientMask(list(named) + list(self.extras), frozen)
        self.learn_lambda = learn_lambda
        self.variables = {}
        for name in self.mask.active:
            if name in self.extras:
                self.variables[name] = self.extras[name]
            elif name.endswith(".lam") and learn_lambda:
                self.variables[name] = softplus_inv(named[name])
            else:
                self.variables[name] = named[name]

    def gradient(self, grad_params, extra_grads=None) -> dict:
        named = grad_params.named_arrays()
        out = {}
        for name in self.mask.active:
            if name in self.extras:
                out[name] = np.asarray(extra_grads[name], dtype=np.float64)
            elif name.endswith(".lam") and self.learn_lambda:
                out[name] = named[name] * expit(self.variables[name])
            else:
                out[name] = named[name]
        return out

    def write_back(self) -> None:
        if not self.learn_lambda:
            return
        named = self.params.named_arrays()
        for name, u in self.variables.items():
            if name.endswith(".lam"):
                named[name][...] = softplus(u)
