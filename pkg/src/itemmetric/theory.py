"""Approximation-error theory as runnable experiments.

An :class:`OracleWorld` fixes a true metric ``D*`` (scaled squared Euclidean
on random points), its kernel ``k* = exp(-D*/2)`` and the constants the
bounds need:

* ``lambda_max`` of the oracle Gram ``K*``,
* ``d = lambda_max / min k*`` (the tightest constant with
  ``d inf k* >= lambda_max``),
* ``alpha``, the residual constant, measured a posteriori from a fit.

With ``g(tau) = log(tau) + 1/tau - 1`` the tail bound is
``exp(-n g(tau) / 2)`` at ``tau = (sigma^4/alpha)(1 - c_eps) lambda_max``,
``c_eps = eps lambda_max / d``; setting it to ``delta`` gives the sample size
``ceil((2/g) log(1/delta))``. A multiplicative kernel error ``eps`` bounds
the metric error by ``2 log(1/(1-eps))``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .data import ItemFeatures
from .exceptions import DomainError, ItemMetricError
from .gp import GPState, fitted_values, robust_cholesky
from .siamese import ChannelMetricParams, EnsembleParams, TowerParams, init_params, pair_distances
from .ssl import TrainConfig, fit_ssl

logger = logging.getLogger(__name__)

REPORT_HEADER = ("n", "trial", "sup_gap", "eps_hat", "lemma_bound", "theorem1_tail")
DEFAULT_SCALE = 4.0
LEMMA_TOL = 1e-12


# --------------------------------------------------------------------------
# Oracle worlds
# --------------------------------------------------------------------------


@dataclass
class OracleWorld:
    points: np.ndarray
    scale: float
    K_star: np.ndarray
    lambda_max: float
    d_const: float
    sigma2: float
    alpha_const: float | None = None

    @property
    def n(self) -> int:
        return self.K_star.shape[0]

    def metric(self, xa, xb) -> np.ndarray:
        """``D*`` for aligned rows of ``xa`` and ``xb``."""
        diff = np.atleast_2d(xa) - np.atleast_2d(xb)
        return self.scale * np.sum(diff * diff, axis=1)

    def kernel(self, xa, xb) -> np.ndarray:
        return np.exp(-0.5 * self.metric(xa, xb))

    def with_constants(self, **kw) -> "OracleWorld":
        out = OracleWorld(**{f: getattr(self, f) for f in self.__dataclass_fields__})
        for k, v in kw.items():
            setattr(out, k, v)
        return out

    @classmethod
    def from_gram(cls, K, sigma2: float = 0.01) -> "OracleWorld":
        """A world given only by its Gram (no points; for identity checks)."""
        K = np.asarray(K, dtype=np.float64)
        lam = float(np.linalg.eigvalsh(K)[-1])
        kmin = float(K.min())
        d = lam / kmin if kmin > 0 else math.inf
        return cls(np.zeros((K.shape[0], 0)), 0.0, K, lam, d, float(sigma2))


def make_oracle(n: int, dim: int = 2, seed=0, sigma2: float = 0.01, scale: float = DEFAULT_SCALE, points=None):
    """Random points in the unit cube with ``D* = scale * ||x - x'||^2``."""
    if points is None:
        if n < 2:
            raise DomainError("an oracle world needs n >= 2")
        points = np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, dim))
    points = np.asarray(points, dtype=np.float64)
    K = np.exp(-0.5 * scale * cdist(points, points, "sqeuclidean"))
    K = 0.5 * (K + K.T)
    lam = float(np.linalg.eigvalsh(K)[-1])
    d = lam / float(K.min())
    return OracleWorld(points, float(scale), K, lam, d, float(sigma2))


def sample_surrogate(world: OracleWorld, seed=0, size: int | None = None) -> np.ndarray:
    """Draws ``r ~ N(0, K*)`` (one vector, or ``size`` rows)."""
    L, jitter = robust_cholesky(world.K_star)
    if jitter:
        logger.debug("oracle Gram needed jitter %g", jitter)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((world.n,) if size is None else (size, world.n))
    return z @ L.T


def eval_pairs(world: OracleWorld, seed=0, extra_per_point: int = 10):
    """All pairs of world points plus ``extra_per_point * n`` random held-out pairs."""
    iu, ju = np.triu_indices(world.n, k=1)
    xa, xb = world.points[iu], world.points[ju]
    m = extra_per_point * world.n
    if m and world.points.shape[1]:
        rng = np.random.default_rng(seed)
        dim = world.points.shape[1]
        xa = np.vstack([xa, rng.uniform(size=(m, dim))])
        xb = np.vstack([xb, rng.uniform(size=(m, dim))])
    return xa, xb


# --------------------------------------------------------------------------
# Bounds
# --------------------------------------------------------------------------


def metric_gap_bound(eps: float) -> float:
    """``2 log(1/(1 - eps))`` for ``0 < eps < 1``."""
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps={eps} outside (0, 1)")
    return -2.0 * math.log1p(-eps)


@dataclass
class LemmaCheck:
    eps_hat: float
    max_gap: float
    bound: float
    holds: bool
    defined: bool


def check_lemma(k_hat, world: OracleWorld, pairs) -> LemmaCheck:
    """Compare the measured metric gap with the bound implied by the kernel error.

    ``k_hat(xa, xb)`` gives the approximate kernel on aligned rows and
    ``pairs = (xa, xb)``. The learned metric is read back as
    ``-2 log k_hat``. ``holds`` allows a relative rounding slack of 1e-12.
    """
    xa, xb = pairs
    k = np.asarray(k_hat(xa, xb), dtype=np.float64)
    ks = world.kernel(xa, xb)
    eps_hat = float(np.max(np.abs(k - ks) / ks))
    gap = float(np.max(np.abs(-2.0 * np.log(k) - world.metric(xa, xb))))
    if not eps_hat < 1.0:
        return LemmaCheck(eps_hat, gap, math.nan, False, False)
    bound = -2.0 * math.log1p(-eps_hat)
    return LemmaCheck(eps_hat, gap, bound, gap <= bound + LEMMA_TOL * max(1.0, bound), True)


def g_fn(tau: float) -> float:
    """``g(tau) = log(tau) + 1/tau - 1`` (>= 0, zero only at 1)."""
    if not tau > 0:
        raise DomainError(f"g needs a positive argument, got {tau}")
    return math.log(tau) + 1.0 / tau - 1.0


def tail_argument(eps: float, world: OracleWorld) -> float:
    """``(sigma^4/alpha)(1 - c_eps) lambda_max`` with ``c_eps = eps lambda_max / d``."""
    if world.alpha_const is None or not world.alpha_const > 0:
        raise DomainError("the residual constant alpha must be positive")
    c_eps = eps * world.lambda_max / world.d_const
    if not c_eps < 1.0:
        raise DomainError(f"c_eps={c_eps} >= 1")
    tau = world.sigma2**2 / world.alpha_const * (1.0 - c_eps) * world.lambda_max
    if not tau > 0:
        raise DomainError(f"non-positive tail argument {tau}")
    return tau


def tail_from_tau(n: int, tau: float) -> float:
    return math.exp(-0.5 * n * g_fn(tau))


def theorem1_tail(n: int, eps: float, world: OracleWorld) -> float:
    """``exp(-n g(tau) / 2)``, the probability bound on a kernel error above ``eps``."""
    return tail_from_tau(n, tail_argument(eps, world))


def theorem1_log_tail(n: int, eps: float, world: OracleWorld) -> float:
    """Natural log of :func:`theorem1_tail`; finite where the tail underflows to 0."""
    return -0.5 * n * g_fn(tail_argument(eps, world))


def n_required(g_eps: float, delta: float) -> int:
    """Smallest integer ``n >= (2/g_eps) log(1/delta)``."""
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta={delta} outside (0, 1)")
    if not g_eps > 0:
        raise DomainError(f"g_eps={g_eps} must be positive")
    return int(math.ceil(2.0 / g_eps * math.log(1.0 / delta)))


def theorem2_sample_complexity(eps: float, delta: float, world: OracleWorld) -> int:
    """Sample size at which the tail bound drops to ``delta``."""
    return n_required(g_fn(tail_argument(eps, world)), delta)


def residual_alpha(K, r, sigma2: float, sup_kernel_gap: float) -> float:
    """Tightest residual constant: ``(1 - sup|k - k*|) (r - r_hat)^T A (r - r_hat)``.

    ``A = (K + sigma2 I)^2 / n`` and ``r_hat = K (K + sigma2 I)^-1 r``.
    """
    n = K.shape[0]
    M = K + sigma2 * np.eye(n)
    resid = r - K @ np.linalg.solve(M, r)
    Mres = M @ resid
    quad = float(Mres @ Mres) / n
    return (1.0 - sup_kernel_gap) * quad


def residual_identity_gap(state: GPState) -> float:
    """Max deviation between ``r - r_hat`` and ``sigma2 (K + sigma2 I)^-1 r``."""
    lhs = state.r - fitted_values(state)
    s2 = state.noise_total
    M = state.K + s2 * np.eye(state.n)
    rhs = s2 * np.linalg.solve(M, state.r)
    return float(np.max(np.abs(lhs - rhs)))


def mgf_identity_check(world: OracleWorld, lambda_scalar: float, A, draws: int = 100_000, seed=0):
    """Monte-Carlo ``E[exp(lambda r^T A r)]`` against ``det(I - 2 lambda A K*)^-1/2``.

    Returns ``(monte_carlo, closed_form, rel_err)``.
    """
    A = np.asarray(A, dtype=np.float64)
    K = world.K_star
    M = np.eye(world.n) - 2.0 * lambda_scalar * A @ K
    eig = np.linalg.eigvals(M)
    if np.any(np.abs(eig.imag) > 1e-9) or np.any(eig.real <= 0):
        raise DomainError("I - 2 lambda A K* is not positive definite; the MGF is infinite")
    closed = float(np.prod(eig.real) ** -0.5)
    r = sample_surrogate(world, seed, size=draws)
    quad = np.einsum("ij,jk,ik->i", r, A, r)
    mc = float(np.mean(np.exp(lambda_scalar * quad)))
    return mc, closed, abs(mc - closed) / closed


# --------------------------------------------------------------------------
# Convergence experiment
# --------------------------------------------------------------------------


@dataclass
class FittedMetric:
    """What a fit hands back: a distance on aligned point rows and the noise."""

    distance: object
    sigma2: float


def linear_tower(d: int) -> TowerParams:
    """A tower that is nearly linear on ``[-1/2, 1/2]^d``: ``F(x) ~ x / 4``.

    The relu layer splits ``x`` into positive and negative parts, the
    sigmoid layer recombines them (``sigmoid(x) - 1/2 ~ x/4``) and the tanh
    layer is centered by its bias. The largest relative deviation from
    ``x/4`` on the cube is about 2%.
    """
    eye = np.eye(d)
    return TowerParams(np.vstack([eye, -eye]), np.zeros(2 * d), np.hstack([eye, -eye]), np.zeros(d), eye, -0.5 * np.ones(d))


def scale_model(dim: int) -> EnsembleParams:
    """Single-channel metric on the fixed near-linear tower, ``D ~ ||x - x'||^2`` at start."""
    return EnsembleParams([ChannelMetricParams(linear_tower(dim), 16.0 * np.ones(dim))], [1.0], 0.0, None, "single")


def default_fit(world: OracleWorld, r, seed, config: TrainConfig | None = None, model: str = "scales", hidden: int = 8):
    """Fit the metric on the world's centered coordinates by the GP NLL.

    ``model="scales"`` (default) freezes the near-linear tower and learns the
    diagonal scales and the noise. ``model="tower"`` trains a Glorot-initialized
    tower of width ``hidden`` as well.
    """
    dim = world.points.shape[1]
    if model == "scales":
        init = scale_model(dim)
        config = config or TrainConfig(
            steps=1500, learning_rate=0.1, learn_lambda=True, frozen=("towers",), eval_every=25, noise_init=0.01, seed=seed
        )
    elif model == "tower":
        init = init_params((dim,), hidden, mode="single", seed=seed)
        config = config or TrainConfig(steps=1500, learning_rate=0.03, learn_lambda=True, eval_every=25, noise_init=0.01, seed=seed)
    else:
        raise DomainError(f"unknown model {model!r}")
    X = ItemFeatures((world.points - 0.5,), np.arange(world.n))
    state, _ = fit_ssl(X, np.arange(world.n), r, init, config)
    params = state.metric

    def distance(xa, xb):
        fa = ItemFeatures((np.atleast_2d(xa) - 0.5,), np.zeros(len(xa), dtype=np.int64))
        fb = ItemFeatures((np.atleast_2d(xb) - 0.5,), np.zeros(len(xb), dtype=np.int64))
        return pair_distances(params, fa, fb)

    return FittedMetric(distance, state.sigma2)


def oracle_fit(world: OracleWorld, r, seed) -> FittedMetric:
    """The rigged fit: returns the true metric itself."""
    return FittedMetric(world.metric, world.sigma2)


@dataclass
class TrialResult:
    n: int
    trial: int
    sup_gap: float
    eps_hat: float
    lemma_bound: float
    theorem1_tail: float
    sup_kernel_gap: float = math.nan
    alpha: float = math.nan
    sigma2: float = math.nan
    lambda_max: float = math.nan
    d_const: float = math.nan
    holds: bool = True


@dataclass
class TheoryReport:
    n_grid: list
    trials: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)
    delta: float = 0.05

    def _per_n(self, attr):
        out = []
        for n in self.n_grid:
            vals = np.array([getattr(t, attr) for t in self.trials if t.n == n], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            out.append(float(vals.mean()) if vals.size else math.nan)
        return out

    @property
    def measured_sup_metric_gap(self):
        return self._per_n("sup_gap")

    @property
    def lemma_bound(self):
        return self._per_n("lemma_bound")

    @property
    def theorem1_bound(self):
        return self._per_n("theorem1_tail")

    @property
    def theorem2_n_required(self):
        """Sample size for ``delta`` at the largest-n trials' mean constants (None if undefined)."""
        big = [t for t in self.trials if t.n == max(self.n_grid) and t.eps_hat < 1]
        if not big:
            return None
        world = OracleWorld(
            np.zeros((0, 0)),
            0.0,
            np.zeros((0, 0)),
            float(np.mean([t.lambda_max for t in big])),
            float(np.mean([t.d_const for t in big])),
            float(np.mean([t.sigma2 for t in big])),
            float(np.mean([t.alpha for t in big])),
        )
        try:
            return theorem2_sample_complexity(float(np.mean([t.eps_hat for t in big])), self.delta, world)
        except DomainError:
            return None

    @property
    def violations(self) -> int:
        return sum(1 for t in self.trials if t.eps_hat < 1 and not t.holds)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for t in self.trials:
                w.writerow([t.n, t.trial] + [repr(float(v)) for v in (t.sup_gap, t.eps_hat, t.lemma_bound, t.theorem1_tail)])

    def summary_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "mean_sup_gap", "mean_lemma_bound", "mean_theorem1_tail", "failed_trials"])
            for n, g, lb, t1 in zip(self.n_grid, self.measured_sup_metric_gap, self.lemma_bound, self.theorem1_bound):
                w.writerow([n, repr(g), repr(lb), repr(t1), self.failed.get(n, 0)])
            w.writerow(["theorem2_n_required", self.theorem2_n_required, "", "", ""])


def run_trial(n: int, trial: int, seed, dim=2, scale=DEFAULT_SCALE, sigma2=0.01, fit_fn=None, model="scales") -> TrialResult:
    ss = np.random.SeedSequence([int(seed) ^ int(trial), int(n)])
    s_world, s_r, s_fit, s_pairs = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
    world = make_oracle(n, dim, s_world, sigma2, scale)
    r = sample_surrogate(world, s_r)
    fit = fit_fn(world, r, s_fit) if fit_fn else default_fit(world, r, s_fit, model=model)

    def k_hat(xa, xb):
        return np.exp(-0.5 * fit.distance(xa, xb))

    pairs = eval_pairs(world, s_pairs)
    chk = check_lemma(k_hat, world, pairs)
    xa, xb = pairs
    sup_k = float(np.max(np.abs(k_hat(xa, xb) - world.kernel(xa, xb))))

    P = world.points
    ia, ib = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    K = np.exp(-0.5 * fit.distance(P[ia.ravel()], P[ib.ravel()])).reshape(n, n)
    K = 0.5 * (K + K.T)
    alpha = residual_alpha(K, r, fit.sigma2, sup_k)
    fitted_world = world.with_constants(sigma2=fit.sigma2, alpha_const=alpha)
    tail = math.nan
    if chk.defined:
        try:
            tail = theorem1_tail(n, chk.eps_hat, fitted_world)
        except DomainError:
            pass
    return TrialResult(
        n, trial, chk.max_gap, chk.eps_hat, chk.bound, tail, sup_k, alpha, fit.sigma2,
        world.lambda_max, world.d_const, chk.holds or not chk.defined,
    )


def convergence_experiment(
    n_grid=(16, 64, 256), trials: int = 5, seed=0, dim=2, scale=DEFAULT_SCALE, sigma2=0.01, fit_fn=None, delta=0.05,
    model="scales",
) -> TheoryReport:
    """Fit on oracle-sampled targets for each ``n`` and measure the metric gap.

    Trials whose fit aborts, or whose measured values are not finite, are
    dropped and counted in ``report.failed``.
    """
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise DomainError("n_grid must be increasing")
    if trials < 1:
        raise DomainError("need at least one trial")
    report = TheoryReport(n_grid, delta=delta)
    for n in n_grid:
        for t in range(trials):
            try:
                res = run_trial(n, t, seed, dim, scale, sigma2, fit_fn, model)
            except ItemMetricError as exc:
                logger.warning("theory trial n=%d t=%d failed: %s", n, t, exc)
                report.failed[n] = report.failed.get(n, 0) + 1
                continue
            if not (np.isfinite(res.sup_gap) and np.isfinite(res.eps_hat)):
                report.failed[n] = report.failed.get(n, 0) + 1
                continue
            report.trials.append(res)
    return report
