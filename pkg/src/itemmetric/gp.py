"""Gaussian-process regression with a learned-metric kernel.

The kernel is ``k(a, b) = exp(-D(a, b) / 2)`` for the ensemble metric ``D``
of :mod:`itemmetric.siamese`. Targets are zero-mean; the noise variance is
carried as ``log_noise``. Gradients of the negative log marginal likelihood
are exact: the kernel-entry sensitivities

    dNLL/dK = (A^-1 - alpha alpha^T) / 2,   A = K + noise I,  alpha = A^-1 r

are pushed through ``dK/dD = -K/2`` into the metric's reverse pass.

``exp(-D/2)`` is not a positive semidefinite kernel for every learned ``D``.
When the Gram matrix has an eigenvalue ``lam_min < -noise/2`` its spectrum
is shifted, ``A = K + (noise + s) I`` with ``s = -lam_min - noise/2``, so
``A >= (noise/2) I`` always. Without the shift the objective can be driven
to minus infinity by making ``A`` singular. Mildly negative eigenvalues are
left to the noise, which keeps the objective smooth near rank-deficient
Grams such as the constant kernel at ``h = 0``. The shift is part of the
differentiated objective: ``dNLL/dK = G - tr(G) v v^T`` with ``v`` the
bottom eigenvector, and the noise sees half its usual gradient.

The Nystrom path cannot see the spectrum of the full Gram; it shifts the
inducing block instead, by twice its negative bottom eigenvalue so that
``K_mm^-1`` stays bounded along ``v`` (a shift of exactly ``-lam_min``
would leave ``K_mm`` singular).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .data import ItemFeatures
from .exceptions import DimensionError, NumericalError
from .siamese import EnsembleParams, distance_matrix, distance_matrix_backward, pair_distances

logger = logging.getLogger(__name__)

JITTER_LADDER = (0.0,) + tuple(10.0**e for e in range(-10, -3))
VARIANCE_TOL = 1e-10
NYSTROM_SHIFT_FACTOR = 2.0
SHIFT_TOL = 1e-12
SHIFT_SLACK = 0.5


def robust_cholesky(A: np.ndarray, ladder=JITTER_LADDER):
    """Lower Cholesky factor of ``A + jitter I`` with the smallest jitter that works."""
    tried = []
    eye = np.eye(A.shape[0])
    for jitter in ladder:
        tried.append(jitter)
        try:
            L = linalg.cholesky(A + jitter * eye if jitter else A, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
        if jitter:
            logger.debug("cholesky needed jitter %g", jitter)
        return L, jitter
    raise NumericalError("matrix is not positive definite", jitter_ladder=tried)


def spectral_shift(K: np.ndarray, slack: float = 0.0):
    """``(max(0, -lam_min(K) - slack), v_min)`` for a symmetric ``K``.

    Negative eigenvalues within round-off of zero (``SHIFT_TOL`` times
    ``n max|K|``) count as zero: a rank-deficient ``K`` has a degenerate
    bottom eigenspace, where ``v_min`` and hence the gradient correction
    would be arbitrary.
    """
    lam, vec = linalg.eigh(K, subset_by_index=[0, 0])
    tol = SHIFT_TOL * K.shape[0] * max(1.0, float(np.max(np.abs(K))))
    shift = -float(lam[0]) - slack
    if shift <= tol:
        return 0.0, vec[:, 0]
    return shift, vec[:, 0]


def shifted_cholesky(K: np.ndarray, sigma2: float, psd_shift: bool = True):
    """Factor ``K + (sigma2 + shift) I``; returns ``(L, jitter, shift, v_min)``.

    ``v_min`` is None when no shift was applied.
    """
    shift, v = spectral_shift(K, SHIFT_SLACK * sigma2) if psd_shift else (0.0, None)
    L, jitter = robust_cholesky(K + (sigma2 + shift) * np.eye(K.shape[0]))
    return L, jitter, shift, (v if shift > 0.0 else None)


def shift_adjoint(G: np.ndarray, v, factor: float = 1.0) -> np.ndarray:
    """Chain ``dNLL/dA = G`` through a shift ``factor * max(0, -lam_min)`` into ``dNLL/dK``."""
    if v is None:
        return G
    return G - factor * np.trace(G) * np.outer(v, v)


def kernel(metric: EnsembleParams, x_a: ItemFeatures, x_b: ItemFeatures) -> float:
    """``exp(-D/2)`` for one pair of items."""
    return float(np.exp(-0.5 * pair_distances(metric, x_a, x_b)[0]))


def gram(metric: EnsembleParams, items: ItemFeatures, others: ItemFeatures | None = None) -> np.ndarray:
    """Kernel matrix over ``items`` (or between ``items`` and ``others``)."""
    if len(items) == 0:
        raise DimensionError("gram needs at least one item")
    K = np.exp(-0.5 * distance_matrix(metric, items, others))
    if others is None:
        K = 0.5 * (K + K.T)
    return K


@dataclass
class GPState:
    """A fitted (or to-be-fitted) GP over the training items.

    ``X`` holds the numeric features of ``train_items`` in the same order
    as ``r``. The Cholesky factor of ``K + (noise + shift + jitter) I`` is
    computed lazily and cached; ``shift`` is the spectral repair described
    in the module docstring (0 for a positive semidefinite ``K``, and always
    0 when ``psd_shift`` is off).
    """

    metric: EnsembleParams
    log_noise: float
    train_items: list
    r: np.ndarray
    X: ItemFeatures
    chol: np.ndarray | None = field(default=None, repr=False)
    jitter: float = 0.0
    psd_shift: bool = True
    shift: float = 0.0
    _shift_vec: np.ndarray | None = field(default=None, repr=False)
    _K: np.ndarray | None = field(default=None, repr=False)
    _alpha: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        self.log_noise = float(self.log_noise)
        if len(self.X) != self.r.shape[0] or len(self.train_items) != self.r.shape[0]:
            raise DimensionError("targets, items and features must align")

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.log_noise))

    @property
    def noise_total(self) -> float:
        """Diagonal added to ``K`` (noise plus spectral shift; jitter excluded)."""
        self.factorize()
        return self.sigma2 + self.shift

    @property
    def n(self) -> int:
        return self.r.shape[0]

    @property
    def K(self) -> np.ndarray:
        if self._K is None:
            self._K = gram(self.metric, self.X)
        return self._K

    def factorize(self) -> "GPState":
        if self.chol is None:
            self.chol, self.jitter, self.shift, self._shift_vec = shifted_cholesky(
                self.K, self.sigma2, self.psd_shift
            )
            self._alpha = linalg.cho_solve((self.chol, True), self.r)
        return self

    @property
    def alpha(self) -> np.ndarray:
        self.factorize()
        return self._alpha

    def with_params(self, metric=None, log_noise=None, r=None) -> "GPState":
        """A fresh (unfactorized) state sharing items and features."""
        return GPState(
            metric if metric is not None else self.metric,
            self.log_noise if log_noise is None else log_noise,
            self.train_items,
            self.r if r is None else r,
            self.X,
            psd_shift=self.psd_shift,
        )


@dataclass
class GPGradient:
    metric: EnsembleParams
    log_noise: float


def nll(state: GPState) -> float:
    """``1/2 log|A| + 1/2 r^T A^-1 r`` with ``A = K + (noise + shift) I``, via the cached factor."""
    state.factorize()
    return float(np.sum(np.log(np.diag(state.chol))) + 0.5 * state.r @ state.alpha)


def nll_dense(K: np.ndarray, r: np.ndarray, sigma2: float) -> float:
    """Same objective from a dense log-determinant and solve (no caching)."""
    A = K + sigma2 * np.eye(K.shape[0])
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        raise NumericalError("K + noise I is not positive definite")
    return float(0.5 * logdet + 0.5 * r @ np.linalg.solve(A, r))


def nll_grad(state: GPState) -> GPGradient:
    """Exact gradient of :func:`nll` w.r.t. every metric parameter and ``log_noise``."""
    state.factorize()
    Ainv = linalg.cho_solve((state.chol, True), np.eye(state.n))
    alpha = state.alpha
    G = 0.5 * (Ainv - np.outer(alpha, alpha))
    W = -0.5 * state.K * shift_adjoint(G, state._shift_vec)
    g_metric = distance_matrix_backward(state.metric, state.X, None, W)
    g_noise = 0.5 * state.sigma2 * (np.trace(Ainv) - alpha @ alpha)
    if state._shift_vec is not None:
        # d(noise + shift)/d(noise) = 1 - SHIFT_SLACK while the shift is active
        g_noise *= 1.0 - SHIFT_SLACK
    return GPGradient(g_metric, float(g_noise))


def nll_and_grad(state: GPState):
    return nll(state), nll_grad(state)


def predict(state: GPState, x_star: ItemFeatures):
    """Posterior mean and variance of the latent function at ``x_star``."""
    state.factorize()
    k_star = np.exp(-0.5 * distance_matrix(state.metric, state.X, x_star))
    mean = k_star.T @ state.alpha
    v = linalg.solve_triangular(state.chol, k_star, lower=True)
    k_ss = np.exp(-0.5 * pair_distances(state.metric, x_star, x_star))
    var = k_ss - np.sum(v * v, axis=0)
    low = var < 0
    if np.any(var < -VARIANCE_TOL):
        logger.warning("predictive variance below zero by %g", -var.min())
    if np.any(low):
        var = np.where(low, 0.0, var)
    return mean, var


def fitted_values(state: GPState) -> np.ndarray:
    """Posterior mean at the training inputs, ``K A^-1 r``.

    Satisfies ``r - r_hat = (noise + shift) A^-1 r``.
    """
    return state.K @ state.alpha


# --------------------------------------------------------------------------
# Nystrom low-rank path
# --------------------------------------------------------------------------


@dataclass
class InducingSet:
    """Inducing subset given as row positions into the GP's training items."""

    index: np.ndarray
    K_pp: np.ndarray | None = None

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64).reshape(-1)
        if self.index.size < 1:
            raise DimensionError("need at least one inducing item")

    @property
    def m(self) -> int:
        return int(self.index.size)


def choose_inducing(state: GPState, m: int, seed=0) -> InducingSet:
    """Uniformly random inducing subset of size ``min(m, n)``."""
    rng = np.random.default_rng(seed)
    m = min(int(m), state.n)
    idx = np.sort(rng.choice(state.n, size=m, replace=False))
    Xm = state.X.take(idx)
    return InducingSet(idx, gram(state.metric, Xm))


@dataclass
class _NystromParts:
    K_nm: np.ndarray
    K_mm: np.ndarray
    L_m: np.ndarray
    V: np.ndarray
    L_B: np.ndarray
    sigma2: float
    jitter: float
    shift_vec: np.ndarray | None


def _nystrom_parts(state: GPState, inducing: InducingSet) -> _NystromParts:
    if inducing.index.max() >= state.n:
        raise DimensionError("inducing index outside the training set")
    Xm = state.X.take(inducing.index)
    K_nm = gram(state.metric, state.X, Xm)
    K_mm = gram(state.metric, Xm)
    shift, v = spectral_shift(K_mm) if state.psd_shift else (0.0, None)
    if shift > 0.0:
        L_m, jitter = robust_cholesky(K_mm + NYSTROM_SHIFT_FACTOR * shift * np.eye(inducing.m))
    else:
        L_m, jitter = robust_cholesky(K_mm)
    V = linalg.solve_triangular(L_m, K_nm.T, lower=True)
    s2 = state.sigma2
    B = np.eye(inducing.m) + (V @ V.T) / s2
    L_B = linalg.cholesky(B, lower=True)
    return _NystromParts(K_nm, K_mm, L_m, V, L_B, s2, jitter, v if shift > 0.0 else None)


def nystrom_nll(state: GPState, inducing: InducingSet) -> float:
    """NLL with ``K`` replaced by ``Q = K_nm K_mm^-1 K_mn``; O(n m^2)."""
    p = _nystrom_parts(state, inducing)
    n, r = state.n, state.r
    logdet = n * np.log(p.sigma2) + 2.0 * np.sum(np.log(np.diag(p.L_B)))
    c = linalg.solve_triangular(p.L_B, p.V @ r, lower=True)
    quad = (r @ r) / p.sigma2 - (c @ c) / p.sigma2**2
    return float(0.5 * logdet + 0.5 * quad)


def nystrom_grad(state: GPState, inducing: InducingSet) -> GPGradient:
    p = _nystrom_parts(state, inducing)
    r, s2 = state.r, p.sigma2

    def Ainv_times(M):
        # (Q + s2 I)^-1 M = M/s2 - V^T B^-1 V M / s2^2
        BinvVM = linalg.cho_solve((p.L_B, True), p.V @ M)
        return M / s2 - p.V.T @ BinvVM / s2**2

    alpha = Ainv_times(r)
    # P = K_mm^-1 K_mn
    P = linalg.solve_triangular(p.L_m, p.V, lower=True, trans="T")
    GPt = 0.5 * (Ainv_times(P.T) - np.outer(alpha, P @ alpha))
    dK_nm = 2.0 * GPt
    dK_mm = -P @ GPt

    Xm = state.X.take(inducing.index)
    g = distance_matrix_backward(state.metric, state.X, Xm, -0.5 * p.K_nm * dK_nm)
    dK_mm = shift_adjoint(0.5 * (dK_mm + dK_mm.T), p.shift_vec, NYSTROM_SHIFT_FACTOR)
    g_mm = distance_matrix_backward(state.metric, Xm, None, -0.5 * p.K_mm * dK_mm)
    vec = g.to_vector() + g_mm.to_vector()

    BinvVVt = linalg.cho_solve((p.L_B, True), p.V @ p.V.T)
    tr_Ainv = state.n / s2 - np.trace(BinvVVt) / s2**2
    g_noise = 0.5 * s2 * (tr_Ainv - alpha @ alpha)
    return GPGradient(state.metric.from_vector(vec), float(g_noise))
