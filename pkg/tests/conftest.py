"""Shared fixtures and finite-difference helpers."""

from __future__ import annotations

import numpy as np
import pytest

from itemmetric.data import ItemFeatures
from itemmetric.siamese import init_params


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def random_instance(rng, n=None, p=None, d=None, h=None, mode="ensemble", include_id=False, lam_random=True):
    """A small random metric plus features for ``n`` items.

    Biases and scales are randomized (a fresh init has zero biases and unit
    scales, which hides mistakes in those paths).
    """
    n = n or int(rng.integers(2, 9))
    p = p or (1 if mode == "single" and not include_id else int(rng.integers(1, 4)))
    d = d or int(rng.integers(1, 5))
    h = h or int(rng.integers(1, 4))
    dims = tuple(int(rng.integers(1, d + 1)) for _ in range(p))
    params = init_params(
        dims, h, n_items=n, p_id=3, include_id=include_id, mode=mode, seed=int(rng.integers(1 << 30)),
        agg_h=1.0, agg_b=0.0,
    )
    vec = params.to_vector()
    params = params.from_vector(vec + 0.3 * rng.normal(size=vec.size))
    for ch in params.channels:
        ch.lam[...] = rng.uniform(0.5, 2.0, size=ch.lam.shape) if lam_random else 1.0
    feats = ItemFeatures(tuple(rng.normal(size=(n, k)) for k in dims), np.arange(n))
    return params, feats


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    """Store one pass/fail line for the acceptance summary."""
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
