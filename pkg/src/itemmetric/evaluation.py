"""Top-k retrieval under a learned metric, scored by HR@k, MRR@k and NDCG@k.

For a query item the candidates are sorted by increasing distance, ties
broken by ascending catalog index, and the first ``k`` are compared with the
query's ground-truth set ``G``. The gain discount is ``1/log2(i)`` for rank
``i >= 2`` and 1 at rank 1.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import ItemCatalog
from .exceptions import ConfigError, DataError
from .siamese import EnsembleParams, distance_matrix

logger = logging.getLogger(__name__)

REPORT_HEADER = ("query", "hr", "mrr", "ndcg")
QUERY_BLOCK = 256


@dataclass
class RankedList:
    query: object
    ranked: list
    distances: np.ndarray
    k: int
    truncated: bool = False

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if len(self.ranked) != self.distances.shape[0]:
            raise DataError("ranked items and distances differ in length")

    def __len__(self):
        return len(self.ranked)

    def __iter__(self):
        return iter(self.ranked)


@dataclass
class RankingReport:
    k: int
    per_query: list = field(default_factory=list)
    num_empty: int = 0

    @property
    def num_queries(self) -> int:
        return len(self.per_query)

    def _mean(self, col):
        if not self.per_query:
            return 0.0
        return float(np.mean([row[col] for row in self.per_query]))

    @property
    def mean_hr(self) -> float:
        return self._mean(1)

    @property
    def mean_mrr(self) -> float:
        return self._mean(2)

    @property
    def mean_ndcg(self) -> float:
        return self._mean(3)

    def summary(self) -> dict:
        return {
            "k": self.k,
            "hr": self.mean_hr,
            "mrr": self.mean_mrr,
            "ndcg": self.mean_ndcg,
            "num_queries": self.num_queries,
            "num_empty": self.num_empty,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for q, hr, mrr, ndcg in self.per_query:
                w.writerow([q, repr(hr), repr(mrr), repr(ndcg)])
            w.writerow(["mean", repr(self.mean_hr), repr(self.mean_mrr), repr(self.mean_ndcg)])


# --------------------------------------------------------------------------
# Metric evaluators
# --------------------------------------------------------------------------


class CatalogMetric:
    """Distances between catalog items (by id) under fixed parameters."""

    def __init__(self, params: EnsembleParams, catalog: ItemCatalog):
        self.params = params
        self.catalog = catalog
        self.id_index = catalog.id_index

    def matrix(self, queries, candidates) -> np.ndarray:
        f = self.catalog.features
        qa = f.take(self.catalog.indices(queries))
        cb = f.take(self.catalog.indices(candidates))
        return distance_matrix(self.params, qa, cb)

    def __call__(self, query, candidates) -> np.ndarray:
        return self.matrix([query], candidates)[0]


def _index_of(evaluator, candidates, index):
    index = index if index is not None else getattr(evaluator, "id_index", None)
    if index is None:
        return np.asarray(candidates, dtype=np.int64)
    return np.array([index[c] for c in candidates], dtype=np.int64)


def _select(query, candidates, dist, order_index, k):
    keep = np.array([c != query for c in candidates], dtype=bool)
    cand = [c for c, m in zip(candidates, keep) if m]
    dist = np.asarray(dist, dtype=np.float64)[keep]
    idx = order_index[keep]
    order = np.lexsort((idx, dist))
    truncated = k > len(cand)
    top = order[:k]
    return RankedList(query, [cand[i] for i in top], dist[top], k, truncated)


def rank_items(evaluator, query, candidates, k: int = 10, index=None) -> RankedList:
    """The ``k`` candidates closest to ``query`` (the query itself is skipped).

    ``evaluator(query, candidates)`` returns distances. Ties go to the lower
    catalog index, taken from ``index`` or ``evaluator.id_index`` (integer
    candidates are their own index otherwise). Fewer than ``k`` candidates
    gives a shorter list with ``truncated`` set.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    candidates = list(candidates)
    if not candidates:
        raise DataError("no candidates to rank")
    out = _select(query, candidates, evaluator(query, candidates), _index_of(evaluator, candidates, index), k)
    if out.truncated:
        warnings.warn(f"only {len(out)} candidates for k={k}", RuntimeWarning, stacklevel=2)
    return out


# --------------------------------------------------------------------------
# Scores
# --------------------------------------------------------------------------


def _hits(ranked, G) -> np.ndarray:
    G = G or ()
    return np.array([x in G for x in ranked], dtype=bool)


def _k_of(ranked, k):
    if k is not None:
        return int(k)
    return int(getattr(ranked, "k", len(ranked)))


def hr_at_k(ranked, G, k: int | None = None) -> float:
    """Fraction of the ``k`` recommendations that fall in ``G``."""
    k = _k_of(ranked, k)
    return float(_hits(ranked, G).sum()) / k


def mrr_at_k(ranked, G, k: int | None = None) -> float:
    """Reciprocal rank of the first hit, 0 when there is none."""
    hits = np.flatnonzero(_hits(ranked, G))
    return 1.0 / (hits[0] + 1) if hits.size else 0.0


def _discounts(n: int) -> np.ndarray:
    d = np.ones(n)
    if n > 1:
        d[1:] = 1.0 / np.log2(np.arange(2, n + 1))
    return d


def ndcg_at_k(ranked, G, k: int | None = None) -> float:
    """DCG of the list over the DCG of its hits moved to the top (0 if no hits)."""
    hits = _hits(ranked, G)
    n_hits = int(hits.sum())
    if n_hits == 0:
        return 0.0
    disc = _discounts(hits.size)
    return float(disc[hits].sum() / disc[:n_hits].sum())


def score(ranked, G) -> tuple:
    return hr_at_k(ranked, G), mrr_at_k(ranked, G), ndcg_at_k(ranked, G)


def evaluate(evaluator, queries, candidates, G: dict, k: int = 10, index=None, label=None) -> RankingReport:
    """Rank ``candidates`` for every query and average the three scores.

    Queries whose ``G`` entry is empty score 0 and are counted in
    ``num_empty``. When ``evaluator`` has a ``matrix(queries, candidates)``
    method the distances are computed in blocks of queries.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    queries = list(queries)
    candidates = list(candidates)
    if not candidates:
        raise DataError("no candidates to rank")
    order_index = _index_of(evaluator, candidates, index)
    report = RankingReport(k)
    block = QUERY_BLOCK if hasattr(evaluator, "matrix") else 1
    truncated = 0
    for start in range(0, len(queries), block):
        qs = queries[start : start + block]
        if hasattr(evaluator, "matrix"):
            M = evaluator.matrix(qs, candidates)
        else:
            M = [evaluator(q, candidates) for q in qs]
        for q, dist in zip(qs, M):
            if q not in G:
                raise DataError(f"query {q!r} has no ground-truth entry")
            ranked = _select(q, candidates, dist, order_index, k)
            truncated += ranked.truncated
            g = G[q]
            if not g:
                report.num_empty += 1
            name = q if label is None else label(q)
            report.per_query.append((name,) + score(ranked, g))
    if truncated:
        logger.warning("%d queries had fewer than k=%d candidates", truncated, k)
    return report
