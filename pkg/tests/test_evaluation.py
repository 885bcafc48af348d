import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itemmetric.data import ItemCatalog, MetaChannel
from itemmetric.evaluation import (
    CatalogMetric,
    RankedList,
    RankingReport,
    evaluate,
    hr_at_k,
    mrr_at_k,
    ndcg_at_k,
    rank_items,
)
from itemmetric.exceptions import ConfigError, DataError
from itemmetric.siamese import distance_matrix, init_params


def brute_scores(ranked, G, k):
    """Independent reimplementation straight from the definitions."""
    hits = [1 if x in G else 0 for x in ranked]
    hr = sum(hits) / k
    mrr = 0.0
    for i, h in enumerate(hits, start=1):
        if h:
            mrr = 1.0 / i
            break
    disc = [1.0 if i == 1 else 1.0 / math.log2(i) for i in range(1, len(hits) + 1)]
    dcg = sum(d for d, h in zip(disc, hits) if h)
    idcg = sum(disc[: sum(hits)])
    return hr, mrr, (dcg / idcg if idcg else 0.0)


def rl(items, k=None):
    return RankedList("q", list(items), np.zeros(len(items)), k or len(items))


def test_hit_rate_examples():
    assert hr_at_k(rl(range(10)), {3, 7}) == 0.2
    assert hr_at_k(rl(range(10)), set()) == 0.0
    assert hr_at_k(rl(range(3), k=10), {0, 1, 2}) == 0.3


def test_mrr_examples():
    assert mrr_at_k(rl("abc"), {"a"}) == 1.0
    assert mrr_at_k(rl("abc"), {"c"}) == pytest.approx(1 / 3)
    assert mrr_at_k(rl("abc"), {"z"}) == 0.0


def test_ndcg_examples():
    assert ndcg_at_k(rl("abc"), {"a", "b"}) == 1.0
    expected = (1 + 1 / math.log2(3)) / 2
    assert ndcg_at_k(rl("abc"), {"a", "c"}) == pytest.approx(expected, abs=1e-15)
    assert round(expected, 4) == 0.8155
    assert ndcg_at_k(rl("abc"), set()) == 0.0


def test_rank_constant_metric_tie_break():
    cands = list(range(20))
    out = rank_items(lambda q, c: np.zeros(len(c)), 99, cands[::-1], k=5)
    assert out.ranked == [0, 1, 2, 3, 4]


def test_rank_selects_smallest_and_skips_query():
    d = {"a": 0.3, "b": 0.1, "c": 0.5, "d": 0.2, "e": 0.4}
    index = {c: i for i, c in enumerate("abcde")}
    out = rank_items(lambda q, c: np.array([d[x] for x in c]), "zz", list("abcde"), k=3, index=index)
    assert out.ranked == ["b", "d", "a"]
    assert np.allclose(out.distances, [0.1, 0.2, 0.3])
    out = rank_items(lambda q, c: np.array([d[x] for x in c]), "b", list("abcde"), k=3, index=index)
    assert "b" not in out.ranked


def test_rank_truncation_and_errors():
    with pytest.warns(RuntimeWarning):
        out = rank_items(lambda q, c: np.arange(len(c), dtype=float), 0, [0, 1, 2], k=5)
    assert out.truncated and out.ranked == [1, 2]
    with pytest.raises(ConfigError):
        rank_items(lambda q, c: np.zeros(len(c)), 0, [1], k=0)
    with pytest.raises(DataError):
        rank_items(lambda q, c: np.zeros(len(c)), 0, [], k=1)


def test_rank_matches_full_sort(rng):
    cands = list(range(1000))
    dist = np.round(rng.uniform(size=1000), 2)  # plenty of ties
    out = rank_items(lambda q, c: dist[np.asarray(c)], -1, cands, k=50)
    oracle = sorted(cands, key=lambda c: (dist[c], c))[:50]
    assert out.ranked == oracle


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.integers(0, 30), min_size=0, max_size=15, unique=True),
    st.sets(st.integers(0, 30), max_size=12),
    st.integers(1, 15),
)
def test_scores_match_brute_force(ranked, G, k):
    ranked = ranked[:k]
    r = RankedList("q", ranked, np.zeros(len(ranked)), k)
    hr, mrr, ndcg = brute_scores(ranked, G, k)
    assert hr_at_k(r, G) == hr
    assert mrr_at_k(r, G) == mrr
    assert abs(ndcg_at_k(r, G) - ndcg) <= 1e-12


def test_evaluate_means_and_empty():
    cands = ["a", "b", "c", "d"]
    index = {c: i for i, c in enumerate(cands)}
    ev = lambda q, c: np.array([float(index[x]) for x in c])  # noqa: E731
    G = {"a": {"b"}, "d": set()}
    rep = evaluate(ev, ["a", "d"], cands, G, k=1, index=index)
    assert rep.per_query[0] == ("a", 1.0, 1.0, 1.0)
    assert rep.per_query[1] == ("d", 0.0, 0.0, 0.0)
    assert rep.mean_hr == 0.5 and rep.mean_mrr == 0.5 and rep.num_empty == 1
    with pytest.raises(DataError):
        evaluate(ev, ["zz"], cands, G, k=1, index=index)


def test_evaluate_matches_brute_force_on_catalog(rng):
    items = [f"i{k}" for k in range(40)]
    cat = ItemCatalog(items, [MetaChannel("x", "dense", 3, {i: rng.normal(size=3) for i in items})])
    params = init_params((3,), 4, seed=2)
    metric = CatalogMetric(params, cat)
    G = {i: set(rng.choice(items, size=int(rng.integers(0, 6)), replace=False)) - {i} for i in items}
    queries = items[:20]
    rep = evaluate(metric, queries, items, G, k=10)
    D = distance_matrix(params, cat.features)
    for row, q in zip(rep.per_query, queries):
        qi = cat.id_index[q]
        order = sorted((j for j in range(40) if j != qi), key=lambda j: (D[qi, j], j))[:10]
        expect = brute_scores([items[j] for j in order], G[q], 10)
        assert row[1] == expect[0] and row[2] == expect[1] and abs(row[3] - expect[2]) <= 1e-12
    # the block path and the per-query callable agree
    rep2 = evaluate(lambda q, c: metric(q, c), queries, items, G, k=10, index=cat.id_index)
    assert rep2.per_query == rep.per_query


def test_report_csv(tmp_path):
    rep = RankingReport(10, [("a", 0.1, 1.0, 1.0), ("b", 0.0, 0.0, 0.0)], 1)
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "query,hr,mrr,ndcg" and lines[-1] == "mean,0.05,0.5,0.5"
    assert rep.summary()["num_empty"] == 1
