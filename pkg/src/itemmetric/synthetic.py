"""Synthetic catalogs and interaction logs with known latent structure.

Two generators:

* :func:`make_cluster_dataset`: items belong to latent clusters that drive
  both which items users consume together and how they are rated. One
  channel is a noisy view of the cluster, the other mostly unrelated tags.
  Users mix their favourite clusters with random exploration, so
  co-interaction windows are noisy similarity labels.
* :func:`make_archetype_dataset`: items carry two cross-cutting cluster
  labels, one per channel. Each user follows one of two archetypes and
  both chooses and rates items by that archetype's channel only.

:func:`write_dataset` stores either one in the on-disk formats read by
:mod:`itemmetric.data` (interactions CSV, channel files and a manifest).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import InteractionLog, ItemCatalog, MetaChannel, write_interactions

DAY = 24 * 3600


@dataclass
class SyntheticDataset:
    log: InteractionLog
    catalog: ItemCatalog
    labels: dict
    user_groups: dict


def _item_ids(n):
    return [f"i{k:04d}" for k in range(n)]


def make_cluster_dataset(
    n_items: int = 400,
    n_users: int = 50,
    n_clusters: int = 8,
    seed=0,
    events_per_user: int = 40,
    favourites: int = 1,
    explore: float = 0.2,
    feature_noise: float = 0.6,
    tag_dim: int = 10,
    tag_signal: float = 0.3,
    rating_noise: float = 0.8,
    span_days: int = 365,
) -> SyntheticDataset:
    """Clustered catalog: channel 0 = noisy cluster centroid, channel 1 = tags.

    Items are released at random times and can only be consumed after
    release. Each user has ``favourites`` clusters and an active period;
    every event picks a released item from a favourite cluster, or with
    probability ``explore`` any released item. Ratings are the item's
    cluster level plus item and event noise.
    """
    rng = np.random.default_rng(seed)
    items = _item_ids(n_items)
    cluster = rng.permutation(np.arange(n_items) % n_clusters)
    release = np.sort(rng.uniform(0, 0.8 * span_days, n_items))
    release[: max(2, n_clusters)] = 0.0
    release = rng.permutation(release)

    centroids = rng.normal(size=(n_clusters, 6))
    dense = centroids[cluster] + feature_noise * rng.normal(size=(n_items, 6))
    tags = (rng.uniform(size=(n_items, tag_dim)) < 0.25).astype(float)
    carry = rng.uniform(size=n_items) < tag_signal
    tags[carry, cluster[carry] % tag_dim] = 1.0

    levels = rng.permutation(np.linspace(-1.5, 1.5, n_clusters))
    quality = levels[cluster] + 0.3 * rng.normal(size=n_items)

    users, its, ratings, times = [], [], [], []
    favs = {}
    for u in range(n_users):
        uid = f"u{u:03d}"
        fav = rng.choice(n_clusters, size=favourites, replace=False)
        favs[uid] = tuple(int(c) for c in fav)
        start = rng.uniform(0, 0.7 * span_days)
        t_days = np.sort(start + rng.uniform(0, 0.3 * span_days, events_per_user))
        for t in t_days:
            avail = np.flatnonzero(release <= t)
            pool = avail[np.isin(cluster[avail], fav)]
            if rng.uniform() < explore or pool.size == 0:
                pool = avail
            k = int(rng.choice(pool))
            users.append(uid)
            its.append(items[k])
            ratings.append(float(3.0 + quality[k] + rating_noise * rng.normal()))
            times.append(int(max(t, release[k]) * DAY))
    log = InteractionLog(users, its, ratings, times)
    catalog = ItemCatalog(
        items,
        [
            MetaChannel("profile", "dense", 6, dict(zip(items, dense))),
            MetaChannel("tags", "multi-hot", tag_dim, dict(zip(items, tags))),
        ],
    )
    return SyntheticDataset(log, catalog, dict(zip(items, cluster.tolist())), favs)


def make_archetype_dataset(
    n_items: int = 400,
    n_users: int = 40,
    clusters_a: int = 20,
    clusters_b: int = 20,
    seed=0,
    clusters_per_user: int = 2,
    items_per_cluster: int = 12,
    rating_gap: float = 2.0,
    rating_noise: float = 0.3,
    explore: float = 0.0,
) -> SyntheticDataset:
    """Two cross-cutting item labels; users follow one of two archetypes.

    Channel ``a`` one-hot encodes label A, channel ``b`` label B. A user of
    archetype ``"a"`` picks ``clusters_per_user`` A-clusters, consumes
    ``items_per_cluster`` items from each and rates them by the cluster
    (the first liked, the rest progressively less); archetype ``"b"`` does
    the same through label B. Archetypes alternate over users.
    """
    rng = np.random.default_rng(seed)
    items = _item_ids(n_items)
    lab_a = rng.permutation(np.arange(n_items) % clusters_a)
    lab_b = rng.permutation(np.arange(n_items) % clusters_b)
    eye_a, eye_b = np.eye(clusters_a), np.eye(clusters_b)

    users, its, ratings, times = [], [], [], []
    groups = {}
    for u in range(n_users):
        uid = f"u{u:03d}"
        arch = "a" if u % 2 == 0 else "b"
        lab, n_cl = (lab_a, clusters_a) if arch == "a" else (lab_b, clusters_b)
        groups[uid] = arch
        chosen = rng.choice(n_cl, size=clusters_per_user, replace=False)
        levels = np.linspace(rating_gap / 2, -rating_gap / 2, clusters_per_user)
        picks = []
        for c, level in zip(chosen, levels):
            members = np.flatnonzero(lab == c)
            take = rng.choice(members, size=min(items_per_cluster, members.size), replace=False)
            picks += [(int(k), level) for k in take]
        n_explore = int(round(explore * len(picks)))
        for k in rng.choice(n_items, size=n_explore, replace=False):
            picks.append((int(k), 0.0))
        order = rng.permutation(len(picks))
        t = 0
        for j in order:
            k, level = picks[j]
            t += int(rng.integers(1, 6 * 3600))
            users.append(uid)
            its.append(items[k])
            ratings.append(float(3.0 + level + rating_noise * rng.normal()))
            times.append(t)
    log = InteractionLog(users, its, ratings, times)
    catalog = ItemCatalog(
        items,
        [
            MetaChannel("a", "multi-hot", clusters_a, dict(zip(items, eye_a[lab_a]))),
            MetaChannel("b", "multi-hot", clusters_b, dict(zip(items, eye_b[lab_b]))),
        ],
    )
    labels = {it: (int(a), int(b)) for it, a, b in zip(items, lab_a, lab_b)}
    return SyntheticDataset(log, catalog, labels, groups)


def write_dataset(ds: SyntheticDataset, directory) -> Path:
    """Write ``interactions.csv``, one file per channel and ``manifest.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_interactions(ds.log, directory / "interactions.csv")
    rows = []
    for ch in ds.catalog.channels:
        if ch.kind == "dense":
            fname = f"{ch.name}.jsonl"
            with open(directory / fname, "w", encoding="utf-8") as fh:
                for item in ds.catalog.items:
                    vec = ch.values[item]
                    fh.write(json.dumps({"item": item, "vec": [float(x) for x in vec]}) + "\n")
        else:
            fname = f"{ch.name}.csv"
            with open(directory / fname, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["item"] + [f"v{j}" for j in range(ch.dim)])
                for item in ds.catalog.items:
                    vec = ch.values[item]
                    w.writerow([item] + [repr(float(x)) if ch.kind == "numeric" else str(int(x)) for x in vec])
        rows.append((ch.name, ch.kind, ch.dim, fname))
    with open(directory / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "kind", "dim", "path"])
        w.writerows(rows)
    return directory


BUNDLED_CONFIG = """\
# Small, fast settings for the bundled synthetic dataset.
[run]
seed = 0

[data]
interactions = interactions.csv
manifest = manifest.csv
test_fraction = 0.05

[baseline]
steps = 200
learning_rate = 0.01

[train]
steps = 300
learning_rate = 0.003
eval_every = 10

[personalize]
inner_rate = 0.5
outer_steps = 30
outer_rate = 0.05

[evaluate]
k = 10
users = 10

[theory]
n_grid = 16,32
trials = 2
"""


def write_bundled_dataset(directory, seed=0) -> Path:
    """The shipped example: a default :func:`make_cluster_dataset` plus ``run.ini``."""
    directory = write_dataset(make_cluster_dataset(seed=seed), directory)
    (directory / "run.ini").write_text(BUNDLED_CONFIG, encoding="utf-8")
    return directory


__all__ = [
    "SyntheticDataset",
    "make_cluster_dataset",
    "make_archetype_dataset",
    "write_dataset",
    "write_bundled_dataset",
]
