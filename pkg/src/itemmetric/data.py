"""Interaction logs, item meta-data channels, splits and derived labels.

Everything here is deterministic plumbing that turns raw
``(user, item, rating, timestamp)`` events and per-item meta vectors into
the objects the learners consume: numeric feature matrices, surrogate
rating targets, noisy similar/dissimilar pair annotations, a time-based
train/test item split and co-interaction ground truth.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from .exceptions import (
    DataError,
    DegenerateSplitError,
    DimensionError,
    EmptyLogError,
    InvariantError,
    MissingTargetError,
    ParseError,
)

logger = logging.getLogger(__name__)

INTERACTION_COLUMNS = ("user", "item", "rating", "timestamp")
CHANNEL_KINDS = ("numeric", "multi-hot", "dense")
DEFAULT_HORIZON = 30 * 24 * 3600
# other accepted headers, mapped column-for-column onto INTERACTION_COLUMNS
HEADER_ALIASES = (("userId", "movieId", "rating", "timestamp"),)


@dataclass(frozen=True)
class Interaction:
    user: Hashable
    item: Hashable
    rating: float
    timestamp: int


class InteractionLog:
    """Columnar store of interaction events, in input order."""

    def __init__(self, user, item, rating, timestamp):
        self.user = np.asarray(user, dtype=object)
        self.item = np.asarray(item, dtype=object)
        self.rating = np.asarray(rating, dtype=np.float64)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        n = len(self.user)
        if not (len(self.item) == len(self.rating) == len(self.timestamp) == n):
            raise DimensionError("interaction columns have different lengths")
        if n and not np.all(np.isfinite(self.rating)):
            raise InvariantError("ratings must be finite")
        if n and self.timestamp.min() < 0:
            raise InvariantError("timestamps must be non-negative")

    @classmethod
    def from_records(cls, records: Iterable) -> "InteractionLog":
        rows = [r if isinstance(r, Interaction) else Interaction(*r) for r in records]
        return cls(
            [r.user for r in rows],
            [r.item for r in rows],
            [r.rating for r in rows],
            [r.timestamp for r in rows],
        )

    def __len__(self) -> int:
        return len(self.user)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, r, t in zip(self.user, self.item, self.rating, self.timestamp):
            yield Interaction(u, i, float(r), int(t))

    def __getitem__(self, k: int) -> Interaction:
        return Interaction(self.user[k], self.item[k], float(self.rating[k]), int(self.timestamp[k]))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "user": self.user,
                "item": self.item,
                "rating": self.rating,
                "timestamp": self.timestamp,
            }
        )

    def select(self, mask) -> "InteractionLog":
        mask = np.asarray(mask)
        return InteractionLog(self.user[mask], self.item[mask], self.rating[mask], self.timestamp[mask])

    def restrict_items(self, items) -> "InteractionLog":
        keep = set(items)
        return self.select(np.fromiter((i in keep for i in self.item), dtype=bool, count=len(self)))

    def for_user(self, user) -> "InteractionLog":
        return self.select(self.user == user)

    def users(self) -> list:
        return _unique_in_order(self.user)

    def items(self) -> list:
        return _unique_in_order(self.item)

    def first_interaction(self) -> dict:
        """Earliest timestamp per item."""
        first: dict = {}
        for i, t in zip(self.item, self.timestamp):
            t = int(t)
            if i not in first or t < first[i]:
                first[i] = t
        return first


def _unique_in_order(values) -> list:
    seen = {}
    for v in values:
        seen.setdefault(v, None)
    return list(seen)


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return float("nan")


def load_interactions(path) -> InteractionLog:
    """Read an ``interactions.csv`` file (``user,item,rating,timestamp``).

    A MovieLens ``ratings.csv`` header (``userId,movieId,rating,timestamp``)
    is accepted as the same four columns.

    Ids are kept as strings. Ratings must be finite reals and timestamps
    non-negative integer seconds; the first offending row is reported with
    its 1-based file line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    try:
        frame = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            encoding="utf-8",
            skip_blank_lines=True,
        )
    except pd.errors.EmptyDataError:
        raise EmptyLogError(f"{path}: empty interaction file") from None
    except pd.errors.ParserError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(str(exc), line=int(m.group(1)) if m else None, path=path) from None

    header = tuple(c.strip() for c in frame.columns)
    if header != INTERACTION_COLUMNS and header not in HEADER_ALIASES:
        raise ParseError(f"header must be {','.join(INTERACTION_COLUMNS)}", line=1, path=path)
    frame.columns = list(INTERACTION_COLUMNS)
    if frame.empty:
        raise EmptyLogError(f"{path}: interaction file has no rows")

    def bad_line(mask, what):
        row = int(np.flatnonzero(mask)[0])
        raise ParseError(f"{what}: {frame.iloc[row].tolist()}", line=row + 2, path=path)

    for col in ("user", "item"):
        empty = frame[col].str.strip() == ""
        if empty.any():
            bad_line(empty.to_numpy(), f"missing {col}")

    # float() rounds correctly, so written ratings reload bit for bit
    rating = np.array([_to_float(x) for x in frame["rating"]], dtype=float)
    bad = ~np.isfinite(rating)
    if bad.any():
        bad_line(bad, "rating is not a finite number")

    ts_text = frame["timestamp"].str.strip()
    is_int = ts_text.str.fullmatch(r"\d+").to_numpy(dtype=bool)
    if not is_int.all():
        bad_line(~is_int, "timestamp is not a non-negative integer")

    log = InteractionLog(
        frame["user"].str.strip().to_numpy(dtype=object),
        frame["item"].str.strip().to_numpy(dtype=object),
        rating,
        ts_text.astype(np.int64).to_numpy(),
    )
    logger.info("loaded %d interactions from %s", len(log), path)
    return log


def write_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INTERACTION_COLUMNS)
        for row in log:
            writer.writerow([row.user, row.item, repr(row.rating), row.timestamp])


# --------------------------------------------------------------------------
# Item meta data
# --------------------------------------------------------------------------


@dataclass
class MetaChannel:
    name: str
    kind: str
    dim: int
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise DataError(f"channel {self.name!r}: unknown kind {self.kind!r}")
        self.dim = int(self.dim)
        clean = {}
        for item, vec in self.values.items():
            vec = np.asarray(vec, dtype=np.float64).reshape(-1)
            if vec.shape[0] != self.dim:
                raise DimensionError(
                    f"channel {self.name!r}: item {item!r} has length {vec.shape[0]}, expected {self.dim}"
                )
            if self.kind == "multi-hot" and not np.all((vec == 0.0) | (vec == 1.0)):
                raise InvariantError(f"channel {self.name!r}: item {item!r} is not 0/1")
            clean[item] = vec
        self.values = clean


@dataclass
class ItemFeatures:
    """Numeric view of a set of items: one matrix per channel plus item ids.

    Row ``i`` of every channel matrix describes the same item, whose
    integer catalog index is ``ids[i]`` (used by the ID-embedding tower).
    """

    channels: tuple
    ids: np.ndarray

    def __post_init__(self):
        self.channels = tuple(np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in self.channels)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        for c in self.channels:
            if c.shape[0] != self.ids.shape[0]:
                raise DimensionError("channel matrices and ids disagree on item count")

    @classmethod
    def single(cls, vectors: Sequence, item_id: int = 0) -> "ItemFeatures":
        return cls(tuple(np.asarray(v, dtype=np.float64).reshape(1, -1) for v in vectors), [item_id])

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def dims(self) -> tuple:
        return tuple(c.shape[1] for c in self.channels)

    def take(self, idx) -> "ItemFeatures":
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        return ItemFeatures(tuple(c[idx] for c in self.channels), self.ids[idx])


class ItemCatalog:
    """Ordered items with dense indices and per-channel meta vectors.

    Items absent from a channel get the zero vector in that channel.
    """

    def __init__(self, items: Sequence, channels: Sequence[MetaChannel]):
        self.items = list(items)
        if len(set(self.items)) != len(self.items):
            raise InvariantError("duplicate item ids in catalog")
        self.channels = list(channels)
        self.id_index = {item: k for k, item in enumerate(self.items)}
        mats = []
        for ch in self.channels:
            mat = np.zeros((len(self.items), ch.dim))
            missing = 0
            for item, k in self.id_index.items():
                vec = ch.values.get(item)
                if vec is None:
                    missing += 1
                else:
                    mat[k] = vec
            if missing:
                logger.info("channel %s: %d items without values (zero-filled)", ch.name, missing)
            mats.append(mat)
        self._features = ItemFeatures(tuple(mats), np.arange(len(self.items)))

    def __len__(self) -> int:
        return len(self.items)

    @property
    def features(self) -> ItemFeatures:
        return self._features

    def indices(self, items: Iterable) -> np.ndarray:
        try:
            return np.array([self.id_index[i] for i in items], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"item {exc.args[0]!r} is not in the catalog") from None

    def summary(self) -> dict:
        return {
            "n_items": len(self),
            "channels": [{"name": c.name, "kind": c.kind, "dim": c.dim} for c in self.channels],
        }


def load_channel(path, name: str, kind: str, dim: int) -> MetaChannel:
    """Read one channel file: CSV ``item,v0,...`` or JSONL ``{item, vec}``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"channel {name!r}: file {path} not found")
    values = {}
    if kind == "dense" or path.suffix in (".jsonl", ".json"):
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    values[str(rec["item"])] = [float(v) for v in rec["vec"]]
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(f"bad record ({exc})", line=lineno, path=path) from None
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0].strip() != "item":
                raise ParseError("first column must be 'item'", line=1, path=path)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    values[row[0].strip()] = [float(v) for v in row[1:]]
                except ValueError:
                    raise ParseError("non-numeric value", line=lineno, path=path) from None
    try:
        return MetaChannel(name=name, kind=kind, dim=dim, values=values)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_manifest(path) -> list:
    """Load every channel listed in a ``name,kind,dim,path`` manifest.

    Relative channel paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    channels = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["name", "kind", "dim", "path"]:
            raise ParseError("manifest header must be name,kind,dim,path", line=1, path=path)
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items()}
            try:
                dim = int(row["dim"])
            except ValueError:
                raise ParseError(f"manifest row {row['name']!r}: dim must be an integer", line=lineno, path=path) from None
            cpath = Path(row["path"])
            if not cpath.is_absolute():
                cpath = path.parent / cpath
            try:
                channels.append(load_channel(cpath, row["name"], row["kind"], dim))
            except DataError as exc:
                raise DataError(f"manifest row {lineno} ({row['name']}): {exc}") from None
    return channels


# --------------------------------------------------------------------------
# Splits, targets, annotations, ground truth
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PairExample:
    a: Hashable
    b: Hashable
    label: int

    def __post_init__(self):
        if self.a == self.b:
            raise InvariantError("a pair must join two distinct items")
        if self.label not in (0, 1):
            raise InvariantError("label must be 0 (similar) or 1 (dissimilar)")


@dataclass
class Annotations:
    """Sampled pairs plus the number of users skipped for short histories."""

    pairs: list
    skipped_users: int = 0

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, k):
        return self.pairs[k]


@dataclass(frozen=True)
class TimeSplit:
    cutoff_T: int
    train_items: frozenset
    test_items: frozenset


def split_by_time(log: InteractionLog, catalog: ItemCatalog, test_fraction: float = 0.05) -> TimeSplit:
    """Hold out the items that first appear after a cutoff time.

    The cutoff is the smallest first-interaction time ``T`` for which the
    items first seen strictly after ``T`` number at most
    ``max(1, floor(test_fraction * n))``. Catalog items that never occur in
    the log stay in the training set.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    first = log.first_interaction()
    times = np.array([first[i] for i in catalog.items if i in first], dtype=np.int64)
    if times.size == 0:
        raise DegenerateSplitError("no catalog item has an interaction")
    distinct = np.unique(times)
    if distinct.size < 2:
        raise DegenerateSplitError("all items share one first-interaction time")
    cap = max(1, int(math.floor(test_fraction * len(catalog) + 1e-9)))
    sorted_times = np.sort(times)
    # count of items strictly later than each distinct time
    later = sorted_times.size - np.searchsorted(sorted_times, distinct, side="right")
    ok = np.flatnonzero(later <= cap)
    cutoff = int(distinct[ok[0]])
    test = frozenset(i for i in catalog.items if i in first and first[i] > cutoff)
    if not test:
        raise DegenerateSplitError(
            f"ties at the latest first-interaction time exceed the test cap of {cap} items"
        )
    train = frozenset(catalog.items) - test
    return TimeSplit(cutoff, train, test)


def surrogate_targets(log: InteractionLog, items: Sequence) -> np.ndarray:
    """Mean rating per listed item, then mean-centered across the items."""
    sums: dict = defaultdict(float)
    counts: dict = defaultdict(int)
    for i, r in zip(log.item, log.rating):
        sums[i] += float(r)
        counts[i] += 1
    raw = np.empty(len(items))
    for k, item in enumerate(items):
        if counts.get(item, 0) == 0:
            raise MissingTargetError(item)
        raw[k] = sums[item] / counts[item]
    return raw - raw.mean()


def user_targets(log: InteractionLog, user) -> tuple:
    """One user's rated items (first occurrence order) and centered ratings.

    Repeated ratings of the same item are averaged.
    """
    sub = log.for_user(user)
    items = sub.items()
    return items, surrogate_targets(sub, items)


def generate_pair_annotations(
    log: InteractionLog,
    window_k: int = 5,
    samples_h: int = 4,
    seed: int = 0,
    train_items: Iterable | None = None,
    anchors_per_user: int = 1,
) -> Annotations:
    """Noisy similar/dissimilar pairs from each user's time-ordered history.

    For every user with at least two (train) items: draw an anchor among the
    positions that have a successor, draw ``samples_h`` positives with
    replacement from the next ``window_k`` items and ``samples_h`` negatives
    uniformly over the train catalog (anything but the anchor).
    """
    if window_k < 1 or samples_h < 1:
        raise DataError("window_k and samples_h must be >= 1")
    if train_items is not None:
        pool_set = set(train_items)
        log = log.restrict_items(pool_set)
        pool = _unique_in_order(log.item)
        seen = set(pool)
        pool += sorted((i for i in pool_set if i not in seen), key=str)
    else:
        pool = log.items()
    if len(pool) < 2:
        raise DataError("need at least two items to draw negatives")

    rng = np.random.default_rng(seed)
    frame = log.frame()
    frame["order"] = np.arange(len(frame))
    pairs = []
    skipped = 0
    groups = {u: g for u, g in frame.groupby("user", sort=False)}
    for user in sorted(groups, key=lambda u: (str(type(u)), str(u))):
        events = groups[user].sort_values(["timestamp", "order"], kind="stable")
        history = _unique_in_order(events["item"])
        if len(history) < 2:
            skipped += 1
            continue
        for _ in range(anchors_per_user):
            i = int(rng.integers(0, len(history) - 1))
            anchor = history[i]
            window = history[i + 1 : i + 1 + window_k]
            for j in rng.integers(0, len(window), size=samples_h):
                pairs.append(PairExample(anchor, window[int(j)], 0))
            for _ in range(samples_h):
                neg = pool[int(rng.integers(0, len(pool)))]
                while neg == anchor:
                    neg = pool[int(rng.integers(0, len(pool)))]
                pairs.append(PairExample(anchor, neg, 1))
    if skipped:
        logger.info("annotation: skipped %d users with fewer than 2 items", skipped)
    return Annotations(pairs, skipped)


def build_ground_truth(
    log: InteractionLog,
    horizon: float = DEFAULT_HORIZON,
    scope: str = "population",
    user=None,
) -> dict:
    """Co-interaction similarity sets ``G[x]``.

    ``x2`` is in ``G[x]`` when one user touched both within ``horizon``
    seconds of each other. ``scope="user"`` restricts the events to a single
    ``user``. Every item in the (restricted) log gets a key.
    """
    if horizon <= 0:
        raise DataError("horizon must be positive")
    if scope == "user":
        if user is None:
            raise DataError("single-user scope needs a user")
        log = log.for_user(user)
    elif scope != "population":
        raise DataError(f"unknown scope {scope!r}")

    G = {i: set() for i in log.items()}
    frame = log.frame()
    for _, events in frame.groupby("user", sort=False):
        order = np.argsort(events["timestamp"].to_numpy(), kind="stable")
        times = events["timestamp"].to_numpy()[order]
        items = events["item"].to_numpy()[order]
        for a in range(len(items)):
            b = a + 1
            while b < len(items) and times[b] - times[a] <= horizon:
                if items[a] != items[b]:
                    G[items[a]].add(items[b])
                    G[items[b]].add(items[a])
                b += 1
    return G
