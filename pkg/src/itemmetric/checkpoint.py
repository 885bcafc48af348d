"""JSON checkpoints for metrics, fitted GPs and personalized weights.

Floats are written with their shortest round-trip representation, so a
save/load cycle reproduces every f64 parameter bit for bit.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError
from .siamese import TOWER_FIELDS, ChannelMetricParams, EnsembleParams, TowerParams

FORMAT_VERSION = 1
KINDS = ("metric", "gp", "personalized")


def _arr(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise CheckpointError("refusing to save non-finite parameters")
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _unarr(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def metric_to_dict(params: EnsembleParams) -> dict:
    return {
        "mode": params.mode,
        "channels": [
            {**{f: _arr(getattr(c.tower, f)) for f in TOWER_FIELDS}, "lam": _arr(c.lam)} for c in params.channels
        ],
        "id_embed": None if params.id_embed is None else _arr(params.id_embed),
        "agg_h": _arr(params.agg_h),
        "agg_b": _arr(params.agg_b),
    }


def metric_from_dict(d: dict) -> EnsembleParams:
    chans = [
        ChannelMetricParams(TowerParams(*(_unarr(c[f]) for f in TOWER_FIELDS)), _unarr(c["lam"])) for c in d["channels"]
    ]
    emb = None if d.get("id_embed") is None else _unarr(d["id_embed"])
    return EnsembleParams(chans, _unarr(d["agg_h"]), _unarr(d["agg_b"]), emb, d["mode"])


def _jsonable_id(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (str, int)):
        return x
    return str(x)


def save_checkpoint(path, kind: str, metric: EnsembleParams, **extra) -> None:
    """Write a checkpoint of ``kind`` with the metric and any extra fields.

    ``gp`` checkpoints carry ``log_noise``, ``train_items`` and ``r``;
    ``personalized`` ones carry ``log_noise``, ``w_meta`` and ``users``
    (user id -> weight vector).
    """
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    doc = {"format": "itemmetric", "version": FORMAT_VERSION, "kind": kind, "metric": metric_to_dict(metric)}
    for key, val in extra.items():
        if key == "r" or key == "w_meta":
            doc[key] = _arr(val)
        elif key == "train_items":
            doc[key] = [_jsonable_id(i) for i in val]
        elif key == "users":
            doc[key] = [[_jsonable_id(u), _arr(w)] for u, w in val.items()]
        elif key == "log_noise":
            if not math.isfinite(val):
                raise CheckpointError("refusing to save a non-finite noise level")
            doc[key] = float(val)
        else:
            doc[key] = val
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def load_checkpoint(path, expect=None) -> dict:
    """Read a checkpoint; ``expect`` restricts the accepted kinds."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != "itemmetric" or doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a version-{FORMAT_VERSION} itemmetric checkpoint")
    if expect is not None:
        kinds = (expect,) if isinstance(expect, str) else tuple(expect)
        if doc["kind"] not in kinds:
            raise CheckpointError(f"{path} holds a {doc['kind']!r} checkpoint, expected {' or '.join(kinds)}")
    out = dict(doc)
    out["metric"] = metric_from_dict(doc["metric"])
    if "r" in doc:
        out["r"] = _unarr(doc["r"])
    if "w_meta" in doc:
        out["w_meta"] = _unarr(doc["w_meta"])
    if "users" in doc:
        out["users"] = {u: _unarr(w) for u, w in doc["users"]}
    return out
