"""Command-line pipeline: ingest, train-baseline, train-ssl, personalize,
evaluate and theory, all driven by one INI config and its seed.

Exit codes: 0 success, 2 invalid config or data, 3 missing or wrong
upstream checkpoint, 4 numerical failure (the partial trace is written
first), 1 anything else from the library.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import (
    ItemCatalog,
    build_ground_truth,
    generate_pair_annotations,
    load_interactions,
    load_manifest,
    split_by_time,
    surrogate_targets,
)
from .evaluation import CatalogMetric, RankingReport, evaluate
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    DomainError,
    InvariantError,
    ItemMetricError,
    NumericalError,
)
from .personalize import FrozenMetric, build_user_contexts, fit_meta, personalize_user, write_user_weights
from .siamese import PairBatch, init_params, train_siamese_baseline
from .ssl import fit_ssl
from .theory import convergence_experiment

logger = logging.getLogger("itemmetric")

OUT_ENV = "ITEMMETRIC_OUT"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_NUMERICAL = 0, 1, 2, 3, 4


# --------------------------------------------------------------------------
# Shared steps
# --------------------------------------------------------------------------


def _load_data(cfg):
    log = load_interactions(cfg["data"]["interactions"])
    channels = load_manifest(cfg["data"]["manifest"])
    seen = set(log.items())
    extra = sorted({i for ch in channels for i in ch.values} - seen, key=str)
    catalog = ItemCatalog(log.items() + extra, channels)
    return log, catalog


def _split(cfg, log, catalog):
    split = split_by_time(log, catalog, cfg["data"]["test_fraction"])
    rated = set(log.items())
    train = [i for i in catalog.items if i in split.train_items and i in rated]
    test = [i for i in catalog.items if i in split.test_items]
    return split, train, test


def _out_dir(args, cfg) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise ConfigError(f"no output directory: pass --out or set {OUT_ENV}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _flush_trace(exc, out):
    trace = getattr(exc, "trace", None)
    if trace is not None and out is not None:
        trace.to_csv(out / "trace.csv")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_ingest(args, cfg):
    log, catalog = _load_data(cfg)
    split, train, test = _split(cfg, log, catalog)
    summary = catalog.summary()
    summary.update(
        n_users=len(log.users()),
        n_interactions=len(log),
        split={"cutoff_T": split.cutoff_T, "n_train_rated": len(train), "n_test": len(test)},
    )
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_train_baseline(args, cfg):
    out = _out_dir(args, cfg)
    log, catalog = _load_data(cfg)
    _, train, _ = _split(cfg, log, catalog)
    a = cfg["annotation"]
    ann = generate_pair_annotations(
        log, window_k=a["window_k"], samples_h=a["samples_h"], seed=cfg.seed, train_items=train,
        anchors_per_user=a["anchors_per_user"],
    )
    if not len(ann):
        raise DataError("no users with two or more training items: nothing to annotate")
    _write_rows(out / "annotations.csv", ("a", "b", "label"), [(p.a, p.b, p.label) for p in ann])
    m = cfg["model"]
    init = init_params(
        catalog.features.dims, m["hidden"], n_items=len(catalog), p_id=m["p_id"], include_id=m["include_id"],
        mode=m["mode"], seed=cfg.seed,
    )
    params, losses = train_siamese_baseline(PairBatch.from_examples(ann, catalog), init, cfg.baseline_config(), catalog.features)
    _write_rows(out / "loss.csv", ("step", "loss"), [(s, repr(float(v))) for s, v in enumerate(losses)])
    save_checkpoint(out / "baseline.ckpt", "metric", params, seed=cfg.seed)
    logger.info("baseline: loss %.4g -> %.4g", losses[0], losses[-1])
    return EXIT_OK


def cmd_train_ssl(args, cfg):
    doc = load_checkpoint(args.init, expect=("metric", "gp"))
    out = _out_dir(args, cfg)
    log, catalog = _load_data(cfg)
    _, train, _ = _split(cfg, log, catalog)
    r = surrogate_targets(log, train)
    try:
        state, trace = fit_ssl(catalog, train, r, doc["metric"], cfg.train_config(), doc.get("log_noise"))
    except NumericalError as exc:
        _flush_trace(exc, out)
        raise
    trace.to_csv(out / "trace.csv")
    save_checkpoint(out / "ssl.ckpt", "gp", state.metric, log_noise=state.log_noise, train_items=train, r=r, seed=cfg.seed)
    return EXIT_OK


def cmd_personalize(args, cfg):
    doc = load_checkpoint(args.ssl, expect="gp")
    out = _out_dir(args, cfg)
    log, catalog = _load_data(cfg)
    metric = FrozenMetric(doc["metric"], doc["log_noise"])
    users, skipped = build_user_contexts(log, catalog, train_items=doc["train_items"])
    if not users:
        raise DataError("no user has two or more rated training items")
    meta_cfg = cfg.meta_config()
    try:
        w_meta, trace = fit_meta(users, metric.w, meta_cfg, metric)
    except NumericalError as exc:
        _flush_trace(exc, out)
        raise
    trace.to_csv(out / "meta_trace.csv")
    per_user = {}
    for u in users:
        w_u = personalize_user(w_meta, u, meta_cfg, metric)
        if not np.all(np.isfinite(w_u)):
            raise NumericalError(f"personalized weights for user {u.user!r} are not finite")
        per_user[u.user] = w_u
    write_user_weights(out / "user_weights.csv", per_user.items())
    save_checkpoint(
        out / "personalized.ckpt", "personalized", doc["metric"].with_w(w_meta), log_noise=doc["log_noise"],
        w_meta=w_meta, users=per_user, skipped_users=skipped, seed=cfg.seed,
    )
    return EXIT_OK


def _summary_rows(report: RankingReport):
    return [(k, v if isinstance(v, int) else repr(float(v))) for k, v in report.summary().items()]


def cmd_evaluate(args, cfg):
    doc = load_checkpoint(args.model)
    out = _out_dir(args, cfg)
    log, catalog = _load_data(cfg)
    e = cfg["evaluate"]
    base = doc["metric"]
    if "w_meta" in doc:
        base = base.with_w(doc["w_meta"])
    if args.scope == "population":
        _, _, test = _split(cfg, log, catalog)
        G = build_ground_truth(log, e["horizon"])
        report = evaluate(CatalogMetric(base, catalog), test, catalog.items, G, k=e["k"])
    else:
        users = sorted(log.users(), key=str)
        if e["users"] is not None and e["users"] < len(users):
            rng = np.random.default_rng(cfg.seed)
            users = sorted(rng.choice(np.array(users, dtype=object), size=e["users"], replace=False).tolist(), key=str)
        personal = doc.get("users", {})
        report = RankingReport(e["k"])
        user_rows = []
        for u in users:
            params = base.with_w(personal[u]) if u in personal else base
            G = build_ground_truth(log, e["horizon"], scope="user", user=u)
            queries = [i for i in catalog.items if i in G]
            rep = evaluate(CatalogMetric(params, catalog), queries, catalog.items, G, k=e["k"], label=lambda q, u=u: f"{u}|{q}")
            report.per_query += rep.per_query
            report.num_empty += rep.num_empty
            user_rows.append((u, repr(rep.mean_hr), repr(rep.mean_mrr), repr(rep.mean_ndcg), rep.num_queries, int(u in personal)))
        _write_rows(out / "user_report.csv", ("user", "hr", "mrr", "ndcg", "n_queries", "personalized"), user_rows)
    report.to_csv(out / "report.csv")
    _write_rows(out / "summary.csv", ("key", "value"), [("scope", args.scope)] + _summary_rows(report))
    return EXIT_OK


def cmd_theory(args, cfg):
    out = _out_dir(args, cfg)
    th = cfg["theory"]
    report = convergence_experiment(
        n_grid=th["n_grid"], trials=th["trials"], seed=cfg.seed, dim=th["dim"], scale=th["scale"], sigma2=th["sigma2"],
        delta=th["delta"], model=th["model"],
    )
    report.to_csv(out / "theory_report.csv")
    report.summary_to_csv(out / "theory_summary.csv")
    if report.violations:
        logger.error("lemma bound violated in %d trials", report.violations)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train-baseline": cmd_train_baseline,
    "train-ssl": cmd_train_ssl,
    "personalize": cmd_personalize,
    "evaluate": cmd_evaluate,
    "theory": cmd_theory,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI run configuration")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    common.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    with_out = argparse.ArgumentParser(add_help=False)
    with_out.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV})")

    parser = argparse.ArgumentParser(prog="itemmetric", description="Personalized item-to-item metric learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="validate the data files and print a catalog summary")
    sub.add_parser("train-baseline", parents=[common, with_out], help="contrastive Siamese ensemble")
    p = sub.add_parser("train-ssl", parents=[common, with_out], help="fit the metric by the GP likelihood")
    p.add_argument("--init", required=True, help="metric checkpoint to start from")
    p = sub.add_parser("personalize", parents=[common, with_out], help="meta-learn and adapt per-user weights")
    p.add_argument("--ssl", required=True, help="checkpoint written by train-ssl")
    p = sub.add_parser("evaluate", parents=[common, with_out], help="top-k ranking report")
    p.add_argument("--model", required=True, help="any checkpoint")
    p.add_argument("--scope", choices=("population", "user"), default="population")
    sub.add_parser("theory", parents=[common, with_out], help="convergence experiment on oracle worlds")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("itemmetric: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            cfg = load_config(args.config)
            return COMMANDS[args.command](args, cfg)
    except ItemMetricError as exc:
        print(f"itemmetric: error: {exc}", file=sys.stderr)
        return exit_code(exc)


def exit_code(exc: Exception) -> int:
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (ConfigError, DataError, DimensionError, InvariantError, DomainError)):
        return EXIT_CONFIG
    return EXIT_ERROR


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
