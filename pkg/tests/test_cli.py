import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from itemmetric import cli
from itemmetric.checkpoint import load_checkpoint
from itemmetric.synthetic import make_cluster_dataset, write_dataset

SMALL = """\
[run]
seed = 1
[baseline]
steps = 20
[train]
steps = 15
learning_rate = 0.01
eval_every = 5
[personalize]
outer_steps = 4
[evaluate]
users = 4
[theory]
n_grid = 8,16
trials = 2
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    write_dataset(make_cluster_dataset(n_items=60, n_users=10, events_per_user=12, seed=2), d)
    (d / "run.ini").write_text(SMALL)
    return d


def _run(*argv):
    return cli.run([str(a) for a in argv])


def _pipeline(data, out):
    cfg = data / "run.ini"
    assert _run("train-baseline", "--config", cfg, "--out", out) == 0
    assert _run("train-ssl", "--config", cfg, "--out", out, "--init", out / "baseline.ckpt") == 0
    assert _run("personalize", "--config", cfg, "--out", out, "--ssl", out / "ssl.ckpt") == 0
    assert _run("evaluate", "--config", cfg, "--out", out / "pop", "--model", out / "ssl.ckpt") == 0
    assert _run("evaluate", "--config", cfg, "--out", out / "user", "--model", out / "personalized.ckpt", "--scope", "user") == 0
    assert _run("theory", "--config", cfg, "--out", out / "theory") == 0


def test_full_pipeline(dataset, tmp_path, capsys):
    assert _run("ingest", "--config", dataset / "run.ini") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_users"] == 10 and summary["n_interactions"] == 120

    out = tmp_path / "run"
    _pipeline(dataset, out)
    for name in ("annotations.csv", "loss.csv", "trace.csv", "meta_trace.csv", "user_weights.csv", "config.ini"):
        assert (out / name).is_file(), name
    doc = load_checkpoint(out / "personalized.ckpt", expect="personalized")
    assert len(doc["users"]) > 0
    with open(out / "pop" / "summary.csv") as fh:
        rows = dict(csv.reader(fh))
    assert rows["scope"] == "population" and 0.0 <= float(rows["hr"]) <= 1.0
    with open(out / "user" / "user_report.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert (out / "theory" / "theory_summary.csv").is_file()


def test_rerun_is_byte_identical(dataset, tmp_path):
    _pipeline(dataset, tmp_path / "a")
    _pipeline(dataset, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 10
    for rel in files:
        if rel.name == "config.ini":
            continue
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_out_from_environment(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert _run("theory", "--config", dataset / "run.ini") == 0
    assert (tmp_path / "env" / "theory_report.csv").is_file()
    monkeypatch.delenv(cli.OUT_ENV)
    assert _run("theory", "--config", dataset / "run.ini") == cli.EXIT_CONFIG


def test_bad_config_exit_2(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[train]\nstepz = 1\n")
    assert _run("ingest", "--config", tmp_path / "bad.ini") == 2
    assert "stepz" in capsys.readouterr().err
    assert _run("ingest", "--config", tmp_path / "missing.ini") == 2


def test_missing_channel_names_manifest_row(dataset, tmp_path, capsys):
    lines = (dataset / "manifest.csv").read_text().splitlines()
    lines[1] = lines[1].replace("profile.jsonl", str(dataset / "profile.jsonl"))
    lines[2] = lines[2].replace("tags.csv", str(tmp_path / "nope.csv"))
    (tmp_path / "manifest.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "run.ini").write_text(
        SMALL + f"[data]\ninteractions = {dataset / 'interactions.csv'}\nmanifest = manifest.csv\n"
    )
    assert _run("ingest", "--config", tmp_path / "run.ini") == 2
    err = capsys.readouterr().err
    assert "manifest row 3" in err and "tags" in err


def test_bad_interactions_exit_2(dataset, tmp_path):
    (tmp_path / "interactions.csv").write_text("user,item,rating,timestamp\nu,i,abc,1\n")
    (tmp_path / "run.ini").write_text(SMALL + f"[data]\nmanifest = {dataset / 'manifest.csv'}\n")
    assert _run("ingest", "--config", tmp_path / "run.ini") == 2


def test_missing_or_wrong_checkpoint_exit_3(dataset, tmp_path):
    cfg = dataset / "run.ini"
    assert _run("train-ssl", "--config", cfg, "--out", tmp_path, "--init", tmp_path / "none.ckpt") == 3
    assert _run("train-baseline", "--config", cfg, "--out", tmp_path) == 0
    assert _run("personalize", "--config", cfg, "--out", tmp_path, "--ssl", tmp_path / "baseline.ckpt") == 3


def test_divergence_exit_4_writes_partial_trace(dataset, tmp_path, monkeypatch):
    import itemmetric.ssl as ssl_mod

    cfg = dataset / "run.ini"
    assert _run("train-baseline", "--config", cfg, "--out", tmp_path) == 0
    calls = {"n": 0}
    real = ssl_mod.nll

    def flaky(state):
        calls["n"] += 1
        return real(state) if calls["n"] <= 2 else math.nan

    monkeypatch.setattr(ssl_mod, "nll", flaky)
    assert _run("train-ssl", "--config", cfg, "--out", tmp_path, "--init", tmp_path / "baseline.ckpt") == 4
    # eval_every = 5: only step 0 was recorded before the failure at step 2
    with open(tmp_path / "trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows] == ["step", "0"]
    assert not (tmp_path / "ssl.ckpt").exists()


def test_threads_flag(dataset, tmp_path):
    assert _run("ingest", "--config", dataset / "run.ini", "--threads", "0") == 2
    assert _run("ingest", "--config", dataset / "run.ini", "--threads", "1") == 0


def test_console_entry_point(dataset):
    proc = subprocess.run(
        [sys.executable, "-m", "itemmetric.cli", "ingest", "--config", str(dataset / "run.ini")],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["n_items"] == 60
    assert np.isfinite(json.loads(proc.stdout)["split"]["cutoff_T"])
