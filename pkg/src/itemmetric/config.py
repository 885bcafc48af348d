"""Run configuration: an INI file with fixed sections and typed keys.

Every key has a default; unknown sections or keys are rejected so a typo
cannot silently fall back to a default. Relative data paths resolve
against the config file's directory. :meth:`RunConfig.to_ini` writes the
fully resolved configuration back out (this copy goes into every output
directory).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .personalize import MetaConfig
from .siamese import BaselineConfig
from .ssl import TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str):
    s = s.strip()
    return None if s.lower() in ("", "none") else int(s)


def _tuple(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _int_list(s: str) -> tuple:
    return tuple(int(x) for x in _tuple(s))


# section -> key -> (parser, default)
SCHEMA = {
    "run": {"seed": (int, 0)},
    "data": {
        "interactions": (str, "interactions.csv"),
        "manifest": (str, "manifest.csv"),
        "test_fraction": (float, 0.05),
    },
    "annotation": {
        "window_k": (int, 5),
        "samples_h": (int, 4),
        "anchors_per_user": (int, 1),
    },
    "model": {
        "hidden": (int, 8),
        "p_id": (int, 30),
        "include_id": (_bool, False),
        "mode": (str, "ensemble"),
        "learn_lambda": (_bool, False),
    },
    "baseline": {
        "steps": (int, 500),
        "learning_rate": (float, 1e-2),
        "optimizer": (str, "adaptive-moment"),
        "margin_tau": (float, 0.9),
        "batch_pairs": (_opt_int, None),
    },
    "train": {
        "steps": (int, 1000),
        "learning_rate": (float, 1e-3),
        "optimizer": (str, "adaptive-moment"),
        "batch_items": (_opt_int, None),
        "eval_every": (int, 10),
        "noise_init": (float, 0.1),
        "frozen": (_tuple, ()),
        "nystrom_above": (int, 4096),
        "inducing": (int, 256),
    },
    "personalize": {
        "inner_rate": (float, 0.1),
        "inner_steps": (int, 1),
        "outer_rate": (float, 1e-2),
        "outer_steps": (int, 100),
        "jacobian_mode": (str, "exact-one-step"),
        "optimizer": (str, "adaptive-moment"),
        "users_per_step": (_opt_int, None),
    },
    "evaluate": {
        "k": (int, 10),
        "horizon": (int, 30 * 24 * 3600),
        "users": (_opt_int, None),
    },
    "theory": {
        "n_grid": (_int_list, (16, 64, 256)),
        "trials": (int, 5),
        "dim": (int, 2),
        "scale": (float, 4.0),
        "sigma2": (float, 0.01),
        "delta": (float, 0.05),
        "model": (str, "scales"),
    },
}
PATH_KEYS = {("data", "interactions"), ("data", "manifest")}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: Path | None = None

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def baseline_config(self) -> BaselineConfig:
        b = self["baseline"]
        return BaselineConfig(
            steps=b["steps"], learning_rate=b["learning_rate"], optimizer=b["optimizer"], margin_tau=b["margin_tau"],
            batch_pairs=b["batch_pairs"], seed=self.seed, learn_lambda=self["model"]["learn_lambda"],
        )

    def train_config(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(
            steps=t["steps"], learning_rate=t["learning_rate"], optimizer=t["optimizer"], batch_items=t["batch_items"],
            seed=self.seed, eval_every=t["eval_every"], noise_init=t["noise_init"], frozen=t["frozen"],
            learn_lambda=self["model"]["learn_lambda"], nystrom_above=t["nystrom_above"], inducing=t["inducing"],
        )

    def meta_config(self) -> MetaConfig:
        p = self["personalize"]
        return MetaConfig(seed=self.seed, **p)

    def validate(self) -> None:
        m = self["model"]
        if m["hidden"] < 1 or m["p_id"] < 1:
            raise ConfigError("model.hidden and model.p_id must be >= 1")
        if m["mode"] not in ("ensemble", "single"):
            raise ConfigError("model.mode must be 'ensemble' or 'single'")
        if not 0.0 < self["data"]["test_fraction"] < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
        a = self["annotation"]
        if min(a.values()) < 1:
            raise ConfigError("annotation values must be >= 1")
        e = self["evaluate"]
        if e["k"] < 1 or e["horizon"] <= 0:
            raise ConfigError("evaluate.k must be >= 1 and evaluate.horizon > 0")
        if e["users"] is not None and e["users"] < 1:
            raise ConfigError("evaluate.users must be >= 1")
        th = self["theory"]
        if th["trials"] < 1 or th["dim"] < 1 or not th["n_grid"]:
            raise ConfigError("theory needs trials >= 1, dim >= 1 and a non-empty n_grid")
        if any(b <= a for a, b in zip(th["n_grid"], th["n_grid"][1:])) or th["n_grid"][0] < 2:
            raise ConfigError("theory.n_grid must be increasing and start at >= 2")
        if not (th["sigma2"] > 0 and th["scale"] > 0 and 0 < th["delta"] < 1):
            raise ConfigError("theory needs sigma2 > 0, scale > 0 and 0 < delta < 1")
        if th["model"] not in ("scales", "tower"):
            raise ConfigError("theory.model must be 'scales' or 'tower'")
        if not 0 < self["baseline"]["margin_tau"]:
            raise ConfigError("baseline.margin_tau must be positive")
        self.baseline_config()
        self.train_config().validate()
        self.meta_config().validate()

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in SCHEMA.items():
            cp[section] = {k: _fmt(self.values[section][k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, directory) -> Path:
        path = Path(directory) / "config.ini"
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def parse_config(text: str, base_dir=None, source=None) -> RunConfig:
    """Parse INI text; relative data paths are resolved against ``base_dir``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            parser = SCHEMA[section][key][0]
            try:
                values[section][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for section, key in PATH_KEYS:
        p = Path(values[section][key])
        values[section][key] = str(p if p.is_absolute() else (base / p).resolve())
    cfg = RunConfig(values, source)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"), path.parent, path)
