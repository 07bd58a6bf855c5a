"""Run manifests, config files and CSV outputs.

Every CSV row carries the ``manifest`` hash of the run (or sweep) that
produced it. Column layouts are versioned by ``SCHEMA_VERSION``.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import ConfigurationError, RatingTable
from .federation import ExperimentConfig, RoundRecord

SCHEMA_VERSION = 1

# key=value sections of the config file -> ExperimentConfig fields
CONFIG_SECTIONS = {
    "data": ("dataset", "attribute", "n_core", "data_dir"),
    "federation": ("eta", "K", "epochs", "seed", "sample_once", "early_stop_patience", "eval_test_each_epoch"),
    "model": ("hidden", "layers", "dropout", "activation", "init_scale", "neighbor_cap"),
    "fairness": ("beta", "alpha", "sigma"),
    "privacy": ("ldp", "delta", "lambda"),
}
FILE_KEY_TO_FIELD = {"lambda": "lam"}

ROUNDS_COLUMNS = ["manifest", "epoch", "train_rmse", "val_rmse", "val_disparity", "test_disparity",
                  "P", "Q", "abs_P_minus_Q", "participants", "delta", "lambda", "epsilon", "wall_time"]
SUMMARY_COLUMNS = ["manifest", "dataset", "attribute", "beta", "alpha", "sigma", "K", "eta", "hidden",
                   "layers", "seed", "epochs_run", "ldp", "delta", "lambda", "epsilon", "test_rmse",
                   "test_disparity", "test_rmse_S0", "test_rmse_S1", "final_val_rmse", "final_P", "final_Q",
                   "config_hash", "dataset_fingerprint"]
TABLE1_COLUMNS = ["manifest", "dataset", "attribute", "beta", "rmse", "disparity",
                  "rmse_pct_change", "disparity_pct_change", "error"]
FIGURE3_COLUMNS = ["manifest", "dataset", "attribute", "beta", "epoch", "val_disparity"]
LDP_COLUMNS = ["manifest", "dataset", "attribute", "beta", "delta", "lambda", "epsilon", "rmse", "disparity", "error"]


def _field_types():
    return {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    default = getattr(ExperimentConfig(), name)
    raw = raw.strip()
    if name == "init_scale":
        return None if raw.lower() in ("", "none", "default") else float(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep "K" upper-case
    parser.read_string(text)
    out = {}
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in CONFIG_SECTIONS[section]:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            name = FILE_KEY_TO_FIELD.get(key, key)
            try:
                out[name] = _coerce(name, value)
            except ValueError as exc:
                raise ConfigurationError(f"[{section}] {key}: {exc}") from None
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for section, keys in CONFIG_SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(config, FILE_KEY_TO_FIELD.get(key, key))
            lines.append(f"{key} = {'none' if value is None else value}")
        lines.append("")
    return "\n".join(lines)


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config.as_dict(), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dataset_fingerprint(*tables: RatingTable) -> str:
    h = hashlib.sha256()
    total = 0
    for t in tables:
        c = t.canonical()
        total += len(c)
        for arr in (c.users, c.items, c.ratings, c.timestamps):
            h.update(np.ascontiguousarray(arr).tobytes())
    return f"{total}:{h.hexdigest()[:16]}"


@dataclass(frozen=True)
class RunManifest:
    config: ExperimentConfig
    dataset_fingerprint: str
    code_version: str
    seed: int
    output_dir: str

    @classmethod
    def create(cls, config: ExperimentConfig, fingerprint: str, output_dir) -> "RunManifest":
        return cls(config, fingerprint, __version__, config.seed, str(output_dir))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.as_dict(),
            "dataset_fingerprint": self.dataset_fingerprint,
            "code_version": self.code_version,
            "seed": self.seed,
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def write(self, path) -> None:
        payload = self.to_dict()
        payload["manifest_hash"] = self.hash
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def fmt(value) -> str:
    """Stable text form for CSV cells."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def rounds_rows(manifest: RunManifest, history: list[RoundRecord], epsilon: float | None) -> list[dict]:
    cfg = manifest.config
    rows = []
    for r in history:
        rows.append({
            "manifest": manifest.hash, "epoch": r.epoch, "train_rmse": r.train_rmse, "val_rmse": r.val_rmse,
            "val_disparity": r.val_disparity, "test_disparity": r.test_disparity, "P": r.P, "Q": r.Q,
            "abs_P_minus_Q": abs(r.P - r.Q), "participants": r.participants,
            "delta": cfg.delta if cfg.ldp else None, "lambda": cfg.lam if cfg.ldp else None,
            "epsilon": epsilon, "wall_time": round(r.wall_time, 4),
        })
    return rows
