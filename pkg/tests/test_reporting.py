import json
import math

import numpy as np
import pytest

from fairfedgnn.data import ConfigurationError, RatingTable
from fairfedgnn.federation import ExperimentConfig
from fairfedgnn.reporting import (
    RunManifest,
    config_hash,
    config_to_text,
    dataset_fingerprint,
    fmt,
    load_config,
    parse_config_text,
    read_csv,
    write_csv,
)


def test_config_text_round_trip(tmp_path):
    cfg = ExperimentConfig(beta=0.7, lam=0.3, ldp=True, K=0.5, init_scale=None, attribute="activity")
    path = tmp_path / "c.ini"
    path.write_text(config_to_text(cfg))
    assert load_config(path) == cfg


def test_overrides_win_and_none_is_ignored(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[fairness]\nbeta = 0.3\n[privacy]\nlambda = 0.2\nldp = on\n")
    cfg = load_config(path, {"beta": 0.9, "seed": None})
    assert (cfg.beta, cfg.lam, cfg.ldp, cfg.seed) == (0.9, 0.2, True, 0)


@pytest.mark.parametrize("text", [
    "[training]\neta = 0.1\n",
    "[fairness]\ngamma = 1\n",
    "[privacy]\nldp = perhaps\n",
    "[federation]\nepochs = many\n",
])
def test_bad_config_text(text):
    with pytest.raises(ConfigurationError):
        parse_config_text(text)


def test_config_hash_tracks_values():
    assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())
    assert config_hash(ExperimentConfig()) != config_hash(ExperimentConfig(seed=1))


def test_fingerprint_ignores_row_order():
    a = RatingTable.from_records([(1, 2, 3.0, 4), (5, 6, 1.0, 7)])
    b = RatingTable.from_records([(5, 6, 1.0, 7), (1, 2, 3.0, 4)])
    assert dataset_fingerprint(a) == dataset_fingerprint(b)
    assert dataset_fingerprint(a).startswith("2:")


def test_manifest_hash_independent_of_output_dir(tmp_path):
    cfg = ExperimentConfig()
    a = RunManifest.create(cfg, "fp", tmp_path / "a")
    b = RunManifest.create(cfg, "fp", tmp_path / "b")
    assert a.hash == b.hash
    a.write(tmp_path / "m.json")
    payload = json.loads((tmp_path / "m.json").read_text())
    assert payload["manifest_hash"] == a.hash and payload["config"]["seed"] == 0


def test_fmt_and_csv_round_trip(tmp_path):
    assert [fmt(None), fmt(True), fmt(0.1), fmt(np.float64(math.nan)), fmt(-math.inf), fmt(3)] == \
        ["", "1", "0.1", "nan", "-inf", "3"]
    path = tmp_path / "t.csv"
    write_csv(path, ["a", "b"], [{"a": 1.5, "b": None}, {"a": 2}])
    assert path.read_text() == "a,b\n1.5,\n2,\n"
    assert read_csv(path) == [{"a": "1.5", "b": ""}, {"a": "2", "b": ""}]


def test_inline_comments_and_empty_data_dir():
    values = parse_config_text("[data]\ndata_dir =   ; empty means data/<dataset>\n"
                               "[fairness]\nbeta = 0.5  # budget\n")
    assert values == {"data_dir": "", "beta": 0.5}
