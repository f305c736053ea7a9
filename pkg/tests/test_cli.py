"""End-to-end command behavior: composition, determinism, exit codes."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest
import yaml

from ransomfl.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_PROTOCOL,
    EXIT_USAGE,
    ExperimentConfig,
    experiment_config_from_doc,
    main,
)
from ransomfl.forest import deserialize_forest


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny corpus taken through gen-synth and extract."""
    root = tmp_path_factory.mktemp("pipeline")
    corpus = root / "corpus"
    feats = root / "feats"
    assert run("gen-synth", "--out", corpus, "--seed", 3, "--runs", 2,
               "--duration", 400) == EXIT_OK
    assert run("extract", corpus, "--out", feats) == EXIT_OK
    return root


class TestGenSynth:
    def test_layout_and_determinism(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-synth", "--out", tmp_path / name, "--seed", 5,
                       "--runs", 1, "--duration", 200) == EXIT_OK
        digests = []
        for name in ("a", "b"):
            files = sorted((tmp_path / name).rglob("*.csv"))
            assert len(files) == 4 * 12 * 1 * 2
            digests.append([hashlib.sha256(p.read_bytes()).hexdigest()
                            for p in files])
        assert digests[0] == digests[1]

    def test_config_file(self, tmp_path):
        doc = {"servers": [{"server_id": "only"}],
               "software": [
                   {"name": "good", "label": 0,
                    "write_entropy_dist": {"mean": 0.3},
                    "duration_seconds": 120.0},
                   {"name": "bad", "label": 1,
                    "write_entropy_dist": {"mean": 0.9},
                    "duration_seconds": 120.0}],
               "runs_per_software": 1}
        cfg = tmp_path / "corpus.yaml"
        cfg.write_text(yaml.safe_dump(doc))
        assert run("gen-synth", "--config", cfg, "--out", tmp_path / "c") == EXIT_OK
        assert (tmp_path / "c" / "only" / "good" / "run-0").is_dir()

    def test_existing_corpus_is_a_data_error(self, tmp_path):
        args = ("gen-synth", "--out", tmp_path / "c", "--runs", 1,
                "--duration", 120)
        assert run(*args) == EXIT_OK
        assert run(*args) == EXIT_DATA


class TestExtract:
    def test_missing_corpus(self, tmp_path):
        assert run("extract", tmp_path / "nope", "--out", tmp_path / "f") \
            == EXIT_DATA

    def test_window_flag_changes_output(self, pipeline, tmp_path):
        assert run("extract", pipeline / "corpus", "--out", tmp_path,
                   "--window-seconds", "60") == EXIT_OK
        short = (pipeline / "feats" / "features.csv").read_text()
        long = (tmp_path / "features.csv").read_text()
        assert len(long.splitlines()) < len(short.splitlines())


class TestTrain:
    def test_local_mode_artifacts(self, pipeline, tmp_path):
        assert run("train", pipeline / "feats", "--mode", "local", "--out",
                   tmp_path, "--seed", 0, "--trees", 10) == EXIT_OK
        models = sorted(p.name for p in tmp_path.glob("*.forest"))
        reports = sorted(p.name for p in tmp_path.glob("*.json"))
        assert len(models) == 4
        assert len(reports) == 4
        assert models[0].startswith("win7-")

    def test_federated_deterministic_across_transports(self, pipeline, tmp_path):
        outs = []
        for transport in ("in-proc", "socket"):
            out = tmp_path / transport
            assert run("train", pipeline / "feats", "--mode", "federated",
                       "--out", out, "--seed", 0, "--trees", 10,
                       "--transport", transport) == EXIT_OK
            outs.append(out)
        a, b = outs
        assert (a / "federated.forest").read_bytes() \
            == (b / "federated.forest").read_bytes()
        assert (a / "federated.json").read_bytes() \
            == (b / "federated.json").read_bytes()

    def test_reports_share_experiment_identity(self, pipeline, tmp_path):
        assert run("train", pipeline / "feats", "--mode", "local", "--out",
                   tmp_path / "l", "--seed", 1, "--trees", 10) == EXIT_OK
        assert run("train", pipeline / "feats", "--mode", "centralized",
                   "--out", tmp_path / "c", "--seed", 1, "--trees", 10) == EXIT_OK
        docs = [json.loads(p.read_text())
                for p in sorted((tmp_path / "l").glob("*.json"))
                + [tmp_path / "c" / "centralized.json"]]
        assert len({d["test_hash"] for d in docs}) == 1
        assert len({d["config_fingerprint"] for d in docs}) == 1

    def test_zero_timeout_is_a_protocol_error(self, pipeline, tmp_path):
        assert run("train", pipeline / "feats", "--mode", "federated",
                   "--out", tmp_path, "--trees", 5,
                   "--timeout", "1e-07") == EXIT_PROTOCOL

    def test_missing_dataset_argument(self, tmp_path):
        assert run("train", "--mode", "federated", "--out", tmp_path) \
            == EXIT_DATA


class TestPredict:
    def test_one_label_per_row(self, pipeline, tmp_path, capsys):
        model_dir = tmp_path / "m"
        assert run("train", pipeline / "feats", "--mode", "centralized",
                   "--out", model_dir, "--seed", 2, "--trees", 10) == EXIT_OK
        capsys.readouterr()
        assert run("predict", model_dir / "centralized.forest",
                   pipeline / "feats" / "features.csv") == EXIT_OK
        lines = capsys.readouterr().out.strip().split("\n")
        n_rows = len((pipeline / "feats" / "features.csv")
                     .read_text().strip().split("\n")) - 1
        assert len(lines) == n_rows
        assert set(lines) <= {"0", "1"}

    def test_malformed_model_file(self, pipeline, tmp_path):
        bogus = tmp_path / "model.forest"
        bogus.write_bytes(b"not a forest")
        assert run("predict", bogus,
                   pipeline / "feats" / "features.csv") == EXIT_DATA


@pytest.fixture(scope="module")
def trained(pipeline, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    for mode in ("local", "centralized", "federated"):
        assert run("train", pipeline / "feats", "--mode", mode, "--out",
                   out / mode, "--seed", 4, "--trees", 10) == EXIT_OK
    return out


class TestReport:
    def test_merged_table(self, trained, tmp_path):
        jsons = sorted(trained.rglob("*.json"))
        assert run("report", *jsons, "--out", tmp_path) == EXIT_OK
        table = (tmp_path / "report.csv").read_text()
        header = table.splitlines()[0]
        assert header.endswith(",centralized,federated")
        assert header.count(",") == 6  # metric + 4 locals + 2 scenarios
        assert len(list(tmp_path.glob("*.png"))) == 4

    def test_charts_skippable(self, trained, tmp_path):
        jsons = sorted(trained.rglob("*.json"))
        assert run("report", *jsons, "--out", tmp_path, "--no-charts") == EXIT_OK
        assert list(tmp_path.glob("*.png")) == []

    def test_mixed_experiments_rejected(self, trained, pipeline, tmp_path):
        other = tmp_path / "other"
        assert run("train", pipeline / "feats", "--mode", "centralized",
                   "--out", other, "--seed", 99, "--trees", 10) == EXIT_OK
        assert run("report", other / "centralized.json",
                   next(trained.rglob("federated.json")),
                   "--out", tmp_path / "t") == EXIT_DATA


class TestUsageErrors:
    def test_unknown_flag(self):
        assert run("train", "x", "--definitely-not-a-flag") == EXIT_USAGE

    def test_unknown_command(self):
        assert run("transmogrify") == EXIT_USAGE

    def test_bad_mode_value(self):
        assert run("train", "x", "--mode", "psychic") == EXIT_USAGE


class TestExperimentConfig:
    def test_defaults_valid(self):
        cfg = ExperimentConfig()
        assert cfg.train().n_trees == 100
        assert cfg.split().test_fraction == 0.25
        assert cfg.balance() is not None

    def test_stage_seeds_differ(self):
        cfg = ExperimentConfig(master_seed=5)
        seeds = {cfg.split().seed, cfg.balance().seed, cfg.train().seed}
        assert len(seeds) == 3

    def test_master_seed_changes_all_stages(self):
        a, b = ExperimentConfig(master_seed=1), ExperimentConfig(master_seed=2)
        assert a.split().seed != b.split().seed
        assert a.train().seed != b.train().seed

    def test_paths_resolve_against_config_dir(self, tmp_path):
        cfg = experiment_config_from_doc({"features": "data"}, tmp_path)
        assert cfg.features == (tmp_path / "data").resolve()

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown experiment config"):
            experiment_config_from_doc({"n_tress": 10}, Path("."))

    def test_bad_transport_rejected(self):
        with pytest.raises(ValueError, match="transport"):
            ExperimentConfig(transport="carrier-pigeon")

    def test_no_balance(self):
        assert ExperimentConfig(balance_ratio=None).balance() is None
