import csv
import json
import xml.etree.ElementTree as ET

import pytest

from nnforget.cli import main
from nnforget.config import ExperimentConfig, parse_config
from nnforget.exceptions import ConfigurationError
from nnforget.network import load_network
from nnforget.scheduler import read_events


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


class TestParseConfig:
    def test_empty_file_defaults(self, tmp_path):
        cfg = parse_config(write_json(tmp_path / "c.json", {}))
        assert cfg.layer_dims == [784, 256, 256, 256, 10]
        assert cfg.learning_rate == 1e-4
        assert cfg.batch_size == 64
        assert cfg.alpha == 10.0
        assert cfg.theta == 0.8
        assert cfg.excluded_classes == [8]
        assert (cfg.pretrain_count, cfg.continuation_count, cfg.proto_eval_count) == (45000, 10000, 5000)

    def test_override_wins(self, tmp_path):
        cfg = parse_config(write_json(tmp_path / "c.json", {"theta": 0.7}), {"theta": 0.5})
        assert cfg.theta == 0.5

    def test_int_for_float(self, tmp_path):
        assert parse_config(write_json(tmp_path / "c.json", {"alpha": 5})).alpha == 5.0

    @pytest.mark.parametrize("doc,key", [
        ({"batch_size": -1}, "batch_size"),
        ({"learning_rate": 0}, "learning_rate"),
        ({"theta": 1.5}, "theta"),
        ({"review_fraction": 1.0}, "review_fraction"),
        ({"layer_dims": [784, 10]}, "layer_dims"),
        ({"excluded_classes": [10]}, "excluded_classes"),
        ({"prototype_timing": "early"}, "prototype_timing"),
        ({"reviews_enabled": "yes"}, "reviews_enabled"),
        ({"seed": -1}, "seed"),
        ({"colour": "red"}, "colour"),
    ])
    def test_invalid_names_key(self, tmp_path, doc, key):
        with pytest.raises(ConfigurationError) as err:
            parse_config(write_json(tmp_path / "c.json", doc))
        assert err.value.key == key
        assert key in str(err.value)

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigurationError):
            parse_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            parse_config(tmp_path / "absent.json")

    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig(seed=4, theta=0.6, layer_dims=[784, 64, 10], plot_classes=[1, 8])
        back = parse_config(write_json(tmp_path / "c.json", cfg.to_dict()))
        assert back == cfg

    def test_derived_seeds_distinct(self):
        cfg = ExperimentConfig(seed=10)
        seeds = [cfg.derived_seed(k) for k in ("split", "init", "pretrain", "continuation", "fit")]
        assert seeds == [10, 11, 12, 13, 14]

    def test_data_dir_env_fallback(self, monkeypatch):
        monkeypatch.setenv("NNFORGET_DATA_DIR", "/somewhere")
        assert ExperimentConfig().resolved_data_dir() == "/somewhere"
        assert ExperimentConfig(data_dir="/here").resolved_data_dir() == "/here"


class TestCliErrors:
    def test_bad_override_exit_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"output_dir": str(tmp_path / "out")})
        assert main(["run", "--config", str(cfg), "--batch-size", "-3"]) == 2
        assert "batch_size" in capsys.readouterr().err

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"bogus": 1})
        assert main(["fit", "--config", str(cfg)]) == 2

    def test_phase_failure_exit_1(self, tmp_path, capsys):
        empty = tmp_path / "nodata"
        empty.mkdir()
        cfg = write_json(tmp_path / "c.json", {"output_dir": str(tmp_path / "out"), "data_dir": str(empty)})
        assert main(["pretrain", "--config", str(cfg)]) == 1
        assert "pretrain" in capsys.readouterr().err

    def test_fit_without_run_exit_1(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"output_dir": str(tmp_path / "out")})
        assert main(["fit", "--config", str(cfg)]) == 1
        assert "fit" in capsys.readouterr().err

    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            main([])


def tiny_config(tmp_path, data_dir, name="run", **extra):
    doc = {"data_dir": data_dir, "output_dir": str(tmp_path / name), "layer_dims": [784, 32, 10],
           "pretrain_epochs": 1, "continuation_epochs": 12, "pretrain_count": 2000,
           "continuation_count": 1500, "proto_eval_count": 500, "seed": 3}
    doc.update(extra)
    return write_json(tmp_path / f"{name}.json", doc)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestEndToEnd:
    def test_run_writes_all_artifacts(self, tmp_path, mnist_data_dir, capsys):
        cfg = tiny_config(tmp_path, mnist_data_dir)
        assert main(["run", "--config", str(cfg)]) == 0
        out = tmp_path / "run"
        for name in ("model.nnfc", "prototypes.json", "retention.csv", "events.jsonl", "fits.json",
                     "retention.svg", "manifest.json"):
            assert (out / name).exists(), name
        assert load_network(out / "model.nnfc").layer_dims == [784, 32, 10]
        protos = json.loads((out / "prototypes.json").read_text())
        assert protos["alpha"] == 10.0 and len(protos["initial_recall"]) == 10
        rows = read_rows(out / "retention.csv")
        assert len(rows) == 13 * 10
        assert rows[0].keys() == {"epoch", "class", "recall_raw", "recall_smoothed"}
        read_events(out / "events.jsonl")
        fits = json.loads((out / "fits.json").read_text())
        assert set(fits["classes"]) == {"8"}
        ET.parse(out / "retention.svg")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 3
        assert 0 <= manifest["results"]["pretrain"]["test_accuracy"] <= 1
        assert "retention" in capsys.readouterr().out

    def test_zero_continuation_epochs(self, tmp_path, mnist_data_dir):
        cfg = tiny_config(tmp_path, mnist_data_dir, continuation_epochs=0)
        assert main(["run", "--config", str(cfg)]) == 0
        rows = read_rows(tmp_path / "run" / "retention.csv")
        assert len(rows) == 10 and {r["epoch"] for r in rows} == {"0"}
        fits = json.loads((tmp_path / "run" / "fits.json").read_text())
        assert fits["classes"]["8"]["selected"] is None

    def test_phases_resume(self, tmp_path, mnist_data_dir):
        cfg = tiny_config(tmp_path, mnist_data_dir, continuation_epochs=3)
        for phase in ("pretrain", "prototypes", "continue", "fit", "plot"):
            assert main([phase, "--config", str(cfg)]) == 0
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert set(manifest["timings"]) == {"pretrain", "prototypes", "continue", "fit", "plot"}
        # re-fitting on smoothed values only touches fits.json
        before = (tmp_path / "run" / "retention.csv").read_bytes()
        assert main(["fit", "--config", str(cfg), "--fit-smoothed", "true"]) == 0
        assert json.loads((tmp_path / "run" / "fits.json").read_text())["series"] == "smoothed"
        assert (tmp_path / "run" / "retention.csv").read_bytes() == before

    def test_deterministic(self, tmp_path, mnist_data_dir):
        a = tiny_config(tmp_path, mnist_data_dir, name="a")
        b = tiny_config(tmp_path, mnist_data_dir, name="b")
        assert main(["run", "--config", str(a)]) == 0
        assert main(["run", "--config", str(b)]) == 0
        for name in ("retention.csv", "events.jsonl", "model.nnfc"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
