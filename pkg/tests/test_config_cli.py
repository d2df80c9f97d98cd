import json
import os

import numpy as np
import pytest

from tsdet.cli import main
from tsdet.config import (ConfigError, config_to_dict, load_experiment_config,
                          parse_override, write_manifest)


def write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return str(path)


TINY = {
    "data": {"n_scenes": 110, "labeled_fraction": 0.1, "image_size": 48,
             "min_size": 10, "max_size": 24},
    "detector": {"image_size": 48, "channels": [6, 8, 8], "roi_hidden": 16,
                 "anchor_size": 16, "k_proposals": 12, "max_proposals": 16},
    "train": {"burn_in_iters": 4, "mutual_iters": 4, "batch_labeled": 2,
              "batch_unlabeled": 2, "eval_cadence": 2, "checkpoint_cadence": 4},
}


class TestConfigLoading:
    def test_defaults_without_file(self):
        cfg = load_experiment_config()
        assert cfg.train.tau == 0.7
        assert cfg.data.n_scenes == 1000
        assert cfg.train.detector.image_size == 96

    def test_unknown_top_level_key(self, tmp_path):
        path = write_config(tmp_path, {"nonsense": {}})
        with pytest.raises(ConfigError, match="nonsense"):
            load_experiment_config(path)

    def test_unknown_section_key(self, tmp_path):
        path = write_config(tmp_path, {"train": {"taus": 0.5}})
        with pytest.raises(ConfigError, match="train.taus"):
            load_experiment_config(path)

    def test_range_violation_names_key(self, tmp_path):
        path = write_config(tmp_path, {"train": {"tau": 1.5}})
        with pytest.raises(ConfigError, match="tau"):
            load_experiment_config(path)

    def test_mismatched_image_sizes_rejected(self, tmp_path):
        path = write_config(tmp_path, {"data": {"image_size": 48}})
        with pytest.raises(ConfigError, match="image_size"):
            load_experiment_config(path)

    def test_overrides_apply_and_record(self, tmp_path):
        cfg = load_experiment_config(None, ["train.tau=0.8", "train.margin.s=4"])
        assert cfg.train.tau == 0.8
        assert cfg.train.margin.s == 4
        assert any("train.tau" in o for o in cfg._applied_overrides)

    def test_override_parsing(self):
        assert parse_override("a.b=0.5") == ("a.b", 0.5)
        assert parse_override("a.b=[1,2]") == ("a.b", [1, 2])
        assert parse_override("a.b=margin") == ("a.b", "margin")
        with pytest.raises(ConfigError):
            parse_override("no-equals")

    def test_seed_shortcut_wins(self, tmp_path):
        path = write_config(tmp_path, {"seed": 5})
        cfg = load_experiment_config(path, seed=9)
        assert cfg.seed == 9
        assert cfg.train.seed == 9

    def test_round_trip_dict(self):
        cfg = load_experiment_config(None, ["train.roi_cls_kind=focal"])
        doc = config_to_dict(cfg)
        assert doc["train"]["roi_cls_kind"] == "focal"
        json.dumps(doc)  # must be serializable

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        with pytest.raises(ConfigError, match="malformed"):
            load_experiment_config(str(path))

    def test_manifest_written(self, tmp_path):
        cfg = load_experiment_config()
        path = write_manifest(cfg, str(tmp_path / "run"))
        doc = json.loads(open(path).read())
        assert "timestamp" in doc
        assert doc["config"]["train"]["tau"] == 0.7


class TestCliGenerateData:
    def test_generates_and_manifest(self, tmp_path):
        cfgp = write_config(tmp_path, TINY)
        out = str(tmp_path / "data")
        assert main(["generate-data", "--config", cfgp, "--out", out]) == 0
        manifest = json.loads(open(os.path.join(out, "manifest.json")).read())
        sizes = manifest["split_sizes"]
        assert sizes == {"labeled": 9, "unlabeled": 79, "val": 11, "test": 11}
        for name in ("labeled", "unlabeled", "val", "test"):
            assert os.path.exists(os.path.join(out, f"{name}.json"))

    def test_rerun_same_seed_byte_identical_json(self, tmp_path):
        cfgp = write_config(tmp_path, TINY)
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        assert main(["generate-data", "--config", cfgp, "--out", a, "--seed", "4"]) == 0
        assert main(["generate-data", "--config", cfgp, "--out", b, "--seed", "4"]) == 0
        for name in ("labeled", "unlabeled", "val", "test"):
            with open(os.path.join(a, f"{name}.json"), "rb") as fa, \
                 open(os.path.join(b, f"{name}.json"), "rb") as fb:
                assert fa.read() == fb.read()

    def test_unlabeled_json_withholds_annotations(self, tmp_path):
        cfgp = write_config(tmp_path, TINY)
        out = str(tmp_path / "data")
        main(["generate-data", "--config", cfgp, "--out", out])
        doc = json.loads(open(os.path.join(out, "unlabeled.json")).read())
        assert doc["annotations"] == []
        assert len(doc["images"]) == 79


class TestCliTrain:
    def test_supervised_csv_row_count(self, tmp_path):
        cfgp = write_config(tmp_path, TINY)
        out = str(tmp_path / "run")
        code = main(["train", "--config", cfgp, "--mode", "supervised_only", "--out", out])
        assert code == 0
        lines = open(os.path.join(out, "metrics.csv")).read().strip().split("\n")
        budget = TINY["train"]["burn_in_iters"] + TINY["train"]["mutual_iters"]
        assert len(lines) - 1 == budget // TINY["train"]["eval_cadence"] + 1

    def test_config_error_exit_code(self, tmp_path):
        cfgp = write_config(tmp_path, {"train": {"tau": 5.0}})
        assert main(["train", "--config", cfgp]) == 2

    def test_missing_config_file_exit_code(self):
        assert main(["train", "--config", "/nonexistent/config.json"]) == 2


class TestCliEvaluate:
    def test_checkpoint_roundtrip_evaluation(self, tmp_path, capsys):
        cfgp = write_config(tmp_path, TINY)
        out = str(tmp_path / "run")
        main(["train", "--config", cfgp, "--mode", "supervised_only", "--out", out])
        ckpt = os.path.join(out, "checkpoints", "supervised_final.ckpt")
        assert os.path.exists(ckpt)
        capsys.readouterr()  # drop the training output
        code = main(["evaluate", "--config", cfgp, "--checkpoint", ckpt, "--split", "val"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert 0.0 <= doc["map50"] <= 1.0

    def test_evaluating_twice_identical(self, tmp_path, capsys):
        cfgp = write_config(tmp_path, TINY)
        out = str(tmp_path / "run")
        main(["train", "--config", cfgp, "--mode", "supervised_only", "--out", out])
        ckpt = os.path.join(out, "checkpoints", "supervised_final.ckpt")
        capsys.readouterr()
        main(["evaluate", "--config", cfgp, "--checkpoint", ckpt])
        first = capsys.readouterr().out
        main(["evaluate", "--config", cfgp, "--checkpoint", ckpt])
        second = capsys.readouterr().out
        assert first == second

    def test_missing_checkpoint_is_config_error(self, tmp_path):
        cfgp = write_config(tmp_path, TINY)
        assert main(["evaluate", "--config", cfgp, "--checkpoint", "/no/such.ckpt"]) == 2

    def test_architecture_mismatch_names_parameter(self, tmp_path, capsys):
        cfgp = write_config(tmp_path, TINY)
        out = str(tmp_path / "run")
        main(["train", "--config", cfgp, "--mode", "supervised_only", "--out", out])
        ckpt = os.path.join(out, "checkpoints", "supervised_final.ckpt")
        big = dict(TINY)
        big["detector"] = dict(TINY["detector"], roi_hidden=32)
        cfgp2 = write_config(tmp_path, big)
        code = main(["evaluate", "--config", cfgp2, "--checkpoint", ckpt])
        assert code == 2
        assert "roi" in capsys.readouterr().err


class TestCliTrainFromDataDir:
    def test_train_reads_generated_directory(self, tmp_path):
        cfgp = write_config(tmp_path, TINY)
        data = str(tmp_path / "data")
        main(["generate-data", "--config", cfgp, "--out", data])
        doc = dict(TINY)
        doc["data_dir"] = data
        cfgp2 = write_config(tmp_path, doc)
        out = str(tmp_path / "run")
        assert main(["train", "--config", cfgp2, "--mode", "ssl", "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "metrics.csv"))


class TestCliGradCheck:
    def test_grad_check_passes(self):
        assert main(["grad-check", "--n-seeds", "2"]) == 0
