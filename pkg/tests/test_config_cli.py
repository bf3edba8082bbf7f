import copy
import csv
import json

import numpy as np
import pytest

from simgap import cli, runner
from simgap.config import (
    ConfigError,
    RunConfig,
    build_config,
    config_to_dict,
    default_config_json,
    gap_standard,
    load_run_config,
    preset_config,
    sweep_light,
)


class TestConfig:
    def test_defaults_valid(self):
        RunConfig().validate()
        gap_standard(1).validate()
        sweep_light(2).validate()

    def test_reference_hyperparameters_in_defaults(self):
        cfg = RunConfig()
        assert cfg.train.beta == 2.13
        assert cfg.train.tau == 0.9
        assert cfg.train.lambda_dst == 1.87
        assert cfg.train.lambda_max == 0.78
        assert cfg.train.warmup_iters == 570
        assert cfg.train.lr == 0.01
        assert cfg.train.momentum == 0.9
        assert cfg.train.poly_power == 0.70
        assert cfg.train.epochs == 35
        assert cfg.train.batch_source == 4 and cfg.train.batch_target == 4

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys.*fizz"):
            build_config(RunConfig, {"fizz": 1}, "config")

    def test_nested_unknown_key_has_path(self):
        with pytest.raises(ConfigError, match="config.train"):
            build_config(RunConfig, {"train": {"bogus": 2}}, "config")

    def test_range_errors_name_field(self):
        cfg_dict = config_to_dict(RunConfig())
        cfg_dict["train"]["tau"] = 0.4
        cfg = build_config(RunConfig, cfg_dict, "config")
        with pytest.raises(ConfigError, match="tau"):
            cfg.validate()

    def test_bad_strategy(self):
        d = config_to_dict(RunConfig())
        d["train"]["strategy"] = "alchemy"
        with pytest.raises(ConfigError, match="strategy"):
            build_config(RunConfig, d, "config").validate()

    def test_round_trip_via_json(self, tmp_path):
        text = default_config_json(seed=9)
        p = tmp_path / "cfg.json"
        p.write_text(text)
        cfg = load_run_config(p)
        assert cfg.seed == 9
        assert json.loads(default_config_json(seed=9)) == config_to_dict(cfg)

    def test_preset_names(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            preset_config("nope")


def tiny_run_config(tmp_path, seed=5):
    cfg = RunConfig(seed=seed)
    for d in (cfg.source, cfg.target, cfg.target_val):
        d.scene_count = 16
        d.grid.extent = 8.0
        d.grid.resolution = 0.5
        d.world_extent = 20.0
        d.count.hi = 6
    cfg.target_val.scene_count = 8
    cfg.reference_scene_count = 16
    cfg.train.epochs = 1
    cfg.train.widths = (4, 8, 8, 8)
    cfg.train.head_mid = 4
    cfg.train.critic_mid = 4
    cfg.train.warmup_iters = 5
    return cfg


class TestCli:
    def _write(self, tmp_path, name, payload):
        p = tmp_path / name
        p.write_text(json.dumps(payload))
        return str(p)

    def test_print_defaults_and_load(self, tmp_path, capsys):
        out = tmp_path / "defaults.json"
        assert cli.main(["print-defaults", "--out", str(out)]) == 0
        cfg = load_run_config(out)
        cfg.validate()
        assert cli.main(["print-defaults", "--preset", "gap_standard", "--seed", "3"]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["seed"] == 3

    def test_generate_analyze_round_trip(self, tmp_path, capsys):
        gen_cfg = {"seed": 4, "dataset": {
            "name": "tiny", "scene_count": 12, "world_extent": 20.0,
            "grid": {"extent": 8.0, "resolution": 0.5},
            "count": {"kind": "uniform", "lo": 0, "hi": 6},
        }}
        cfg_path = self._write(tmp_path, "gen.json", gen_cfg)
        out_a = tmp_path / "data_a"
        assert cli.main(["generate", "--config", cfg_path, "--out", str(out_a)]) == 0
        assert (out_a / "manifest.json").exists()

        rep = tmp_path / "analysis"
        assert cli.main(["analyze", str(out_a), str(out_a), "--out", str(rep)]) == 0
        report = json.loads((rep / "report.json").read_text())
        assert report["jsd"] == pytest.approx(0.0, abs=1e-12)
        assert (rep / "marginal_a.f32").exists()
        assert (rep / "marginal_a.pgm").exists()
        assert report["datasets"]["a"]["scene_count"] == 12

    def test_generate_determinism_byte_identical(self, tmp_path):
        gen_cfg = {"seed": 4, "dataset": {
            "name": "tiny", "scene_count": 10, "world_extent": 20.0,
            "grid": {"extent": 8.0, "resolution": 0.5},
        }}
        cfg_path = self._write(tmp_path, "gen.json", gen_cfg)
        cli.main(["generate", "--config", cfg_path, "--out", str(tmp_path / "d1")])
        cli.main(["generate", "--config", cfg_path, "--out", str(tmp_path / "d2")])
        m1 = (tmp_path / "d1" / "manifest.json").read_bytes()
        m2 = (tmp_path / "d2" / "manifest.json").read_bytes()
        assert m1 == m2

    def test_generate_rejects_unknown_keys(self, tmp_path, capsys):
        cfg_path = self._write(tmp_path, "bad.json", {"seed": 1, "dataset": {"wat": 5}})
        assert cli.main(["generate", "--config", cfg_path, "--out", str(tmp_path / "x")]) == 1
        assert "unknown keys" in capsys.readouterr().err

    def test_train_eval_pipeline(self, tmp_path, capsys):
        cfg = tiny_run_config(tmp_path)
        cfg_path = self._write(tmp_path, "run.json", config_to_dict(cfg))
        out = tmp_path / "run_out"
        assert cli.main(["train", "--config", cfg_path, "--out", str(out)]) == 0
        assert (out / "checkpoint.ckpt").exists()
        with open(out / "metrics.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4  # 16 scenes / batch 4, 1 epoch
        assert set(rows[0]) == {"iter", "seg_loss", "d_st", "pseudo_loss",
                                "lambda_t", "confident_frac", "lr"}
        report = json.loads((out / "report.json").read_text())
        assert "final_iou" in report and "jsd_source_to_reference" in report

        # eval the checkpoint against a generated dataset directory
        gen_cfg = {"seed": 77, "dataset": json.loads(json.dumps(config_to_dict(cfg)))["target_val"]}
        gen_path = self._write(tmp_path, "val.json", gen_cfg)
        val_dir = tmp_path / "valset"
        assert cli.main(["generate", "--config", gen_path, "--out", str(val_dir)]) == 0
        eval_out = tmp_path / "eval_out"
        assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.ckpt"),
                         "--data", str(val_dir), "--out", str(eval_out)]) == 0
        with open(eval_out / "eval.csv") as f:
            eval_rows = list(csv.DictReader(f))
        assert len(eval_rows) == 8
        assert [r["scene_id"] for r in eval_rows] == [str(i) for i in range(8)]

    def test_eval_architecture_mismatch(self, tmp_path, capsys):
        cfg = tiny_run_config(tmp_path)
        cfg_path = self._write(tmp_path, "run.json", config_to_dict(cfg))
        out = tmp_path / "run_out"
        cli.main(["train", "--config", cfg_path, "--out", str(out)])
        other = config_to_dict(cfg)["target_val"]
        other["grid"] = {"extent": 4.0, "resolution": 0.5}
        gen_path = self._write(tmp_path, "other.json", {"seed": 1, "dataset": other})
        other_dir = tmp_path / "otherset"
        cli.main(["generate", "--config", gen_path, "--out", str(other_dir)])
        code = cli.main(["eval", "--checkpoint", str(out / "checkpoint.ckpt"),
                         "--data", str(other_dir), "--out", str(tmp_path / "eo")])
        assert code == 1
        assert "does not match" in capsys.readouterr().err

    def test_sweep_single_point_matches_direct_run(self, tmp_path):
        base = tiny_run_config(tmp_path)
        sweep_cfg = {
            "axis": "strategy",
            "values": ["no_adapt"],
            "seeds": [base.seed],
            "base": config_to_dict(base),
        }
        cfg_path = self._write(tmp_path, "sweep.json", sweep_cfg)
        out = tmp_path / "sweep_out"
        assert cli.main(["sweep", "--config", cfg_path, "--out", str(out)]) == 0
        with open(out / "sweep.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1 and rows[0]["error"] == ""

        direct_cfg = copy.deepcopy(base)
        direct_cfg.train.strategy = "no_adapt"
        direct = runner.run_experiment(direct_cfg)
        assert float(rows[0]["final_iou"]) == pytest.approx(direct.final_iou, abs=1e-6)
        assert float(rows[0]["jsd"]) == pytest.approx(direct.jsd_source_to_reference, rel=1e-6)

    def test_sweep_records_failures_and_continues(self, tmp_path):
        base = tiny_run_config(tmp_path)
        sweep_cfg = {
            "axis": "npc_count",
            "values": [{"kind": "fixed", "n": 2}, {"kind": "fixed", "n": -3}],
            "seeds": [1],
            "base": config_to_dict(base),
        }
        cfg_path = self._write(tmp_path, "sweep.json", sweep_cfg)
        out = tmp_path / "sweep_out"
        assert cli.main(["sweep", "--config", cfg_path, "--out", str(out)]) == 0
        with open(out / "sweep.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert rows[0]["error"] == "" and rows[1]["error"] != ""

    def test_missing_config_file(self, capsys):
        assert cli.main(["train", "--config", "/nonexistent.json", "--out", "/tmp/x"]) == 1

    def test_resume_continues_identically(self, tmp_path):
        cfg = tiny_run_config(tmp_path)
        cfg.train.epochs = 2
        full = runner.run_experiment(copy.deepcopy(cfg))

        half = copy.deepcopy(cfg)
        half.train.epochs = 1
        out = tmp_path / "half"
        runner.run_experiment(half, out_dir=out)
        resumed = runner.run_experiment(copy.deepcopy(cfg),
                                        resume_from=out / "checkpoint.ckpt")
        full_tail = full.metrics[len(full.metrics) // 2:]
        assert len(resumed.metrics) == len(full_tail)
        for a, b in zip(resumed.metrics, full_tail):
            assert a == b
        assert resumed.final_iou == full.final_iou
