"""CLI surface: subcommands, flag plumbing, config validation, artifacts."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from dynsparse import harness
from dynsparse.cli import main
from dynsparse.config import ConfigError, RunConfig
from dynsparse.data import DatasetSpec


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig(out_dir=str(tmp_path), seed=3, rho=0.8)
        path = tmp_path / "c.json"
        path.write_text(cfg.to_json())
        loaded = RunConfig.from_file(path)
        assert loaded == cfg

    def test_single_structured_error_lists_problems(self):
        cfg = RunConfig(pipeline="vit", rho=1.5, batch_size=0, fast_path="warp")
        with pytest.raises(ConfigError) as err:
            cfg.validate()
        msg = str(err.value)
        assert "rho" in msg and "batch_size" in msg and "fast_path" in msg

    def test_unknown_fields_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"pipeline": "vit", "bogus": 1}))
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_file(path)

    def test_bad_json_structured_error(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            RunConfig.from_file(path)

    def test_hier_rho_bounds(self):
        cfg = RunConfig(pipeline="hier", preset="tiny-hier", rho=0.35)
        cfg = dataclasses.replace(cfg, dataset=cfg.default_dataset_for_pipeline())
        with pytest.raises(ConfigError, match="0.4"):
            cfg.validate()


class TestFlopsCommand:
    def test_table_output(self, capsys):
        assert main(["flops", "--pipeline", "vit", "--preset", "deit-s", "--rho", "0.7"]) == 0
        out = capsys.readouterr().out
        assert "multiply-accumulate" in out
        assert "reduction vs dense" in out

    def test_json_output_and_save(self, capsys, tmp_path):
        save = tmp_path / "report.json"
        code = main(
            ["flops", "--pipeline", "hier", "--preset", "convnext-s", "--rho", "0.9",
             "--fast-path", "linear", "--json", "--save", str(save)]
        )
        assert code == 0
        data = json.loads(save.read_text())
        assert abs(data["gflops"] - 6.76) < 0.2
        assert abs(data["reduction_pct"] - 22.0) < 3.0

    def test_structural_flag(self, capsys):
        assert main(["flops", "--pipeline", "vit", "--preset", "deit-s", "--structural"]) == 0
        out = capsys.readouterr().out
        assert "block06" in out  # pooled from the 7th block on

    def test_invalid_config_is_error_exit(self, capsys):
        assert main(["flops", "--pipeline", "vit", "--preset", "nope"]) == 2
        assert "error:" in capsys.readouterr().err


class TestTrainedRunCommands:
    def test_metrics_files_exist(self, mini_run):
        out = Path(mini_run["cfg"].out_dir)
        assert (out / "teacher.ckpt").exists()
        assert (out / "student.ckpt").exists()
        teacher_csv = (out / "metrics_teacher.csv").read_text().splitlines()
        assert teacher_csv[0] == "epoch,loss_total,train_acc,eval_acc"
        metrics_csv = (out / "metrics.csv").read_text().splitlines()
        assert metrics_csv[0].startswith("epoch,loss_total,loss_cls,loss_kl,loss_distill,loss_ratio")
        assert len(metrics_csv) == 1 + mini_run["cfg"].epochs
        assert (out / "config.json").exists()

    def test_eval_command_dumps_indices(self, mini_run, capsys):
        out = mini_run["cfg"].out_dir
        assert main(["eval", "--out", out, "--policy", "learned"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert 0.0 <= payload["accuracy"] <= 1.0
        assert len(payload["stages"]) == 3
        dump = json.loads((Path(out) / "eval" / "eval_learned.json").read_text())
        kept = dump["kept_indices"]
        assert len(kept) == 3
        assert len(kept[0][0]) == 44  # stage-1 kept patch tokens of 64

    def test_eval_random_policy(self, mini_run, capsys):
        out = mini_run["cfg"].out_dir
        assert main(["eval", "--out", out, "--policy", "random", "--policy-seed", "5"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["policy"] == "random"

    def test_bench_command(self, mini_run, capsys):
        out = mini_run["cfg"].out_dir
        assert main(["bench", "--out", out, "--batch-size", "16", "--repeats", "3"]) == 0
        text = capsys.readouterr().out
        assert "dense" in text and "sparsified" in text and "speedup" in text
        data = json.loads((Path(out) / "bench.json").read_text())
        assert data["sparsified"]["gflops"] < data["dense"]["gflops"]
        assert len(data["dense"]["times"]) == 3

    def test_heatmap_command(self, mini_run, capsys, tmp_path):
        out = mini_run["cfg"].out_dir
        dump = tmp_path / "maps"
        assert main(["heatmap", "--out", out, "--dump", str(dump)]) == 0
        grids = sorted(dump.glob("stage*_keep_probability.csv"))
        assert len(grids) == 3
        maps = [np.loadtxt(g, delimiter=",") for g in grids]
        for m in maps:
            assert m.shape == (8, 8)
            assert m.min() >= 0.0 and m.max() <= 1.0
        # later stages keep less on average
        assert maps[2].mean() <= maps[0].mean() + 1e-9
        pgm = (dump / "stage0_keep_probability.pgm").read_bytes()
        assert pgm.startswith(b"P5\n8 8\n255\n")
        assert len(pgm) == len(b"P5\n8 8\n255\n") + 64

    def test_missing_teacher_cli_error(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path / "fresh"), "--epochs", "1"])
        assert code == 2
        assert "--train-teacher" in capsys.readouterr().err


class TestHeatmapDisabledSchedule:
    def test_rho_one_all_ones(self, tmp_path):
        cfg = RunConfig(
            out_dir=str(tmp_path / "r1"),
            rho=1.0,
            dataset=DatasetSpec(train_size=16, eval_size=16),
        )
        result = harness.run_heatmap(cfg, out_dir=tmp_path / "maps")
        for m in result["mean_maps"]:
            assert np.all(m == 1.0)
