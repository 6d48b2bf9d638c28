"""Optimizer, training loops, selection metrics, and run reproducibility."""

import numpy as np
import pytest

from dynsparse.config import RunConfig
from dynsparse.data import DatasetSpec, generate
from dynsparse import harness
from dynsparse.tensor import Tape, Tensor
from dynsparse.train import Adam, OptimConfig, pooled_maps, selection_metrics


class TestAdam:
    def test_minimizes_quadratic(self):
        target = np.array([3.0, -2.0, 0.5])
        p = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
        opt = Adam({"p": ([p], 1.0)})
        for _ in range(400):
            opt.zero_grad()
            with Tape() as tape:
                diff = p - Tensor(target, dtype=np.float64)
                loss = (diff * diff).sum()
            tape.backward(loss)
            opt.step(0.05)
        assert np.abs(p.data - target).max() < 1e-3

    def test_frozen_group_untouched(self):
        a = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
        b = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
        opt = Adam({"a": ([a], 1.0), "b": ([b], 1.0)})
        opt.zero_grad()
        with Tape() as tape:
            loss = (a * a).sum() + (b * b).sum()
        tape.backward(loss)
        opt.step(0.1, frozen=("b",))
        assert not np.allclose(a.data, 1.0)
        assert np.allclose(b.data, 1.0)

    def test_lr_scale_applied(self):
        a = Tensor(np.ones(1), requires_grad=True, dtype=np.float64)
        b = Tensor(np.ones(1), requires_grad=True, dtype=np.float64)
        opt = Adam({"fast": ([a], 1.0), "slow": ([b], 0.01)})
        opt.zero_grad()
        with Tape() as tape:
            loss = (a * 1.0).sum() + (b * 1.0).sum()
        tape.backward(loss)
        opt.step(0.1)
        assert abs(1.0 - a.data[0]) > 50 * abs(1.0 - b.data[0])


class TestSelectionMetrics:
    def test_recall_precision_baseline(self):
        truth = np.zeros((2, 8), dtype=bool)
        truth[:, :4] = True  # 4 informative of 8
        kept = np.array([[0, 1, 5], [2, 3, 6]])  # 2 of 3 informative each
        (m,) = selection_metrics([kept], truth)
        assert m["kept"] == 3 and m["positions"] == 8
        assert abs(m["recall"] - 0.5) < 1e-12  # 2/4
        assert abs(m["precision"] - 2 / 3) < 1e-12
        assert abs(m["random_baseline"] - 3 / 8) < 1e-12
        assert abs(m["lift"] - (0.5 / (3 / 8))) < 1e-12

    def test_pooled_maps_majority(self):
        maps = np.zeros((1, 4, 4), dtype=bool)
        maps[0, :2, :2] = True  # one 2x2 quadrant fully informative
        pooled = pooled_maps(maps, (2, 2))
        assert pooled.tolist() == [[True, False, False, False]]


class TestCosineSchedule:
    def test_endpoints(self):
        cfg = OptimConfig(lr=1.0, epochs=10)
        assert abs(cfg.lr_at(0, 10) - 1.0) < 1e-12
        assert cfg.lr_at(9, 10) < 0.05
        flat = OptimConfig(lr=0.5, cosine=False)
        assert flat.lr_at(7, 10) == 0.5


class TestReproducibility:
    def _tiny_cfg(self, out):
        return RunConfig(
            out_dir=str(out),
            seed=11,
            epochs=1,
            teacher_epochs=1,
            batch_size=32,
            warmup_frozen_epochs=0,
            dataset=DatasetSpec(train_size=64, eval_size=32),
        )

    def test_identical_seed_identical_metrics_csv(self, tmp_path):
        rows = {}
        csvs = {}
        for tag in ("a", "b"):
            cfg = self._tiny_cfg(tmp_path / tag)
            harness.run_train_teacher(cfg)
            rows[tag] = harness.run_train(cfg)
            csvs[tag] = (tmp_path / tag / "metrics.csv").read_text()
        assert csvs["a"] == csvs["b"]
        assert (tmp_path / "a" / "metrics_teacher.csv").read_text() == (
            tmp_path / "b" / "metrics_teacher.csv"
        ).read_text()

    def test_missing_teacher_error_names_flag(self, tmp_path):
        cfg = self._tiny_cfg(tmp_path / "x")
        with pytest.raises(harness.MissingTeacherError, match="--train-teacher"):
            harness.run_train(cfg)

    def test_rho_one_run_matches_teacher_accuracy(self, tmp_path):
        import dataclasses

        cfg = dataclasses.replace(self._tiny_cfg(tmp_path / "r1"), rho=1.0, epochs=1)
        harness.run_train_teacher(cfg)
        rows = harness.run_train(cfg)
        teacher_eval = harness.run_eval(cfg, which="teacher")
        assert abs(rows[-1]["eval_acc"] - teacher_eval["accuracy"]) <= 0.005
