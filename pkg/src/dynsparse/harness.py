"""Run orchestration: dataset/model construction from a RunConfig, training
runs with CSV metrics, evaluation dumps, benchmarking, and heatmap export.
The CLI is a thin wrapper over these functions; tests call them directly."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import SyntheticDataset, generate
from .flops import flops_hier, flops_vit
from .hier import HierModel
from .layers import copy_weights, load_arrays, named_arrays
from .tensor import Tensor
from .train import (
    cache_teacher,
    evaluate_dense,
    evaluate_sparsified,
    train_sparsified,
    train_teacher,
)
from .vit import VitModel

TEACHER_FILE = "teacher.ckpt"
STUDENT_FILE = "student.ckpt"
CONFIG_FILE = "config.json"

TEACHER_COLUMNS = ["epoch", "loss_total", "train_acc", "eval_acc"]


def student_columns(stages: int) -> list[str]:
    cols = [
        "epoch",
        "loss_total",
        "loss_cls",
        "loss_kl",
        "loss_distill",
        "loss_ratio",
        "train_acc",
    ]
    cols += [f"keep_ratio_stage{s}" for s in range(stages)]
    cols += ["eval_acc"]
    return cols


def _rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def build_dataset(cfg: RunConfig) -> SyntheticDataset:
    return generate(cfg.default_dataset_for_pipeline())


def build_model(cfg: RunConfig, stages: int, rng: np.random.Generator, dtype=np.float32):
    if cfg.pipeline == "vit":
        return VitModel.create(cfg.model_config(), rng, stages=stages, dtype=dtype)
    return HierModel.create(
        cfg.model_config(), rng, stages=stages, with_fast_paths=stages > 0, dtype=dtype
    )


def write_metrics_csv(rows: list[dict], columns: list[str], path: Path) -> None:
    """Fixed column order; wall-clock times are excluded so identical runs
    produce byte-identical files."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in columns])


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def save_model(path: Path, model) -> None:
    arrays = named_arrays({"weights": model.weights, "predictors": model.predictors})
    checkpoint.save(path, arrays)


def load_model(path: Path, model) -> None:
    arrays = checkpoint.load(path)
    load_arrays({"weights": model.weights, "predictors": model.predictors}, arrays)


class MissingTeacherError(FileNotFoundError):
    pass


def teacher_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / TEACHER_FILE


def student_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / STUDENT_FILE


def run_train_teacher(cfg: RunConfig, log=None) -> list[dict]:
    """Dense pretraining: the same harness with sparsification disabled."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    rng_init, rng_train = _rngs(cfg.seed, 2)
    model = build_model(cfg, stages=0, rng=rng_init)
    rows = train_teacher(model, dataset, cfg.optim(), rng_train, log=log)
    save_model(teacher_checkpoint(cfg), model)
    write_metrics_csv(rows, TEACHER_COLUMNS, out / "metrics_teacher.csv")
    (out / CONFIG_FILE).write_text(cfg.to_json())
    return rows


def run_train(cfg: RunConfig, train_teacher_if_missing: bool = False, log=None) -> list[dict]:
    """Sparsified fine-tuning from the teacher initialization."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_path = teacher_checkpoint(cfg)
    if not t_path.exists():
        if train_teacher_if_missing:
            run_train_teacher(cfg, log=log)
        else:
            raise MissingTeacherError(
                f"teacher checkpoint not found at {t_path}; run the train-teacher "
                f"subcommand (or pass --train-teacher) first"
            )
    dataset = build_dataset(cfg)
    schedule = cfg.schedule()
    rng_init, rng_train = _rngs(cfg.seed, 2)

    teacher = build_model(cfg, stages=0, rng=np.random.default_rng(0))
    load_model(t_path, teacher)

    student = build_model(cfg, stages=schedule.stages, rng=rng_init)
    student.weights = _init_from_teacher(student.weights, teacher.weights)

    rows = train_sparsified(
        student,
        teacher,
        schedule,
        dataset,
        cfg.loss_weights(),
        cfg.optim(),
        rng_train,
        use_distill=cfg.use_distill,
        use_kl=cfg.use_kl,
        log=log,
    )
    save_model(student_checkpoint(cfg), student)
    write_metrics_csv(rows, student_columns(schedule.stages), out / "metrics.csv")
    (out / CONFIG_FILE).write_text(cfg.to_json())
    return rows


def _init_from_teacher(student_weights, teacher_weights):
    """Backbone starts from the pretrained dense weights. For hierarchical
    students the teacher has no fast paths, so those stay freshly initialized."""
    fresh = copy_weights(teacher_weights)
    if hasattr(student_weights, "stages"):  # hierarchical: preserve fast paths
        for s_blocks, f_blocks in zip(student_weights.stages, fresh.stages):
            for s_blk, f_blk in zip(s_blocks, f_blocks):
                f_blk.fast = s_blk.fast
    return fresh


def run_eval(
    cfg: RunConfig,
    policy: str = "learned",
    which: str = "student",
    policy_seed: int = 0,
    dump_dir: Optional[Path] = None,
) -> dict:
    """Deterministic evaluation with per-stage kept-index dumps and
    selection-quality metrics against the planted informativeness maps."""
    cfg.validate()
    dataset = build_dataset(cfg)
    schedule = cfg.schedule()
    stages = schedule.stages if which == "student" else 0
    model = build_model(cfg, stages=stages, rng=np.random.default_rng(0))
    path = student_checkpoint(cfg) if which == "student" else teacher_checkpoint(cfg)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    load_model(path, model)
    if not schedule.enabled or (which == "teacher" and policy == "learned"):
        # No sparsification: plain dense accuracy.
        result = {
            "accuracy": evaluate_dense(model, dataset, cfg.batch_size),
            "policy": "dense",
            "stages": [],
        }
    else:
        result = evaluate_sparsified(
            model,
            schedule,
            dataset,
            policy=policy,
            rng=np.random.default_rng(policy_seed),
            batch_size=cfg.batch_size,
            collect=dump_dir is not None,
        )
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        kept = result.pop("stage_kept", [])
        result.pop("stage_probs", None)
        payload = {
            "policy": result["policy"],
            "accuracy": result["accuracy"],
            "stages": result["stages"],
            "kept_indices": [arr.tolist() for arr in kept],
        }
        (dump_dir / f"eval_{result['policy']}.json").write_text(json.dumps(payload))
    return result


def run_bench(cfg: RunConfig, batch_size: int = 32, repeats: int = 10, warmups: int = 3) -> dict:
    """Median wall-clock throughput, dense vs sparsified inference, with the
    analytic FLOPs of each path alongside."""
    cfg.validate()
    dataset = build_dataset(cfg)
    schedule = cfg.schedule()
    model = build_model(cfg, stages=schedule.stages, rng=np.random.default_rng(0))
    path = student_checkpoint(cfg)
    if path.exists():
        load_model(path, model)
    xs = dataset.tokens("eval") if cfg.pipeline == "vit" else dataset.eval_x
    batch = Tensor(xs[:batch_size].astype(model.dtype))

    def throughput(fn) -> tuple[float, list[float]]:
        for _ in range(warmups):
            fn()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        median = sorted(times)[len(times) // 2]
        return batch_size / median, times

    dense_tp, dense_times = throughput(lambda: model.forward_dense(batch))
    sparse_tp, sparse_times = throughput(lambda: model.forward_infer(batch, schedule))
    if cfg.pipeline == "vit":
        dense_flops = flops_vit(cfg.model_config(), None).gflops
        sparse_flops = flops_vit(cfg.model_config(), schedule).gflops
    else:
        dense_flops = flops_hier(cfg.model_config(), None).gflops
        sparse_flops = flops_hier(cfg.model_config(), schedule).gflops
    return {
        "batch_size": batch_size,
        "repeats": repeats,
        "dense": {
            "throughput": dense_tp,
            "gflops": dense_flops,
            "times": dense_times,
        },
        "sparsified": {
            "throughput": sparse_tp,
            "gflops": sparse_flops,
            "times": sparse_times,
        },
        "speedup": sparse_tp / dense_tp,
    }


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Binary portable graymap of values in [0, 1]."""
    grid = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    h, w = grid.shape
    data = (grid * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def run_heatmap(cfg: RunConfig, out_dir: Optional[Path] = None, samples: int = 8) -> dict:
    """Per-stage mean keep-probability grids over the eval split, plus the
    first few samples' kept/dropped masks, as CSV and graymaps."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir) / "heatmaps"
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    schedule = cfg.schedule()
    if cfg.pipeline == "vit":
        grid = cfg.model_config().grid
    else:
        mc = cfg.model_config()
        grid = mc.stage_grid(mc.sparsify_stage)
    n_pos = grid[0] * grid[1]
    stages = max(schedule.stages, 1)
    if not schedule.enabled:
        mean_maps = [np.ones(grid) for _ in range(stages)]
        sample_masks = [np.ones((samples,) + grid) for _ in range(stages)]
    else:
        model = build_model(cfg, stages=schedule.stages, rng=np.random.default_rng(0))
        path = student_checkpoint(cfg)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        load_model(path, model)
        result = evaluate_sparsified(
            model, schedule, dataset, batch_size=cfg.batch_size, collect=True
        )
        mean_maps = [probs.mean(axis=0).reshape(grid) for probs in result["stage_probs"]]
        sample_masks = []
        for kept in result["stage_kept"]:
            mask = np.zeros((kept.shape[0], n_pos))
            np.put_along_axis(mask, kept, 1.0, axis=1)
            sample_masks.append(mask[:samples].reshape(-1, *grid))
    written = []
    for s, mean_map in enumerate(mean_maps):
        csv_path = out / f"stage{s}_keep_probability.csv"
        np.savetxt(csv_path, mean_map, delimiter=",", fmt="%.6f")
        pgm_path = out / f"stage{s}_keep_probability.pgm"
        write_pgm(pgm_path, mean_map)
        written += [str(csv_path), str(pgm_path)]
        for i in range(sample_masks[s].shape[0]):
            spath = out / f"stage{s}_sample{i:02d}_mask.pgm"
            write_pgm(spath, sample_masks[s][i])
            written.append(str(spath))
    return {"files": written, "mean_maps": mean_maps}
