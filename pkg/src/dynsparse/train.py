"""Training loops: dense teacher pretraining and sparsified fine-tuning with
self-distillation, plus evaluation with selection-quality metrics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import SyntheticDataset
from .hier import HierModel, HierSchedule
from .layers import copy_weights, parameters
from .losses import LossParts, LossWeights, loss_cls, loss_distill_dense, loss_distill_tokens, loss_kl, loss_ratio, loss_total
from .predictor import DecisionMask
from .tensor import Tape, Tensor
from .vit import SparsificationSchedule, VitModel


@dataclass
class OptimConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    warmup_frozen_epochs: int = 3  # backbone frozen while the scorer warms up
    backbone_lr_scale: float = 0.01
    teacher_epochs: int = 15
    cosine: bool = True

    def lr_at(self, epoch: int, total: int) -> float:
        if not self.cosine or total <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / total))


class Adam:
    """Adam over named parameter groups with per-group learning-rate scales."""

    def __init__(
        self,
        groups: dict[str, tuple[list[Tensor], float]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0
        for name, (params, _) in groups.items():
            for i, p in enumerate(params):
                self._m[(name, i)] = np.zeros_like(p.data)
                self._v[(name, i)] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for params, _ in self.groups.values():
            for p in params:
                p.grad = None

    def step(self, lr: float, frozen: Sequence[str] = ()) -> None:
        self._t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self._t
        bias2 = 1.0 - b2 ** self._t
        for name, (params, scale) in self.groups.items():
            if name in frozen:
                continue
            group_lr = lr * scale
            for i, p in enumerate(params):
                if p.grad is None:
                    continue
                g = p.grad
                m = self._m[(name, i)]
                v = self._v[(name, i)]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                p.data -= group_lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# -- teacher -------------------------------------------------------------------


def train_teacher(
    model,
    dataset: SyntheticDataset,
    optim: OptimConfig,
    rng: np.random.Generator,
    log: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Dense classification training (the sparsification-disabled code path)."""
    is_vit = isinstance(model, VitModel)
    xs = dataset.tokens("train") if is_vit else dataset.train_x
    ys = dataset.train_y
    opt = Adam({"backbone": (parameters(model.weights), 1.0)})
    rows = []
    for epoch in range(optim.teacher_epochs):
        t0 = time.perf_counter()
        lr = optim.lr_at(epoch, optim.teacher_epochs)
        total_loss = 0.0
        correct = 0
        for idx in _batches(len(ys), optim.batch_size, rng):
            batch = Tensor(xs[idx].astype(model.dtype))
            opt.zero_grad()
            with Tape() as tape:
                logits, _ = model.forward_dense(batch)
                loss = loss_cls(logits, ys[idx])
            tape.backward(loss)
            opt.step(lr)
            total_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == ys[idx]).sum())
        row = {
            "epoch": epoch,
            "loss_total": total_loss / len(ys),
            "train_acc": correct / len(ys),
            "eval_acc": evaluate_dense(model, dataset, optim.batch_size),
            "seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        if log:
            log(row)
    return rows


def evaluate_dense(model, dataset: SyntheticDataset, batch_size: int = 64) -> float:
    is_vit = isinstance(model, VitModel)
    xs = dataset.tokens("eval") if is_vit else dataset.eval_x
    ys = dataset.eval_y
    correct = 0
    for start in range(0, len(ys), batch_size):
        batch = Tensor(xs[start : start + batch_size].astype(model.dtype))
        logits, _ = model.forward_dense(batch)
        correct += int((logits.data.argmax(axis=1) == ys[start : start + batch_size]).sum())
    return correct / len(ys)


# -- sparsified fine-tuning ------------------------------------------------------


@dataclass
class TeacherCache:
    """Frozen teacher signals precomputed once for the whole training split."""

    tokens: np.ndarray  # ViT: (n, N, C) final patch tokens; hier: (n, h, w, C)
    logits: np.ndarray  # (n, classes)


def cache_teacher(teacher, dataset: SyntheticDataset, batch_size: int = 64) -> TeacherCache:
    is_vit = isinstance(teacher, VitModel)
    xs = dataset.tokens("train") if is_vit else dataset.train_x
    toks = []
    logits = []
    for start in range(0, xs.shape[0], batch_size):
        batch = Tensor(xs[start : start + batch_size].astype(teacher.dtype))
        out_logits, out_feats = teacher.forward_dense(batch)
        toks.append(out_feats.data.copy())
        logits.append(out_logits.data.copy())
    return TeacherCache(tokens=np.concatenate(toks), logits=np.concatenate(logits))


def train_sparsified(
    student,
    teacher,
    schedule,
    dataset: SyntheticDataset,
    weights: LossWeights,
    optim: OptimConfig,
    rng: np.random.Generator,
    use_distill: bool = True,
    use_kl: bool = True,
    log: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Joint fine-tuning of the backbone (low LR, frozen during warmup) and
    the prediction modules against the full objective."""
    is_vit = isinstance(student, VitModel)
    xs = dataset.tokens("train") if is_vit else dataset.train_x
    ys = dataset.train_y
    cache = cache_teacher(teacher, dataset, optim.batch_size)
    opt = Adam(
        {
            "backbone": (parameters(student.weights), optim.backbone_lr_scale),
            "predictor": (parameters(student.predictors), 1.0),
        }
    )
    rows = []
    stages = schedule.stages
    for epoch in range(optim.epochs):
        t0 = time.perf_counter()
        lr = optim.lr_at(epoch, optim.epochs)
        frozen = ("backbone",) if epoch < optim.warmup_frozen_epochs else ()
        sums = {"loss_total": 0.0, "loss_cls": 0.0, "loss_kl": 0.0, "loss_distill": 0.0, "loss_ratio": 0.0}
        ratio_sums = np.zeros(stages)
        correct = 0
        for idx in _batches(len(ys), optim.batch_size, rng):
            batch = Tensor(xs[idx].astype(student.dtype))
            t_tokens = Tensor(cache.tokens[idx].astype(student.dtype))
            t_logits = Tensor(cache.logits[idx].astype(student.dtype))
            opt.zero_grad()
            with Tape() as tape:
                if is_vit:
                    out = student.forward_train(batch, schedule, rng=rng)
                    stage_masks = [_patch_values(m) for m in out.masks]
                    distill = (
                        loss_distill_tokens(out.patch_tokens, t_tokens, stage_masks[-1])
                        if use_distill and stage_masks
                        else None
                    )
                else:
                    out = student.forward_train(batch, schedule, rng=rng)
                    stage_masks = out.masks
                    distill = (
                        loss_distill_dense(out.features, t_tokens) if use_distill else None
                    )
                parts = LossParts(
                    cls=loss_cls(out.logits, ys[idx]),
                    kl=loss_kl(out.logits, t_logits) if use_kl else None,
                    distill=distill,
                    ratio=loss_ratio(stage_masks, weights.targets) if stage_masks else None,
                )
                total = loss_total(parts, weights)
            tape.backward(total)
            opt.step(lr, frozen=frozen)
            n_b = len(idx)
            sums["loss_total"] += total.item() * n_b
            for key, value in parts.scalars().items():
                sums[key] += value * n_b
            for s, mask in enumerate(stage_masks):
                ratio_sums[s] += float(mask.data.mean()) * n_b
            correct += int((out.logits.data.argmax(axis=1) == ys[idx]).sum())
        n = len(ys)
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}, "train_acc": correct / n}
        for s in range(stages):
            row[f"keep_ratio_stage{s}"] = float(ratio_sums[s] / n)
        row["eval_acc"] = evaluate_sparsified(student, schedule, dataset)["accuracy"]
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        if log:
            log(row)
    return rows


def _patch_values(mask: DecisionMask) -> Tensor:
    """Patch-token slice of a decision mask (class token excluded from the
    ratio bookkeeping; its decision is pinned)."""
    if mask.class_index is None:
        return mask.values
    n = mask.values.shape[-1]
    return T.narrow(mask.values, mask.values.ndim - 1, 1, n - 1)


# -- evaluation -------------------------------------------------------------------


def evaluate_sparsified(
    model,
    schedule,
    dataset: SyntheticDataset,
    policy: str = "learned",
    rng: Optional[np.random.Generator] = None,
    batch_size: int = 64,
    collect: bool = False,
) -> dict:
    """Deterministic sparsified inference over the eval split.

    Returns accuracy, per-stage selection-quality metrics against the
    planted informativeness maps, and (with ``collect``) the per-sample
    kept-index lists and keep-probability dumps."""
    is_vit = isinstance(model, VitModel)
    xs = dataset.tokens("eval") if is_vit else dataset.eval_x
    ys = dataset.eval_y
    correct = 0
    stage_kept: list[list[np.ndarray]] = []
    stage_probs: list[list[np.ndarray]] = []
    for start in range(0, len(ys), batch_size):
        batch = Tensor(xs[start : start + batch_size].astype(model.dtype))
        out = model.forward_infer(batch, schedule, policy=policy, rng=rng)
        correct += int((out.logits.data.argmax(axis=1) == ys[start : start + batch_size]).sum())
        if not stage_kept:
            stage_kept = [[] for _ in out.stage_kept]
            stage_probs = [[] for _ in out.stage_probs]
        for s, kept in enumerate(out.stage_kept):
            stage_kept[s].append(kept)
        for s, probs in enumerate(out.stage_probs):
            stage_probs[s].append(probs)
    kept_arrays = [np.concatenate(parts) for parts in stage_kept]
    if is_vit:
        truth = dataset.maps_flat("eval").astype(bool)
    else:
        stage_grid = model.config.stage_grid(model.config.sparsify_stage)
        truth = pooled_maps(dataset.eval_maps, stage_grid)
    result = {
        "accuracy": correct / len(ys),
        "policy": policy,
        "stages": selection_metrics(kept_arrays, truth),
    }
    if collect:
        result["stage_kept"] = kept_arrays
        result["stage_probs"] = [np.concatenate(parts) for parts in stage_probs]
    return result


def pooled_maps(maps: np.ndarray, stage_grid: tuple[int, int]) -> np.ndarray:
    """Majority-pool (n, H, W) informativeness maps down to the decision
    grid of the sparsified stage, flattened to (n, h*w)."""
    n, h, w = maps.shape
    sh, sw = stage_grid
    if h % sh or w % sw:
        raise ValueError(f"map grid {h}x{w} not divisible by stage grid {sh}x{sw}")
    fh, fw = h // sh, w // sw
    pooled = maps.reshape(n, sh, fh, sw, fw).mean(axis=(2, 4)) >= 0.5
    return pooled.reshape(n, sh * sw)


def selection_metrics(kept_arrays: list[np.ndarray], truth: np.ndarray) -> list[dict]:
    """Overlap between kept positions and the planted informative map.

    recall = |kept ∩ informative| / |informative|, whose random-selection
    baseline is m/N; learned selection is good when the lift exceeds 1."""
    metrics = []
    n_positions = truth.shape[1]
    for kept in kept_arrays:
        _, m = kept.shape
        overlaps = np.take_along_axis(truth, kept, axis=1).sum(axis=1)
        n_inf = np.maximum(truth.sum(axis=1), 1)
        recall = float((overlaps / n_inf).mean())
        precision = float((overlaps / m).mean())
        baseline = m / n_positions
        metrics.append(
            {
                "kept": int(m),
                "positions": int(n_positions),
                "recall": recall,
                "precision": precision,
                "random_baseline": baseline,
                "lift": recall / baseline if baseline > 0 else float("nan"),
            }
        )
    return metrics
