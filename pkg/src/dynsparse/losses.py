"""Training objective: classification, self-distillation (token-masked and
dense variants), teacher KL, and keep-ratio regularization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossWeights:
    """Scalar weights of the combined objective plus the ratio targets."""

    kl: float = 0.5
    distill: float = 0.5
    ratio: float = 2.0
    targets: tuple[float, ...] = ()

    def __post_init__(self):
        if min(self.kl, self.distill, self.ratio) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def for_vit(cls, targets: Sequence[float]) -> "LossWeights":
        return cls(kl=0.5, distill=0.5, ratio=2.0, targets=tuple(targets))

    @classmethod
    def for_hier(cls, targets: Sequence[float]) -> "LossWeights":
        return cls(kl=0.5, distill=0.5, ratio=10.0, targets=tuple(targets))


@dataclass
class TeacherOutputs:
    """Frozen teacher signals: final token features and class log-probs."""

    tokens: Tensor  # (B, N, C), no grad
    logits: Tensor  # (B, classes), no grad


@dataclass
class LossParts:
    cls: Tensor
    kl: Optional[Tensor] = None
    distill: Optional[Tensor] = None
    ratio: Optional[Tensor] = None

    def scalars(self) -> dict[str, float]:
        out = {"loss_cls": self.cls.item()}
        for name in ("kl", "distill", "ratio"):
            part = getattr(self, name)
            out[f"loss_{name}"] = part.item() if part is not None else 0.0
        return out


def loss_cls(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch."""
    return T.cross_entropy(logits, labels)


def loss_distill_tokens(tokens: Tensor, teacher_tokens: Tensor, mask: Tensor) -> Tensor:
    """Kept-token feature matching against the teacher.

    Per-token squared error (mean over channels) weighted by the final-stage
    keep mask and normalized by the total kept count, so dropped tokens
    contribute nothing.
    """
    if tokens.shape != teacher_tokens.shape:
        raise T.ShapeError(
            f"student/teacher token shapes disagree: {tokens.shape} vs "
            f"{teacher_tokens.shape}"
        )
    diff = tokens - teacher_tokens.detach()
    per_token = T.mean(diff * diff, axis=-1)  # (B, N)
    weighted = T.sum_(per_token * mask)
    total = T.sum_(mask)
    if total.item() <= 0:
        raise ValueError("distillation mask keeps no tokens")
    return weighted / total


def loss_distill_dense(features: Tensor, teacher_features: Tensor) -> Tensor:
    """Plain mean squared error between student and teacher features."""
    return T.mse(features, teacher_features.detach())


def loss_kl(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Forward KL(student || teacher) on softened class distributions,
    mean over the batch."""
    student_p = T.softmax(student_logits, axis=-1)
    teacher_log_p = _log_softmax(teacher_logits.detach())
    return T.kl_div(teacher_log_p, student_p)


def _log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    return shifted - T.log(T.sum_(T.exp(shifted), axis=-1, keepdims=True))


def loss_ratio(stage_masks: Sequence[Tensor], targets: Sequence[float]) -> Tensor:
    """MSE between realized per-stage keep fractions and targets, averaged
    over batch and stages. Consumes straight-through mask values so the
    gradient reaches the keep probabilities."""
    if len(stage_masks) != len(targets):
        raise T.ShapeError(
            f"{len(stage_masks)} stage masks vs {len(targets)} targets"
        )
    terms = []
    for mask, target in zip(stage_masks, targets):
        realized = T.mean(mask, axis=-1)  # (B,)
        err = realized - float(target)
        terms.append(T.mean(err * err))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def loss_total(parts: LossParts, weights: LossWeights) -> Tensor:
    """Weighted combination; missing parts contribute nothing."""
    total = parts.cls
    if parts.kl is not None and weights.kl > 0:
        total = total + parts.kl * weights.kl
    if parts.distill is not None and weights.distill > 0:
        total = total + parts.distill * weights.distill
    if parts.ratio is not None and weights.ratio > 0:
        total = total + parts.ratio * weights.ratio
    return total
