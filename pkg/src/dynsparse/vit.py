"""Isotropic transformer backbone with progressive token sparsification.

Training keeps every token and silences dropped ones through attention
masking, so batch shapes stay fixed and the sampler stays differentiable.
Inference physically discards tokens: at each scheduled block the top
floor(ratio * N) patch tokens by keep probability survive (class token
always kept), and all later blocks run dense attention on the smaller set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import (
    AttentionWeights,
    attention_scores,
    dense_attention,
    init_attention,
    masked_attention,
)
from .layers import (
    LayerNormWeights,
    LinearWeights,
    init_layernorm,
    init_linear,
    layer_norm,
    linear,
)
from .predictor import (
    DecisionMask,
    PredictorWeights,
    gumbel_sample,
    init_predictor,
    predict_probabilities,
    topk_select,
)
from .tensor import Tensor

POLICIES = ("learned", "random", "attention")


class TrainingDivergenceError(RuntimeError):
    """Raised when the forward pass produces NaNs."""


@dataclass(frozen=True)
class SparsificationSchedule:
    """Per-stage target keep ratios and the block indices they precede."""

    ratios: tuple[float, ...]
    locations: tuple[int, ...]
    temperature: float = 1.0

    def __post_init__(self):
        if len(self.ratios) != len(self.locations):
            raise ValueError(
                f"{len(self.ratios)} ratios vs {len(self.locations)} locations"
            )
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ValueError(f"keep ratios must lie in (0, 1]: {self.ratios}")
        if any(b - a <= 0 for a, b in zip(self.locations, self.locations[1:])):
            raise ValueError(f"stage locations must strictly increase: {self.locations}")
        if any(b - a > 0 for a, b in zip(self.ratios, self.ratios[1:])):
            raise ValueError(f"keep ratios must be non-increasing: {self.ratios}")
        if self.temperature <= 0:
            raise ValueError("gumbel temperature must be positive")

    @classmethod
    def geometric(
        cls, rho: float, locations: Sequence[int], stages: int = 3, temperature: float = 1.0
    ) -> "SparsificationSchedule":
        """Targets [rho, rho^2, ..., rho^S]."""
        ratios = tuple(rho ** (s + 1) for s in range(stages))
        return cls(ratios=ratios, locations=tuple(locations), temperature=temperature)

    @property
    def stages(self) -> int:
        return len(self.ratios)

    @property
    def enabled(self) -> bool:
        """A schedule whose every target is 1.0 is a no-op and is skipped
        entirely, so the forward pass is bit-identical to the dense path."""
        return self.stages > 0 and any(r < 1.0 for r in self.ratios)

    def keep_counts(self, n_patches: int) -> list[int]:
        return [int(np.floor(r * n_patches)) for r in self.ratios]

    def validate_for_depth(self, depth: int) -> None:
        if self.stages and not all(0 <= loc < depth for loc in self.locations):
            raise ValueError(
                f"stage locations {self.locations} outside depth {depth}"
            )


@dataclass(frozen=True)
class ModelConfig:
    """Backbone shape for the isotropic pipeline."""

    depth: int
    embed_dim: int
    heads: int
    grid: tuple[int, int]
    token_dim: int
    num_classes: int
    mlp_ratio: float = 4.0
    pool_after: Optional[int] = None  # structural-downsampling baseline split

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def pool_block(self) -> int:
        return self.depth // 2 if self.pool_after is None else self.pool_after


@dataclass
class BlockWeights:
    norm1: LayerNormWeights
    attn: AttentionWeights
    norm2: LayerNormWeights
    fc1: LinearWeights
    fc2: LinearWeights


@dataclass
class VitWeights:
    patch_embed: LinearWeights
    cls_token: Tensor  # (1, C)
    pos_embed: Tensor  # (1, N+1, C)
    blocks: list[BlockWeights]
    final_norm: LayerNormWeights
    head: LinearWeights


@dataclass
class VitTrainOutput:
    logits: Tensor
    patch_tokens: Tensor  # (B, N, C) after the final norm
    masks: list[DecisionMask]


@dataclass
class VitInferOutput:
    logits: Tensor
    stage_kept: list[np.ndarray]  # per stage: (B, m_s) original patch indices
    stage_probs: list[np.ndarray]  # per stage: (B, N) keep prob, 0 once dropped


def _init_block(config: ModelConfig, rng: np.random.Generator, dtype) -> BlockWeights:
    c = config.embed_dim
    return BlockWeights(
        norm1=init_layernorm(c, dtype),
        attn=init_attention(c, config.heads, rng, dtype),
        norm2=init_layernorm(c, dtype),
        fc1=init_linear(c, config.mlp_hidden, rng, dtype),
        fc2=init_linear(config.mlp_hidden, c, rng, dtype),
    )


class VitModel:
    """Backbone plus one prediction module per sparsification stage."""

    def __init__(
        self,
        config: ModelConfig,
        weights: VitWeights,
        predictors: list[PredictorWeights],
        dtype=np.float32,
    ):
        self.config = config
        self.weights = weights
        self.predictors = predictors
        self.dtype = np.dtype(dtype).type

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        rng: np.random.Generator,
        stages: int = 0,
        dtype=np.float32,
    ) -> "VitModel":
        c = config.embed_dim
        weights = VitWeights(
            patch_embed=init_linear(config.token_dim, c, rng, dtype),
            cls_token=Tensor(np.zeros((1, c), dtype=dtype), requires_grad=True),
            pos_embed=Tensor(
                (0.02 * rng.standard_normal((1, config.n_tokens, c))).astype(dtype),
                requires_grad=True,
            ),
            blocks=[_init_block(config, rng, dtype) for _ in range(config.depth)],
            final_norm=init_layernorm(c, dtype),
            head=init_linear(c, config.num_classes, rng, dtype),
        )
        predictors = [init_predictor(c, rng, dtype) for _ in range(stages)]
        return cls(config, weights, predictors, dtype=dtype)

    # -- shared pieces -------------------------------------------------------

    def embed(self, tokens: Tensor) -> Tensor:
        b, n, _ = tokens.shape
        if n != self.config.n_patches:
            raise T.ShapeError(
                f"expected {self.config.n_patches} patch tokens, got {n}"
            )
        x = linear(tokens, self.weights.patch_embed)
        cls = T.broadcast_to(
            T.reshape(self.weights.cls_token, (1, 1, self.config.embed_dim)),
            (b, 1, self.config.embed_dim),
        )
        x = T.concat([cls, x], axis=1)
        return x + self.weights.pos_embed

    def block(self, x: Tensor, index: int, mask: Optional[Tensor]) -> Tensor:
        w = self.weights.blocks[index]
        h = layer_norm(x, w.norm1)
        attn = dense_attention(h, w.attn) if mask is None else masked_attention(h, mask, w.attn)
        x = x + attn
        h = layer_norm(x, w.norm2)
        return x + linear(T.gelu(linear(h, w.fc1)), w.fc2)

    def _readout(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = layer_norm(x, self.weights.final_norm)
        n_patch = x.shape[1] - 1
        cls = T.reshape(T.narrow(x, 1, 0, 1), (x.shape[0], x.shape[2]))
        logits = linear(cls, self.weights.head)
        patches = T.narrow(x, 1, 1, n_patch)
        return logits, patches

    # -- forward passes ------------------------------------------------------

    def forward_dense(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Plain backbone (the teacher path)."""
        x = self.embed(tokens)
        for i in range(self.config.depth):
            x = self.block(x, i, None)
        return self._readout(x)

    def forward_train(
        self,
        tokens: Tensor,
        schedule: SparsificationSchedule,
        rng: Optional[np.random.Generator] = None,
        pinned_decisions: Optional[Sequence[np.ndarray]] = None,
    ) -> VitTrainOutput:
        """Constant-shape training pass with attention masking.

        At each scheduled block the prediction module scores the patch
        tokens, Gumbel sampling draws hard keep decisions, and the running
        mask shrinks monotonically. ``pinned_decisions`` (per-stage hard
        patch masks) replaces sampling for equivalence tests.
        """
        schedule.validate_for_depth(self.config.depth)
        if schedule.enabled and len(self.predictors) < schedule.stages:
            raise ValueError(
                f"model has {len(self.predictors)} prediction modules, schedule "
                f"needs {schedule.stages}"
            )
        b = tokens.shape[0]
        n = self.config.n_patches
        x = self.embed(tokens)
        masks: list[DecisionMask] = []
        full_mask: Optional[Tensor] = None
        patch_mask = Tensor(np.ones((b, n), dtype=self.dtype))
        class_col = Tensor(np.ones((b, 1), dtype=self.dtype))
        class_pi = Tensor(
            np.broadcast_to(
                np.asarray([0.0, 1.0], dtype=self.dtype), (b, 1, 2)
            ).copy()
        )
        stage = 0
        for i in range(self.config.depth):
            if schedule.enabled and stage < schedule.stages and i == schedule.locations[stage]:
                patch_x = T.narrow(x, 1, 1, n)
                pi = predict_probabilities(patch_x, patch_mask, self.predictors[stage])
                if pinned_decisions is not None:
                    decision = Tensor(np.asarray(pinned_decisions[stage], dtype=self.dtype))
                else:
                    if rng is None:
                        raise ValueError("forward_train needs an rng to sample decisions")
                    decision = gumbel_sample(pi, schedule.temperature, rng)
                patch_mask = patch_mask * decision
                full_mask = T.concat([class_col, patch_mask], axis=1)
                masks.append(
                    DecisionMask(
                        values=full_mask,
                        pi=T.concat([class_pi, pi], axis=1),
                        stage_index=stage,
                        class_index=0,
                    )
                )
                stage += 1
            x = self.block(x, i, full_mask)
            if np.isnan(x.data).any():
                raise TrainingDivergenceError(
                    f"NaN activations after block {i} (sparsification stage {stage})"
                )
        logits, patches = self._readout(x)
        if np.isnan(logits.data).any():
            raise TrainingDivergenceError(
                f"NaN logits at readout (sparsification stage {stage})"
            )
        return VitTrainOutput(logits=logits, patch_tokens=patches, masks=masks)

    def forward_infer(
        self,
        tokens: Tensor,
        schedule: SparsificationSchedule,
        policy: str = "learned",
        rng: Optional[np.random.Generator] = None,
        pinned_decisions: Optional[Sequence[np.ndarray]] = None,
    ) -> VitInferOutput:
        """Deterministic inference with hard token dropping.

        The token set physically shrinks at each stage; later blocks run
        dense attention on the survivors. ``policy`` selects the comparator:
        learned keep probabilities, random scores, or class-token attention
        scores from the upcoming block.
        """
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}, expected one of {POLICIES}")
        if policy == "random" and rng is None:
            raise ValueError("random policy needs an rng")
        schedule.validate_for_depth(self.config.depth)
        b = tokens.shape[0]
        n = self.config.n_patches
        x = self.embed(tokens)
        orig_idx = np.broadcast_to(np.arange(n), (b, n)).copy()
        keep_counts = schedule.keep_counts(n)
        stage_kept: list[np.ndarray] = []
        stage_probs: list[np.ndarray] = []
        stage = 0
        for i in range(self.config.depth):
            if schedule.enabled and stage < schedule.stages and i == schedule.locations[stage]:
                n_cur = x.shape[1] - 1
                patch_x = T.narrow(x, 1, 1, n_cur)
                ones = Tensor(np.ones((b, n_cur), dtype=self.dtype))
                pi = predict_probabilities(patch_x, ones, self.predictors[stage]) if self.predictors else None
                probs_full = np.zeros((b, n), dtype=np.float64)
                if pi is not None:
                    np.put_along_axis(probs_full, orig_idx, pi.data[:, :, 1].astype(np.float64), axis=1)
                stage_probs.append(probs_full)
                if pinned_decisions is not None:
                    sel = _pinned_selection(pinned_decisions[stage], orig_idx)
                else:
                    scores = self._policy_scores(x, patch_x, pi, policy, i, rng)
                    m = min(keep_counts[stage], n_cur)
                    sel = np.stack(
                        [np.sort(topk_select(scores[s], m)) for s in range(b)]
                    )
                patch_x = T.gather_rows(patch_x, sel)
                orig_idx = np.take_along_axis(orig_idx, sel, axis=1)
                stage_kept.append(orig_idx.copy())
                cls_row = T.narrow(x, 1, 0, 1)
                x = T.concat([cls_row, patch_x], axis=1)
                stage += 1
            x = self.block(x, i, None)
        logits, _ = self._readout(x)
        return VitInferOutput(logits=logits, stage_kept=stage_kept, stage_probs=stage_probs)

    def _policy_scores(
        self,
        x: Tensor,
        patch_x: Tensor,
        pi: Optional[Tensor],
        policy: str,
        block_index: int,
        rng: Optional[np.random.Generator],
    ) -> np.ndarray:
        b, n_cur = patch_x.shape[0], patch_x.shape[1]
        if policy == "learned":
            if pi is None:
                raise ValueError("learned policy needs prediction modules")
            return pi.data[:, :, 1]
        if policy == "random":
            return rng.random((b, n_cur))
        # Class-token attention from the upcoming block, averaged over heads,
        # restricted to patch columns.
        w = self.weights.blocks[block_index]
        scores = attention_scores(layer_norm(x, w.norm1), w.attn)
        probs = T.softmax(scores, axis=-1).data  # (B, H, N+1, N+1)
        return probs[:, :, 0, 1:].mean(axis=1)

    def structural_downsample(self, tokens: Tensor) -> Tensor:
        """Static comparator: 2x2 average pooling of the patch grid after a
        fixed block, class token passed through."""
        h, w = self.config.grid
        if h % 2 or w % 2:
            raise T.ShapeError(f"grid {h}x{w} must be even for 2x2 pooling")
        x = self.embed(tokens)
        for i in range(self.config.depth):
            if i == self.config.pool_block:
                b = x.shape[0]
                n_cur = x.shape[1] - 1
                c = self.config.embed_dim
                cls_row = T.narrow(x, 1, 0, 1)
                grid = T.reshape(T.narrow(x, 1, 1, n_cur), (b, h, w, c))
                pooled = T.avg_pool_2d(grid, 2)
                pooled = T.reshape(pooled, (b, (h // 2) * (w // 2), c))
                x = T.concat([cls_row, pooled], axis=1)
            x = self.block(x, i, None)
        logits, _ = self._readout(x)
        return logits


def _pinned_selection(mask: np.ndarray, orig_idx: np.ndarray) -> np.ndarray:
    """Positions (into the current token set) whose original index is kept
    by the pinned hard mask. Counts must agree across the batch."""
    mask = np.asarray(mask)
    kept = np.take_along_axis(mask, orig_idx, axis=1) > 0.5
    counts = kept.sum(axis=1)
    if not np.all(counts == counts[0]):
        raise ValueError("pinned decisions keep different counts per sample")
    return np.stack([np.flatnonzero(kept[s]) for s in range(kept.shape[0])])
