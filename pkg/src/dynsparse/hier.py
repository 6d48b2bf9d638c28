"""Hierarchical (CNN-style) backbone with structure-preserving sparsification.

Each block mixes spatially with a shared depthwise convolution, then routes
informative locations through the original FFN (slow path) and the rest
through a cheap replacement (fast path). Feature maps keep their full H x W
shape at every step, so downsampling and downstream consumers are untouched.
Decisions are made independently at each scheduled layer: no mask chaining.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .layers import (
    LayerNormWeights,
    LinearWeights,
    init_layernorm,
    init_linear,
    layer_norm,
    linear,
)
from .predictor import PredictorWeights, gumbel_sample, init_predictor, predict_probabilities, topk_select
from .tensor import Tensor

FAST_PATH_KINDS = ("linear", "bottleneck", "learnable_mask", "zero_mask")


@dataclass(frozen=True)
class HierSchedule:
    """Keep ratios and the layer indices (within the sparsified stage) at
    which fresh decisions are made. Ratios apply from their layer until the
    next scheduled layer."""

    ratios: tuple[float, ...]
    layers: tuple[int, ...]
    temperature: float = 1.0

    def __post_init__(self):
        if len(self.ratios) != len(self.layers):
            raise ValueError(f"{len(self.ratios)} ratios vs {len(self.layers)} layers")
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ValueError(f"keep ratios must lie in (0, 1]: {self.ratios}")
        if any(b - a <= 0 for a, b in zip(self.layers, self.layers[1:])):
            raise ValueError(f"scheduled layers must strictly increase: {self.layers}")
        if self.temperature <= 0:
            raise ValueError("gumbel temperature must be positive")

    @classmethod
    def arithmetic(cls, rho: float, k: int, temperature: float = 1.0) -> "HierSchedule":
        """Targets [rho, rho-0.2, rho-0.4] at layers [k, 2k, 3k]; rho = 1.0
        disables sparsification entirely."""
        if rho >= 1.0:
            return cls(ratios=(1.0, 1.0, 1.0), layers=(k, 2 * k, 3 * k), temperature=temperature)
        # Rounded so float noise in the subtraction cannot move a floor()
        # across an integer boundary (0.7 - 0.2 = 0.4999... would keep 7 of
        # 16 positions instead of 8).
        ratios = tuple(round(rho - 0.2 * i, 9) for i in range(3))
        if min(ratios) <= 0:
            raise ValueError(f"arithmetic schedule underflows for rho={rho}")
        return cls(ratios=ratios, layers=(k, 2 * k, 3 * k), temperature=temperature)

    @classmethod
    def for_stage_depth(cls, rho: float, depth: int, temperature: float = 1.0) -> "HierSchedule":
        return cls.arithmetic(rho, max(depth // 9, 1), temperature=temperature)

    @property
    def stages(self) -> int:
        return len(self.ratios)

    @property
    def enabled(self) -> bool:
        return self.stages > 0 and any(r < 1.0 for r in self.ratios)

    def keep_counts(self, n_positions: int) -> list[int]:
        return [int(np.floor(r * n_positions)) for r in self.ratios]

    def validate_for_depth(self, depth: int) -> None:
        if self.stages and not all(0 <= l < depth for l in self.layers):
            raise ValueError(f"scheduled layers {self.layers} outside stage depth {depth}")


@dataclass(frozen=True)
class HierConfig:
    """Four-stage hierarchy: per-stage depths and widths, 2x downsampling
    between stages, sparsification applied in one stage only."""

    stage_depths: tuple[int, ...]
    widths: tuple[int, ...]
    grid: tuple[int, int]
    in_channels: int
    num_classes: int
    sparsify_stage: int = 2
    fast_path: str = "linear"
    mixer_kernel: int = 7

    def __post_init__(self):
        if len(self.stage_depths) != len(self.widths):
            raise ValueError("stage_depths and widths disagree")
        if not 0 <= self.sparsify_stage < len(self.stage_depths):
            raise ValueError(f"sparsify_stage {self.sparsify_stage} out of range")
        if self.fast_path not in FAST_PATH_KINDS:
            raise ValueError(
                f"unknown fast path {self.fast_path!r}, expected one of {FAST_PATH_KINDS}"
            )
        h, w = self.grid
        factor = 2 ** (len(self.stage_depths) - 1)
        if h % factor or w % factor:
            raise ValueError(f"grid {h}x{w} not divisible by {factor}")

    def stage_grid(self, stage: int) -> tuple[int, int]:
        return self.grid[0] >> stage, self.grid[1] >> stage

    def stage_positions(self, stage: int) -> int:
        h, w = self.stage_grid(stage)
        return h * w


# -- fast path variants ------------------------------------------------------


@dataclass
class FastPathLinear:
    fc: LinearWeights


@dataclass
class FastPathBottleneck:
    fc1: LinearWeights  # (C, C/4)
    fc2: LinearWeights  # (C/4, C)


@dataclass
class FastPathLearnable:
    fill: Tensor  # (C,)


@dataclass
class FastPathZero:
    pass


FastPath = Union[FastPathLinear, FastPathBottleneck, FastPathLearnable, FastPathZero]


def init_fast_path(kind: str, c: int, rng: np.random.Generator, dtype) -> FastPath:
    if kind == "linear":
        return FastPathLinear(fc=init_linear(c, c, rng, dtype))
    if kind == "bottleneck":
        return FastPathBottleneck(
            fc1=init_linear(c, max(c // 4, 1), rng, dtype),
            fc2=init_linear(max(c // 4, 1), c, rng, dtype),
        )
    if kind == "learnable_mask":
        return FastPathLearnable(fill=Tensor(np.zeros(c, dtype=dtype), requires_grad=True))
    if kind == "zero_mask":
        return FastPathZero()
    raise ValueError(f"unknown fast path {kind!r}")


def apply_fast_path(fast: FastPath, z: Tensor) -> Tensor:
    """Cheap replacement features for uninformative locations; output shape
    always equals the input shape."""
    if isinstance(fast, FastPathLinear):
        return linear(z, fast.fc)
    if isinstance(fast, FastPathBottleneck):
        return linear(T.gelu(linear(z, fast.fc1)), fast.fc2)
    if isinstance(fast, FastPathLearnable):
        return T.broadcast_to(T.reshape(fast.fill, (1,) * (z.ndim - 1) + z.shape[-1:]), z.shape)
    if isinstance(fast, FastPathZero):
        return Tensor(np.zeros(z.shape, dtype=z.data.dtype))
    raise TypeError(f"not a fast path: {type(fast).__name__}")


# -- split / reassemble ------------------------------------------------------


@dataclass(frozen=True)
class SplitIndex:
    """Row-major positions of the two groups; enough to invert the split."""

    kept: np.ndarray
    rest: np.ndarray
    grid: tuple[int, int]


def split(x: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor, SplitIndex]:
    """Partition an (H, W, C) map into kept rows and the rest, row-major."""
    if x.ndim != 3:
        raise T.ShapeError(f"split expects (H, W, C), got {x.shape}")
    h, w, c = x.shape
    flat_mask = np.asarray(mask).reshape(-1)
    if flat_mask.shape[0] != h * w:
        raise T.ShapeError(f"mask covers {flat_mask.shape[0]} positions, map has {h * w}")
    kept = np.flatnonzero(flat_mask > 0.5)
    rest = np.flatnonzero(flat_mask <= 0.5)
    flat = T.reshape(x, (h * w, c))
    return (
        T.gather_rows(flat, kept),
        T.gather_rows(flat, rest),
        SplitIndex(kept=kept, rest=rest, grid=(h, w)),
    )


def reassemble(x1: Tensor, x2: Tensor, index: SplitIndex) -> Tensor:
    """Restore original spatial positions after the two paths ran."""
    h, w = index.grid
    c = x1.shape[-1] if x1.shape[0] else x2.shape[-1]
    base = Tensor(np.zeros((h * w, c), dtype=(x1.data if x1.shape[0] else x2.data).dtype))
    if index.kept.size:
        base = T.scatter_rows(base, index.kept, x1)
    if index.rest.size:
        base = T.scatter_rows(base, index.rest, x2)
    return T.reshape(base, (h, w, c))


# -- blocks -------------------------------------------------------------------


@dataclass
class HierBlockWeights:
    """Depthwise mixer + norm, the original FFN (slow path), and optionally
    a lightweight fast path."""

    mixer_kernel: Tensor  # (k, k, C)
    mixer_bias: Tensor  # (C,)
    mixer_norm: LayerNormWeights
    slow_fc1: LinearWeights  # (C, 4C)
    slow_fc2: LinearWeights  # (4C, C)
    fast: Optional[FastPath] = None


def init_hier_block(
    c: int,
    rng: np.random.Generator,
    dtype,
    fast_path: Optional[str] = None,
    mixer_kernel: int = 7,
) -> HierBlockWeights:
    k = mixer_kernel
    bound = 1.0 / np.sqrt(k * k)
    return HierBlockWeights(
        mixer_kernel=Tensor(
            rng.uniform(-bound, bound, size=(k, k, c)).astype(dtype), requires_grad=True
        ),
        mixer_bias=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        mixer_norm=init_layernorm(c, dtype),
        slow_fc1=init_linear(c, 4 * c, rng, dtype),
        slow_fc2=init_linear(4 * c, c, rng, dtype),
        fast=None if fast_path is None else init_fast_path(fast_path, c, rng, dtype),
    )


def _mixer(x: Tensor, w: HierBlockWeights) -> Tensor:
    """Mixer sublayer with residual: x + norm(dwconv(x))."""
    return x + layer_norm(T.depthwise_conv2d(x, w.mixer_kernel, w.mixer_bias), w.mixer_norm)


def _slow(z: Tensor, w: HierBlockWeights) -> Tensor:
    return linear(T.gelu(linear(z, w.slow_fc1)), w.slow_fc2)


def forward_block_dense(x: Tensor, w: HierBlockWeights) -> Tensor:
    """Baseline block: mixer sublayer, then the slow path on everything."""
    h = _mixer(x, w)
    return h + _slow(h, w)


def forward_block_train(x: Tensor, mask: Optional[Tensor], w: HierBlockWeights) -> Tensor:
    """Masked combine: both paths run on all positions and are blended by
    the (broadcast) keep mask, so shapes stay fixed and gradients reach the
    sampler. ``mask`` is (B, H, W) with values in [0, 1]."""
    if mask is None:
        return forward_block_dense(x, w)
    if w.fast is None:
        raise ValueError("block has no fast path but received a decision mask")
    h = _mixer(x, w)
    m = T.reshape(mask, mask.shape + (1,))
    ones = Tensor(np.ones_like(m.data))
    return h + m * _slow(h, w) + (ones - m) * apply_fast_path(w.fast, h)


def forward_block_infer(
    x: Tensor,
    keep_idx: np.ndarray,
    w: HierBlockWeights,
) -> Tensor:
    """Split-compute-reassemble: slow path on the kept flat positions
    (uniform count per sample), fast path on the rest."""
    if w.fast is None:
        raise ValueError("block has no fast path but received keep indices")
    b, hh, ww, c = x.shape
    n = hh * ww
    h = _mixer(x, w)
    flat = T.reshape(h, (b, n, c))
    rest_idx = _complement(keep_idx, n)
    out = Tensor(np.zeros((b, n, c), dtype=x.data.dtype))
    slow_rows = _slow(T.gather_rows(flat, keep_idx), w)
    out = T.scatter_rows(out, keep_idx, slow_rows)
    if rest_idx.shape[1]:
        if isinstance(w.fast, FastPathZero):
            pass  # zero contribution is already in the base
        else:
            fast_rows = apply_fast_path(w.fast, T.gather_rows(flat, rest_idx))
            out = T.scatter_rows(out, rest_idx, fast_rows)
    return h + T.reshape(out, (b, hh, ww, c))


def _complement(keep_idx: np.ndarray, n: int) -> np.ndarray:
    b, m = keep_idx.shape
    mask = np.ones((b, n), dtype=bool)
    np.put_along_axis(mask, keep_idx, False, axis=1)
    return np.stack([np.flatnonzero(mask[s]) for s in range(b)])


# -- model --------------------------------------------------------------------


@dataclass
class DownsampleWeights:
    norm: LayerNormWeights
    reduce: LinearWeights  # (4*C_in, C_out)


@dataclass
class HierWeights:
    stem: LinearWeights
    stem_norm: LayerNormWeights
    stages: list[list[HierBlockWeights]]
    downsamples: list[DownsampleWeights]
    final_norm: LayerNormWeights
    head: LinearWeights


@dataclass
class HierTrainOutput:
    logits: Tensor
    features: Tensor  # (B, h, w, C) final normed map
    masks: list[Tensor]  # per scheduled layer: (B, HW) straight-through keep


@dataclass
class HierInferOutput:
    logits: Tensor
    stage_kept: list[np.ndarray]  # per scheduled layer: (B, m) flat positions
    stage_probs: list[np.ndarray]  # per scheduled layer: (B, HW) keep prob


class HierModel:
    """Hierarchy of mixer/FFN blocks with fast paths in the sparsified stage."""

    def __init__(
        self,
        config: HierConfig,
        weights: HierWeights,
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
        config: HierConfig,
        rng: np.random.Generator,
        stages: int = 0,
        with_fast_paths: bool = True,
        dtype=np.float32,
    ) -> "HierModel":
        stages_weights: list[list[HierBlockWeights]] = []
        for s, (depth, c) in enumerate(zip(config.stage_depths, config.widths)):
            fast = (
                config.fast_path
                if with_fast_paths and s == config.sparsify_stage
                else None
            )
            stages_weights.append(
                [
                    init_hier_block(c, rng, dtype, fast_path=fast, mixer_kernel=config.mixer_kernel)
                    for _ in range(depth)
                ]
            )
        downsamples = [
            DownsampleWeights(
                norm=init_layernorm(4 * config.widths[s], dtype),
                reduce=init_linear(4 * config.widths[s], config.widths[s + 1], rng, dtype),
            )
            for s in range(len(config.widths) - 1)
        ]
        weights = HierWeights(
            stem=init_linear(config.in_channels, config.widths[0], rng, dtype),
            stem_norm=init_layernorm(config.widths[0], dtype),
            stages=stages_weights,
            downsamples=downsamples,
            final_norm=init_layernorm(config.widths[-1], dtype),
            head=init_linear(config.widths[-1], config.num_classes, rng, dtype),
        )
        predictors = [
            init_predictor(config.widths[config.sparsify_stage], rng, dtype)
            for _ in range(stages)
        ]
        return cls(config, weights, predictors, dtype=dtype)

    # -- plumbing -------------------------------------------------------------

    def _stem(self, x: Tensor) -> Tensor:
        return layer_norm(linear(x, self.weights.stem), self.weights.stem_norm)

    def _downsample(self, x: Tensor, index: int) -> Tensor:
        b, h, w, c = x.shape
        blocked = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
        blocked = T.transpose(blocked, (0, 1, 3, 2, 4, 5))
        merged = T.reshape(blocked, (b, h // 2, w // 2, 4 * c))
        d = self.weights.downsamples[index]
        return linear(layer_norm(merged, d.norm), d.reduce)

    def _readout(self, x: Tensor) -> tuple[Tensor, Tensor]:
        normed = layer_norm(x, self.weights.final_norm)
        pooled = T.mean(normed, axis=(1, 2))
        return linear(pooled, self.weights.head), normed

    def _decision_probs(self, x: Tensor, stage_index: int) -> Tensor:
        """Keep probabilities from the current features alone (no chaining)."""
        b, h, w, c = x.shape
        flat = T.reshape(x, (b, h * w, c))
        ones = Tensor(np.ones((b, h * w), dtype=self.dtype))
        return predict_probabilities(flat, ones, self.predictors[stage_index])

    # -- forward passes --------------------------------------------------------

    def forward_dense(self, grid: Tensor) -> tuple[Tensor, Tensor]:
        x = self._stem(grid)
        for s, blocks in enumerate(self.weights.stages):
            if s > 0:
                x = self._downsample(x, s - 1)
            for w in blocks:
                x = forward_block_dense(x, w)
        return self._readout(x)

    def forward_train(
        self,
        grid: Tensor,
        schedule: HierSchedule,
        rng: Optional[np.random.Generator] = None,
        pinned_decisions: Optional[Sequence[np.ndarray]] = None,
    ) -> HierTrainOutput:
        cfg = self.config
        schedule.validate_for_depth(cfg.stage_depths[cfg.sparsify_stage])
        x = self._stem(grid)
        masks: list[Tensor] = []
        for s, blocks in enumerate(self.weights.stages):
            if s > 0:
                x = self._downsample(x, s - 1)
            current: Optional[Tensor] = None
            for l, w in enumerate(blocks):
                if (
                    s == cfg.sparsify_stage
                    and schedule.enabled
                    and l in schedule.layers
                ):
                    stage_index = schedule.layers.index(l)
                    pi = self._decision_probs(x, stage_index)
                    if pinned_decisions is not None:
                        decision = Tensor(
                            np.asarray(pinned_decisions[stage_index], dtype=self.dtype)
                        )
                    else:
                        if rng is None:
                            raise ValueError("forward_train needs an rng to sample decisions")
                        decision = gumbel_sample(pi, schedule.temperature, rng)
                    masks.append(decision)
                    b, hh, ww, _ = x.shape
                    current = T.reshape(decision, (b, hh, ww))
                x = forward_block_train(x, current, w) if current is not None else forward_block_dense(x, w)
        logits, features = self._readout(x)
        return HierTrainOutput(logits=logits, features=features, masks=masks)

    def forward_infer(
        self,
        grid: Tensor,
        schedule: HierSchedule,
        policy: str = "learned",
        rng: Optional[np.random.Generator] = None,
        pinned_decisions: Optional[Sequence[np.ndarray]] = None,
    ) -> HierInferOutput:
        if policy not in ("learned", "random"):
            raise ValueError(f"hierarchical policies are learned|random, got {policy!r}")
        if policy == "random" and rng is None:
            raise ValueError("random policy needs an rng")
        cfg = self.config
        schedule.validate_for_depth(cfg.stage_depths[cfg.sparsify_stage])
        x = self._stem(grid)
        stage_kept: list[np.ndarray] = []
        stage_probs: list[np.ndarray] = []
        for s, blocks in enumerate(self.weights.stages):
            if s > 0:
                x = self._downsample(x, s - 1)
            keep_idx: Optional[np.ndarray] = None
            n_pos = cfg.stage_positions(s)
            counts = schedule.keep_counts(n_pos)
            for l, w in enumerate(blocks):
                if (
                    s == cfg.sparsify_stage
                    and schedule.enabled
                    and l in schedule.layers
                ):
                    stage_index = schedule.layers.index(l)
                    pi = self._decision_probs(x, stage_index)
                    probs = pi.data[:, :, 1].astype(np.float64)
                    stage_probs.append(probs)
                    b = x.shape[0]
                    if pinned_decisions is not None:
                        pinned = np.asarray(pinned_decisions[stage_index]) > 0.5
                        cnt = pinned.sum(axis=1)
                        if not np.all(cnt == cnt[0]):
                            raise ValueError("pinned decisions keep different counts per sample")
                        keep_idx = np.stack([np.flatnonzero(pinned[i]) for i in range(b)])
                    else:
                        scores = probs if policy == "learned" else rng.random(probs.shape)
                        m = counts[stage_index]
                        keep_idx = np.stack(
                            [np.sort(topk_select(scores[i], m)) for i in range(b)]
                        )
                    stage_kept.append(keep_idx.copy())
                if keep_idx is not None:
                    x = forward_block_infer(x, keep_idx, w)
                else:
                    x = forward_block_dense(x, w)
        logits, _ = self._readout(x)
        return HierInferOutput(logits=logits, stage_kept=stage_kept, stage_probs=stage_probs)
