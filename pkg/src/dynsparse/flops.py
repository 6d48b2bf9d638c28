"""Analytic multiply-accumulate accounting for both pipelines.

Counts mirror the inference path exactly: every matmul and depthwise
convolution the implementation executes, nothing else (normalization,
softmax, and pooling carry no multiply-accumulates here, as is standard).
Totals are reported in GFLOPs with one multiply-accumulate counted as one
FLOP, the convention under which the known backbone shapes land on their
published complexity numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .hier import HierConfig, HierSchedule
from .vit import ModelConfig, SparsificationSchedule

CONVENTION = "1 multiply-accumulate counted as 1 FLOP"


@dataclass
class FlopsEntry:
    layer: str
    kind: str
    tokens: int
    macs: int


@dataclass
class FlopsReport:
    entries: list[FlopsEntry]
    baseline_macs: Optional[int] = None
    convention: str = CONVENTION

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    @property
    def reduction_pct(self) -> Optional[float]:
        if not self.baseline_macs:
            return None
        return 100.0 * (1.0 - self.total_macs / self.baseline_macs)

    def to_dict(self) -> dict:
        out = {
            "convention": self.convention,
            "total_macs": self.total_macs,
            "gflops": self.gflops,
            "entries": [
                {"layer": e.layer, "kind": e.kind, "tokens": e.tokens, "macs": e.macs}
                for e in self.entries
            ],
        }
        if self.baseline_macs is not None:
            out["baseline_macs"] = self.baseline_macs
            out["baseline_gflops"] = self.baseline_macs / 1e9
            out["reduction_pct"] = self.reduction_pct
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format_table(self) -> str:
        lines = [f"# FLOPs report ({self.convention})"]
        header = f"{'layer':<28} {'kind':<12} {'tokens':>7} {'MACs':>14}"
        lines.append(header)
        lines.append("-" * len(header))
        for e in self.entries:
            lines.append(f"{e.layer:<28} {e.kind:<12} {e.tokens:>7} {e.macs:>14,}")
        lines.append("-" * len(header))
        lines.append(f"{'total':<49} {self.total_macs:>14,}  ({self.gflops:.3f} G)")
        if self.baseline_macs is not None:
            lines.append(
                f"{'dense baseline':<49} {self.baseline_macs:>14,}  "
                f"({self.baseline_macs / 1e9:.3f} G)"
            )
            lines.append(f"reduction vs dense: {self.reduction_pct:.1f}%")
        return "\n".join(lines)


# -- shared pieces -------------------------------------------------------------


def flops_prediction_module(embed_dim: int, n_tokens: int) -> int:
    """Exact MAC count of one scoring pass over ``n_tokens`` tokens."""
    c = embed_dim
    per_token = (
        c * (c // 2)  # local head
        + c * (c // 2)  # global head features
        + (c // 2)  # masked-mean aggregation (weighted sum)
        + c * (c // 2)  # decision fc1 on the concatenated embedding
        + (c // 2) * (c // 4)  # decision fc2
        + (c // 4) * 2  # decision fc3
    )
    return n_tokens * per_token


def vit_attention_macs(n_tokens: int, embed_dim: int) -> int:
    c = embed_dim
    return 4 * n_tokens * c * c + 2 * n_tokens * n_tokens * c


def vit_mlp_macs(n_tokens: int, embed_dim: int, mlp_hidden: int) -> int:
    return 2 * n_tokens * embed_dim * mlp_hidden


# -- isotropic pipeline ---------------------------------------------------------


def _vit_entries(
    config: ModelConfig, schedule: Optional[SparsificationSchedule]
) -> list[FlopsEntry]:
    n_patch = config.n_patches
    c = config.embed_dim
    entries = [
        FlopsEntry("patch_embed", "embed", n_patch, n_patch * config.token_dim * c)
    ]
    enabled = schedule is not None and schedule.enabled
    keep = schedule.keep_counts(n_patch) if enabled else []
    stage = 0
    patches = n_patch
    for i in range(config.depth):
        if enabled and stage < schedule.stages and i == schedule.locations[stage]:
            entries.append(
                FlopsEntry(
                    f"predictor{stage}",
                    "predictor",
                    patches,
                    flops_prediction_module(c, patches),
                )
            )
            patches = min(keep[stage], patches)
            stage += 1
        tokens = patches + 1
        entries.append(
            FlopsEntry(f"block{i:02d}.attn", "attention", tokens, vit_attention_macs(tokens, c))
        )
        entries.append(
            FlopsEntry(f"block{i:02d}.mlp", "mlp", tokens, vit_mlp_macs(tokens, c, config.mlp_hidden))
        )
    entries.append(FlopsEntry("head", "classifier", 1, c * config.num_classes))
    return entries


def flops_vit(
    config: ModelConfig, schedule: Optional[SparsificationSchedule] = None
) -> FlopsReport:
    """Inference cost of the token-sparsified transformer; the baseline for
    the reduction column is the same shape with sparsification disabled."""
    if schedule is not None:
        schedule.validate_for_depth(config.depth)
    entries = _vit_entries(config, schedule)
    baseline = sum(e.macs for e in _vit_entries(config, None))
    return FlopsReport(entries=entries, baseline_macs=baseline)


def flops_vit_structural(config: ModelConfig) -> FlopsReport:
    """Static comparator: 2x2 average pooling of the patch grid after a
    fixed block; pooling itself carries no multiply-accumulates."""
    h, w = config.grid
    if h % 2 or w % 2:
        raise ValueError(f"grid {h}x{w} must be even for 2x2 pooling")
    c = config.embed_dim
    n_patch = config.n_patches
    entries = [
        FlopsEntry("patch_embed", "embed", n_patch, n_patch * config.token_dim * c)
    ]
    patches = n_patch
    for i in range(config.depth):
        if i == config.pool_block:
            patches = (h // 2) * (w // 2)
        tokens = patches + 1
        entries.append(
            FlopsEntry(f"block{i:02d}.attn", "attention", tokens, vit_attention_macs(tokens, c))
        )
        entries.append(
            FlopsEntry(f"block{i:02d}.mlp", "mlp", tokens, vit_mlp_macs(tokens, c, config.mlp_hidden))
        )
    entries.append(FlopsEntry("head", "classifier", 1, c * config.num_classes))
    baseline = sum(e.macs for e in _vit_entries(config, None))
    return FlopsReport(entries=entries, baseline_macs=baseline)


# -- hierarchical pipeline -------------------------------------------------------


def _fast_path_macs(kind: str, positions: int, c: int) -> int:
    if kind == "linear":
        return positions * c * c
    if kind == "bottleneck":
        return positions * (c * (c // 4) + (c // 4) * c)
    if kind in ("learnable_mask", "zero_mask"):
        return 0
    raise ValueError(f"unknown fast path {kind!r}")


def _hier_entries(
    config: HierConfig,
    schedule: Optional[HierSchedule],
    fast_path: str,
) -> list[FlopsEntry]:
    entries = [
        FlopsEntry(
            "stem",
            "embed",
            config.stage_positions(0),
            config.stage_positions(0) * config.in_channels * config.widths[0],
        )
    ]
    enabled = schedule is not None and schedule.enabled
    k2 = config.mixer_kernel * config.mixer_kernel
    for s, (depth, c) in enumerate(zip(config.stage_depths, config.widths)):
        positions = config.stage_positions(s)
        if s > 0:
            entries.append(
                FlopsEntry(
                    f"downsample{s - 1}",
                    "downsample",
                    positions,
                    positions * 4 * config.widths[s - 1] * c,
                )
            )
        keep = schedule.keep_counts(positions) if enabled else []
        current_ratio_index: Optional[int] = None
        for l in range(depth):
            name = f"stage{s}.block{l:02d}"
            if enabled and s == config.sparsify_stage and l in schedule.layers:
                idx = schedule.layers.index(l)
                entries.append(
                    FlopsEntry(
                        f"stage{s}.predictor{idx}",
                        "predictor",
                        positions,
                        flops_prediction_module(c, positions),
                    )
                )
                current_ratio_index = idx
            entries.append(
                FlopsEntry(f"{name}.mixer", "mixer", positions, positions * c * k2)
            )
            if current_ratio_index is None:
                entries.append(
                    FlopsEntry(f"{name}.slow", "slow_path", positions, positions * 8 * c * c)
                )
            else:
                m = keep[current_ratio_index]
                entries.append(FlopsEntry(f"{name}.slow", "slow_path", m, m * 8 * c * c))
                entries.append(
                    FlopsEntry(
                        f"{name}.fast",
                        f"fast_path[{fast_path}]",
                        positions - m,
                        _fast_path_macs(fast_path, positions - m, c),
                    )
                )
    entries.append(
        FlopsEntry("head", "classifier", 1, config.widths[-1] * config.num_classes)
    )
    return entries


def flops_hier(
    config: HierConfig,
    schedule: Optional[HierSchedule] = None,
    fast_path: Optional[str] = None,
) -> FlopsReport:
    """Inference cost of the fast/slow-path hierarchy. The mixer always runs
    on every position; only the pointwise paths split by the decision."""
    if schedule is not None:
        schedule.validate_for_depth(config.stage_depths[config.sparsify_stage])
    kind = fast_path or config.fast_path
    entries = _hier_entries(config, schedule, kind)
    baseline = sum(e.macs for e in _hier_entries(config, None, kind))
    return FlopsReport(entries=entries, baseline_macs=baseline)
