"""Named model shapes: published backbone geometries for the FLOPs tables
and the desk-scale configurations the training harness runs."""

from __future__ import annotations

from .hier import HierConfig, HierSchedule
from .vit import ModelConfig, SparsificationSchedule

VIT_PRESETS = ("deit-s", "deit-b", "tiny-d6")
HIER_PRESETS = ("convnext-t", "convnext-s", "tiny-hier")


def vit_config(name: str) -> ModelConfig:
    if name == "deit-s":
        return ModelConfig(
            depth=12, embed_dim=384, heads=6, grid=(14, 14), token_dim=768, num_classes=1000
        )
    if name == "deit-b":
        return ModelConfig(
            depth=12, embed_dim=768, heads=12, grid=(14, 14), token_dim=768, num_classes=1000
        )
    if name == "tiny-d6":
        return ModelConfig(
            depth=6, embed_dim=128, heads=4, grid=(8, 8), token_dim=16, num_classes=4
        )
    raise ValueError(f"unknown isotropic preset {name!r}, expected one of {VIT_PRESETS}")


def vit_stage_locations(name: str) -> tuple[int, ...]:
    """Blocks each sparsification stage precedes (0-based)."""
    if name in ("deit-s", "deit-b"):
        return (3, 6, 9)
    if name == "tiny-d6":
        return (2, 4, 5)
    raise ValueError(f"unknown isotropic preset {name!r}")


def vit_schedule(name: str, rho: float, temperature: float = 1.0) -> SparsificationSchedule:
    return SparsificationSchedule.geometric(
        rho, vit_stage_locations(name), temperature=temperature
    )


def hier_config(name: str, fast_path: str = "linear") -> HierConfig:
    if name == "convnext-t":
        return HierConfig(
            stage_depths=(3, 3, 9, 3),
            widths=(96, 192, 384, 768),
            grid=(56, 56),
            in_channels=48,
            num_classes=1000,
            fast_path=fast_path,
        )
    if name == "convnext-s":
        return HierConfig(
            stage_depths=(3, 3, 27, 3),
            widths=(96, 192, 384, 768),
            grid=(56, 56),
            in_channels=48,
            num_classes=1000,
            fast_path=fast_path,
        )
    if name == "tiny-hier":
        return HierConfig(
            stage_depths=(1, 1, 9, 1),
            widths=(32, 64, 128, 256),
            grid=(16, 16),
            in_channels=8,
            num_classes=4,
            fast_path=fast_path,
        )
    raise ValueError(f"unknown hierarchical preset {name!r}, expected one of {HIER_PRESETS}")


def hier_schedule(name: str, rho: float, temperature: float = 1.0) -> HierSchedule:
    config = hier_config(name)
    depth = config.stage_depths[config.sparsify_stage]
    return HierSchedule.for_stage_depth(rho, depth, temperature=temperature)
