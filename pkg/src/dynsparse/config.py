"""Run configuration: one JSON-serializable object that pins everything a
training/evaluation run needs, so a saved config plus its seed reproduces
the run exactly."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import PLACEMENTS, DatasetSpec
from .hier import FAST_PATH_KINDS, HierSchedule
from .losses import LossWeights
from .presets import HIER_PRESETS, VIT_PRESETS, hier_config, hier_schedule, vit_config, vit_schedule
from .train import OptimConfig


class ConfigError(ValueError):
    """One structured error naming every invalid field."""


@dataclass
class RunConfig:
    pipeline: str = "vit"  # vit | hier
    preset: str = "tiny-d6"
    rho: float = 0.7
    temperature: float = 1.0
    fast_path: str = "linear"
    seed: int = 0
    out_dir: str = "runs/default"
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    warmup_frozen_epochs: int = 3
    backbone_lr_scale: float = 0.01
    teacher_epochs: int = 6
    use_distill: bool = True
    use_kl: bool = True
    lambda_kl: float = 0.5
    lambda_distill: float = 0.5
    lambda_ratio: Optional[float] = None  # default depends on pipeline
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    # -- validation ------------------------------------------------------------

    def validate(self) -> None:
        problems = []
        if self.pipeline not in ("vit", "hier"):
            problems.append(f"pipeline must be vit|hier, got {self.pipeline!r}")
        elif self.pipeline == "vit" and self.preset not in VIT_PRESETS:
            problems.append(f"preset {self.preset!r} not in {VIT_PRESETS}")
        elif self.pipeline == "hier" and self.preset not in HIER_PRESETS:
            problems.append(f"preset {self.preset!r} not in {HIER_PRESETS}")
        if not 0 < self.rho <= 1:
            problems.append(f"rho must lie in (0, 1], got {self.rho}")
        elif self.pipeline == "hier" and self.rho <= 0.4 and self.rho < 1:
            problems.append(f"hier rho must exceed 0.4 (ratios are [rho, rho-0.2, rho-0.4]), got {self.rho}")
        if self.temperature <= 0:
            problems.append(f"temperature must be positive, got {self.temperature}")
        if self.fast_path not in FAST_PATH_KINDS:
            problems.append(f"fast_path {self.fast_path!r} not in {FAST_PATH_KINDS}")
        if self.epochs < 1 or self.teacher_epochs < 1:
            problems.append("epochs and teacher_epochs must be at least 1")
        if self.batch_size < 1:
            problems.append("batch_size must be at least 1")
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if min(self.lambda_kl, self.lambda_distill) < 0 or (
            self.lambda_ratio is not None and self.lambda_ratio < 0
        ):
            problems.append("loss weights must be non-negative")
        if self.dataset.placement not in PLACEMENTS:
            problems.append(f"dataset placement {self.dataset.placement!r} not in {PLACEMENTS}")
        if self.pipeline == "vit":
            grid, preset_grid = self.dataset.grid, None
            if self.preset in VIT_PRESETS:
                preset_grid = vit_config(self.preset).grid
            if preset_grid is not None and tuple(grid) != preset_grid:
                problems.append(
                    f"dataset grid {tuple(grid)} does not match model grid {preset_grid}"
                )
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    # -- derived objects ---------------------------------------------------------

    def model_config(self):
        return vit_config(self.preset) if self.pipeline == "vit" else hier_config(self.preset, self.fast_path)

    def schedule(self):
        if self.pipeline == "vit":
            return vit_schedule(self.preset, self.rho, self.temperature)
        return hier_schedule(self.preset, self.rho, self.temperature)

    def loss_weights(self) -> LossWeights:
        ratio = self.lambda_ratio
        if ratio is None:
            ratio = 2.0 if self.pipeline == "vit" else 10.0
        return LossWeights(
            kl=self.lambda_kl,
            distill=self.lambda_distill,
            ratio=ratio,
            targets=self.schedule().ratios,
        )

    def optim(self) -> OptimConfig:
        return OptimConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_frozen_epochs=self.warmup_frozen_epochs,
            backbone_lr_scale=self.backbone_lr_scale,
            teacher_epochs=self.teacher_epochs,
        )

    # -- serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["dataset"]["grid"] = list(self.dataset.grid)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        ds = data.pop("dataset", {})
        if isinstance(ds, dict):
            ds = dict(ds)
            if "grid" in ds:
                ds["grid"] = tuple(ds["grid"])
            known = {f.name for f in dataclasses.fields(DatasetSpec)}
            unknown = set(ds) - known
            if unknown:
                raise ConfigError(f"unknown dataset fields: {sorted(unknown)}")
            dataset = DatasetSpec(**ds)
        else:
            dataset = ds
        known = {f.name for f in dataclasses.fields(cls)} - {"dataset"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(dataset=dataset, **data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def default_dataset_for_pipeline(self) -> DatasetSpec:
        """Dataset spec matched to the preset's input geometry."""
        if self.pipeline == "vit":
            grid = vit_config(self.preset).grid
            dim = vit_config(self.preset).token_dim
        else:
            cfg = hier_config(self.preset)
            grid, dim = cfg.grid, cfg.in_channels
        return dataclasses.replace(self.dataset, grid=grid, token_dim=dim)
