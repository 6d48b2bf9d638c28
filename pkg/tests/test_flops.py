"""Analytic cost model: published complexity numbers, exact agreement with
instrumented execution, and structural invariants."""

import json

import numpy as np
import pytest

from dynsparse.flops import (
    FlopsReport,
    flops_hier,
    flops_prediction_module,
    flops_vit,
    flops_vit_structural,
    vit_attention_macs,
    vit_mlp_macs,
)
from dynsparse.hier import HierModel
from dynsparse.presets import hier_config, hier_schedule, vit_config, vit_schedule
from dynsparse.tensor import MacCounter, Tensor
from dynsparse.vit import VitModel


def within(value, target, pct):
    return abs(value - target) <= target * pct / 100.0


class TestPublishedShapes:
    def test_small_isotropic_backbone(self):
        cfg = vit_config("deit-s")
        assert within(flops_vit(cfg, None).gflops, 4.6, 2)
        assert within(flops_vit(cfg, vit_schedule("deit-s", 0.8)).gflops, 3.5, 3)
        rep = flops_vit(cfg, vit_schedule("deit-s", 0.7))
        assert within(rep.gflops, 3.0, 3)
        assert abs(rep.reduction_pct - 35.0) <= 3.0

    def test_base_isotropic_backbone(self):
        cfg = vit_config("deit-b")
        assert within(flops_vit(cfg, None).gflops, 17.6, 3)
        assert within(flops_vit(cfg, vit_schedule("deit-b", 0.7)).gflops, 11.5, 3)

    def test_structural_comparator_close_to_dynamic(self):
        cfg = vit_config("deit-s")
        structural = flops_vit_structural(cfg).gflops
        dynamic = flops_vit(cfg, vit_schedule("deit-s", 0.7)).gflops
        assert 2.85 <= structural <= 3.05
        assert 2.85 <= dynamic <= 3.05

    def test_hier_backbone_reduction(self):
        cfg = hier_config("convnext-s")
        rep = flops_hier(cfg, hier_schedule("convnext-s", 0.9))
        assert within(rep.baseline_macs / 1e9, 8.7, 3)
        assert abs(rep.reduction_pct - 22.0) <= 3.0

    def test_fast_path_variants_match_published(self):
        sched = hier_schedule("convnext-s", 0.9)
        expect = {"linear": 6.78, "bottleneck": 6.63, "learnable_mask": 6.48, "zero_mask": 6.48}
        for kind, target in expect.items():
            rep = flops_hier(hier_config("convnext-s", kind), sched)
            assert within(rep.gflops, target, 3), kind


class TestPredictionModule:
    def test_lightweight_relative_to_backbone(self):
        # The scorer is pointwise with ~1.56 C^2 MACs per token against a
        # block's 12 C^2 + 2 N C, so one module can never be under 2% of a
        # single block (the ratio is ~12.5% for any C); the overhead claim
        # holds against the backbone the module is added to.
        c, n = 384, 197
        module = flops_prediction_module(c, n)
        block = vit_attention_macs(n, c) + vit_mlp_macs(n, c, 4 * c)
        assert abs(module / block - 0.125) < 0.01
        backbone = 12 * block
        assert module / backbone < 0.02

    def test_pencil_and_paper_tiny_case(self):
        # C=4, N=1 by hand: local 4*2 + global 4*2 + aggregate 2
        # + fc1 4*2 + fc2 2*1 + fc3 1*2 = 30
        assert flops_prediction_module(4, 1) == 30

    def test_linear_in_token_count(self):
        assert flops_prediction_module(384, 2 * 197) == 2 * flops_prediction_module(384, 197)


class TestInstrumentedEquality:
    def test_isotropic_tiny_exact(self):
        cfg = vit_config("tiny-d6")
        sched = vit_schedule("tiny-d6", 0.7)
        model = VitModel.create(cfg, np.random.default_rng(0), stages=3, dtype=np.float64)
        x = Tensor(np.random.default_rng(1).standard_normal((1, cfg.n_patches, cfg.token_dim)), dtype=np.float64)
        with MacCounter() as mc:
            model.forward_infer(x, sched)
        assert mc.total == flops_vit(cfg, sched).total_macs
        with MacCounter() as mc:
            model.forward_dense(x)
        assert mc.total == flops_vit(cfg, None).total_macs

    def test_hier_tiny_exact_all_variants(self):
        sched = hier_schedule("tiny-hier", 0.7)
        for kind in ("linear", "bottleneck", "learnable_mask", "zero_mask"):
            cfg = hier_config("tiny-hier", kind)
            model = HierModel.create(cfg, np.random.default_rng(0), stages=3, dtype=np.float64)
            x = Tensor(
                np.random.default_rng(1).standard_normal((1,) + cfg.grid + (cfg.in_channels,)),
                dtype=np.float64,
            )
            with MacCounter() as mc:
                model.forward_infer(x, sched)
            assert mc.total == flops_hier(cfg, sched).total_macs, kind


class TestReportStructure:
    def test_total_equals_entry_sum(self):
        rep = flops_vit(vit_config("tiny-d6"), vit_schedule("tiny-d6", 0.7))
        assert rep.total_macs == sum(e.macs for e in rep.entries)

    def test_monotone_in_stage_token_counts(self):
        cfg = vit_config("deit-s")
        prev = flops_vit(cfg, None).total_macs
        for rho in (0.9, 0.8, 0.7, 0.6):
            cur = flops_vit(cfg, vit_schedule("deit-s", rho)).total_macs
            assert cur < prev
            prev = cur

    def test_json_and_table_share_convention(self):
        rep = flops_vit(vit_config("tiny-d6"), None)
        data = json.loads(rep.to_json())
        assert "multiply-accumulate" in data["convention"]
        assert "multiply-accumulate" in rep.format_table()
        assert data["total_macs"] == rep.total_macs

    def test_reduction_percentages_reported(self):
        rep = flops_vit(vit_config("deit-s"), vit_schedule("deit-s", 0.9))
        assert rep.reduction_pct is not None
        assert abs(rep.reduction_pct - 12.0) <= 3.0
