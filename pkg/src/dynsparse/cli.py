"""Command-line entry point.

Subcommands: train-teacher, train, eval, bench, flops, heatmap. A run
directory holds config.json, checkpoints, metrics CSVs, and export files;
eval/bench/heatmap pick the config up from there unless --config is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, RunConfig
from .flops import flops_hier, flops_vit, flops_vit_structural
from .hier import FAST_PATH_KINDS
from .vit import POLICIES


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON run config to start from")
    parser.add_argument("--out", type=str, help="run directory")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--rho", type=float, help="base keeping ratio")
    parser.add_argument("--pipeline", choices=("vit", "hier"))
    parser.add_argument("--preset", type=str, help="model shape preset")
    parser.add_argument("--fast-path", choices=FAST_PATH_KINDS, dest="fast_path")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--teacher-epochs", type=int, dest="teacher_epochs")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--no-distill", action="store_true", help="drop the token distillation term")
    parser.add_argument("--no-kl", action="store_true", help="drop the teacher KL term")


_OVERRIDABLE = {
    "out": "out_dir",
    "seed": "seed",
    "rho": "rho",
    "pipeline": "pipeline",
    "preset": "preset",
    "fast_path": "fast_path",
    "epochs": "epochs",
    "teacher_epochs": "teacher_epochs",
    "batch_size": "batch_size",
}


def _build_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        cfg = RunConfig.from_file(args.config)
    else:
        candidate = Path(args.out) / harness.CONFIG_FILE if args.out else None
        if candidate is not None and candidate.exists() and args.cmd in ("eval", "bench", "heatmap"):
            cfg = RunConfig.from_file(candidate)
        else:
            cfg = RunConfig()
    updates = {}
    for arg_name, field in _OVERRIDABLE.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            updates[field] = value
    if getattr(args, "no_distill", False):
        updates["use_distill"] = False
    if getattr(args, "no_kl", False):
        updates["use_kl"] = False
    cfg = dataclasses.replace(cfg, **updates)
    # Default presets that fit the chosen pipeline.
    if "preset" not in updates and args.config is None:
        if cfg.pipeline == "hier" and cfg.preset == "tiny-d6":
            cfg = dataclasses.replace(cfg, preset="tiny-hier")
    cfg = dataclasses.replace(cfg, dataset=cfg.default_dataset_for_pipeline())
    cfg.validate()
    return cfg


def _log_row(row: dict) -> None:
    parts = []
    for key, value in row.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.4f}")
        else:
            parts.append(f"{key}={value}")
    print("  " + " ".join(parts))


def cmd_train_teacher(args) -> int:
    cfg = _build_config(args)
    print(f"training dense teacher ({cfg.preset}, seed {cfg.seed}) -> {cfg.out_dir}")
    rows = harness.run_train_teacher(cfg, log=_log_row)
    print(f"teacher eval accuracy: {rows[-1]['eval_acc']:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    print(
        f"training sparsified model ({cfg.preset}, rho {cfg.rho}, seed {cfg.seed}) "
        f"-> {cfg.out_dir}"
    )
    rows = harness.run_train(cfg, train_teacher_if_missing=args.train_teacher, log=_log_row)
    last = rows[-1]
    ratios = [v for k, v in last.items() if k.startswith("keep_ratio_")]
    print(f"final eval accuracy: {last['eval_acc']:.4f}; keep ratios: {ratios}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    dump = Path(args.dump) if args.dump else Path(cfg.out_dir) / "eval"
    result = harness.run_eval(
        cfg,
        policy=args.policy,
        which=args.which,
        policy_seed=args.policy_seed,
        dump_dir=dump,
    )
    print(json.dumps({k: v for k, v in result.items() if k != "kept_indices"}, indent=2))
    return 0


def cmd_bench(args) -> int:
    cfg = _build_config(args)
    result = harness.run_bench(cfg, batch_size=args.batch_size or 32, repeats=args.repeats)
    dense, sparse = result["dense"], result["sparsified"]
    print(f"batch {result['batch_size']}, {result['repeats']} repeats (median):")
    print(
        f"  dense      {dense['throughput']:8.1f} samples/s  "
        f"(analytic {dense['gflops']:.3f} GFLOPs/sample)"
    )
    print(
        f"  sparsified {sparse['throughput']:8.1f} samples/s  "
        f"(analytic {sparse['gflops']:.3f} GFLOPs/sample)"
    )
    print(f"  speedup    {result['speedup']:.2f}x")
    out = Path(cfg.out_dir)
    if out.exists():
        (out / "bench.json").write_text(json.dumps(result, indent=2))
    return 0


def cmd_flops(args) -> int:
    cfg = _build_config(args)
    schedule = cfg.schedule() if cfg.rho < 1.0 else None
    if cfg.pipeline == "vit":
        if args.structural:
            report = flops_vit_structural(cfg.model_config())
        else:
            report = flops_vit(cfg.model_config(), schedule)
    else:
        report = flops_hier(cfg.model_config(), schedule, cfg.fast_path)
    if args.json:
        print(report.to_json())
    else:
        print(report.format_table())
    if args.save:
        Path(args.save).write_text(report.to_json())
        print(f"wrote {args.save}")
    return 0


def cmd_heatmap(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(args.dump) if args.dump else None
    result = harness.run_heatmap(cfg, out_dir=out_dir)
    print(f"wrote {len(result['files'])} files")
    for path in result["files"][:6]:
        print(f"  {path}")
    if len(result["files"]) > 6:
        print(f"  ... and {len(result['files']) - 6} more")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynsparse",
        description="Dynamic spatial sparsification: train, evaluate, benchmark, "
        "and account FLOPs for token-pruned transformers and fast/slow-path "
        "hierarchies on synthetic data.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train-teacher", help="pretrain the dense backbone")
    _add_common(p)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train", help="sparsified fine-tuning from the teacher")
    _add_common(p)
    p.add_argument(
        "--train-teacher",
        action="store_true",
        dest="train_teacher",
        help="train the teacher first if its checkpoint is missing",
    )
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="deterministic sparsified evaluation")
    _add_common(p)
    p.add_argument("--policy", choices=POLICIES, default="learned")
    p.add_argument("--policy-seed", type=int, default=0, dest="policy_seed")
    p.add_argument("--which", choices=("student", "teacher"), default="student")
    p.add_argument("--dump", type=str, help="directory for kept-index dumps")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock throughput, dense vs sparsified")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("flops", help="analytic FLOPs report")
    _add_common(p)
    p.add_argument("--json", action="store_true", help="emit JSON instead of the table")
    p.add_argument("--save", type=str, help="also write the JSON report here")
    p.add_argument(
        "--structural",
        action="store_true",
        help="cost of the static 2x2-pooling comparator instead",
    )
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("heatmap", help="per-stage keep-probability grids")
    _add_common(p)
    p.add_argument("--dump", type=str, help="output directory (default <out>/heatmaps)")
    p.set_defaults(fn=cmd_heatmap)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
