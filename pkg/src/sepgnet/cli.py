"""Command-line entry points.

Subcommands: gen-data, train, evaluate, ablate, compare, report-groups.
Each reads a key=value config file plus repeatable --set overrides, writes
comma-separated tables (plus mask text files and checkpoints where relevant),
and renders matplotlib figures next to the delimited output unless
figures=false. Exit codes: 0 success, 2 usage, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import plots
from .architectures import build, group_structure_report
from .configfile import ConfigError, apply_overrides, format_config, read_config
from .container import ContainerFormatError
from .data import generate, load_dataset, save_dataset
from .harness import (
    ComparisonPlan,
    ExperimentSetup,
    baseline_parameter_counts,
    load_checkpoint,
    make_train_data,
    parse_modalities,
    parse_seeds,
    resolve_setup,
    run_ablation,
    run_cell,
    run_comparison,
    save_checkpoint,
    validate_keys,
    write_ablation_summary,
    write_comparison_summary,
    write_masks,
    write_metadata,
    _fmt,
)
from .relmatrix import DegenerateMaskError
from .training import evaluate, replicas


def _load_config(args) -> dict[str, str]:
    config = read_config(args.config) if args.config else {}
    config = apply_overrides(config, args.set or [])
    validate_keys(config)
    return config


def _add_common(parser: argparse.ArgumentParser, data_required: bool = True) -> None:
    parser.add_argument("-c", "--config", help="key=value config file")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override a config key"
    )
    parser.add_argument("--data", required=data_required, help="dataset .bin path")
    parser.add_argument("-o", "--out", required=True, help="output directory")


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    modalities = parse_modalities(
        config.get("gen_modalities", "a:4:spectral_smooth:0.0,b:4:elevation_like:0.0")
    )
    dataset = generate(
        modalities,
        num_classes=int(config.get("gen_classes", 4)),
        size=int(config.get("gen_size", 48)),
        seed=int(config.get("gen_seed", 7)),
        fusion_difficulty=config.get("gen_fusion", "cross_modal"),
        task=config.get("gen_task", "patch_classification"),
        region=int(config.get("gen_region", 12)),
        border_ignore=int(config.get("gen_border_ignore", 0)),
    )
    out = Path(args.out)
    save_dataset(dataset, out)
    print(f"wrote dataset to {out} ({dataset.channels} channels, "
          f"{len(dataset.train_indices)} train / {len(dataset.test_indices)} test pixels)")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    setup = resolve_setup(config, dataset)
    data = make_train_data(dataset, setup)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    logs_by_seed = {}
    rows = []

    def one(seed: int):
        cell_dir = out / setup.run_name / str(seed)
        report = run_cell(setup, data, setup.block_strategies, seed, cell_dir)
        return report

    summary = replicas(one, setup.train_config.seeds)
    for result in summary.results:
        rows.append(result)
    lines = ["seed,oa,aa,kappa"]
    for result in summary.results:
        r = result.report
        lines.append(f"{result.seed},{_fmt(r.oa)},{_fmt(r.aa)},{_fmt(r.kappa)}")
    lines.append(f"mean,{_fmt(summary.mean('oa'))},{_fmt(summary.mean('aa'))},{_fmt(summary.mean('kappa'))}")
    lines.append(f"std,{_fmt(summary.std('oa'))},{_fmt(summary.std('aa'))},{_fmt(summary.std('kappa'))}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_metadata(out / "metadata.txt", config, setup, data_path=str(args.data))

    if setup.figures:
        from .harness import write_log_csv  # noqa: F401  (log files written per cell)
        import csv

        for seed in setup.train_config.seeds:
            log_file = out / setup.run_name / str(seed) / "log.csv"
            if log_file.exists():
                with open(log_file, newline="", encoding="utf-8") as fh:
                    reader = csv.DictReader(fh)
                    logs_by_seed[seed] = [
                        type("Row", (), {
                            "epoch": int(row["epoch"]),
                            "loss": float(row["loss"]),
                            "test_oa": float(row["test_oa"]),
                        })()
                        for row in reader
                    ]
        if logs_by_seed:
            plots.training_curves_figure(logs_by_seed, out / "training_curves.png")
    print(f"mean test OA {summary.mean('oa'):.4f} +- {summary.std('oa'):.4f} "
          f"over seeds {list(setup.train_config.seeds)}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    setup = resolve_setup(config, dataset)
    data = make_train_data(dataset, setup)
    network = build(setup.arch_spec())
    load_checkpoint(network, args.checkpoint)
    report = evaluate(
        network, data.test_inputs, data.test_labels, data.num_classes,
        setup.train_config.eval_batch_size,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["metric,value", f"oa,{_fmt(report.oa)}", f"aa,{_fmt(report.aa)}",
             f"kappa,{_fmt(report.kappa)}"]
    for idx, f1 in enumerate(report.per_class_f1):
        lines.append(f"f1_class{idx},{_fmt(f1)}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if setup.figures:
        plots.confusion_figure(report.confusion, out / "confusion.png")
    print(f"OA {report.oa:.4f}  AA {report.aa:.4f}  kappa {report.kappa:.4f}")
    return 0


def cmd_report_groups(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data) if args.data else None
    setup = resolve_setup(config, dataset)
    network = build(setup.arch_spec())
    if args.checkpoint:
        load_checkpoint(network, args.checkpoint)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        records = group_structure_report(network)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["block,layer,groups,sparsity"]
    for r in records:
        lines.append(f"{r.block},{r.layer_index},{r.groups},{_fmt(r.sparsity)}")
    (out / "groups.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not records:
        print("warning: network has no masked layers; report is empty", file=sys.stderr)
        return 0
    write_masks(network, out / "masks")
    if setup.figures:
        plots.group_structure_figure(records, out / "groups.png")
    for r in records:
        print(f"{r.block:8s} layer {r.layer_index:3d}  groups {r.groups:4d}  "
              f"sparsity {r.sparsity:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    setup = resolve_setup(config, dataset)
    direction = args.direction or config.get("direction", "both")
    if direction not in ("forward", "backward", "both"):
        raise ConfigError(f"unknown direction {direction!r}")
    directions = ("forward", "backward") if direction == "both" else (direction,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(setup, dataset, directions, out)
    counts = baseline_parameter_counts(setup)
    write_ablation_summary(rows, counts, out / "summary.csv")
    write_metadata(out / "metadata.txt", config, setup, data_path=str(args.data))
    if setup.figures:
        from .architectures import canonical_blocks

        plots.ablation_figure(rows, list(canonical_blocks(setup.family)), counts,
                              out / "ablation.png")
    for r in rows:
        print(f"{r['direction']:8s} step {r['steps']} ({r['block']}): "
              f"OA {r['mean_oa']:.4f} +- {r['std_oa']:.4f}")
    return 0


def cmd_compare(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    setup = resolve_setup(config, dataset)
    strategy_text = args.strategies or config.get("strategies", "")
    strategies = tuple(s.strip() for s in strategy_text.split(",") if s.strip())
    plan = ComparisonPlan(strategies)  # raises ConfigError when empty/unknown
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_comparison(setup, dataset, plan, out)
    write_comparison_summary(rows, out / "summary.csv")
    write_metadata(out / "metadata.txt", config, setup, data_path=str(args.data))
    if setup.figures:
        plots.comparison_figure(rows, out / "comparison.png")
    for r in rows:
        print(f"{r['strategy']:14s} OA {r['mean_oa']:.4f} +- {r['std_oa']:.4f} {r.get('detail', '')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepgnet",
        description="Learnable group-structure convolution experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a multi-source dataset")
    p.add_argument("-c", "--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("-o", "--out", required=True, help="output tensor file (.bin)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train replicas and summarize")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report-groups", help="group count and sparsity per masked layer")
    p.add_argument("-c", "--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", help="dataset .bin (for channel/class counts)")
    p.add_argument("--checkpoint", help="trained checkpoint.bin")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_report_groups)

    p = sub.add_parser("ablate", help="block-wise replacement passes")
    _add_common(p)
    p.add_argument("--direction", choices=("forward", "backward", "both"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="convolution strategy comparison")
    _add_common(p)
    p.add_argument("--strategies", help="comma-separated strategy list")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContainerFormatError, DegenerateMaskError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
