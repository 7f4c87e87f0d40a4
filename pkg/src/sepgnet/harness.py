"""Experiment orchestration: single runs, ablation passes, strategy comparisons.

A run directory has the layout::

    <run>/<cell>/<seed>/{log.csv, checkpoint.bin, masks/*.txt}
    <run>/summary.csv
    <run>/metadata.txt

where <cell> is a strategy name or an ablation step label. Every cell of a
sweep shares the seed list and the data split; a diverged cell records NaN
accuracy and the sweep continues.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plots
from .architectures import (
    ArchSpec,
    block_parameter_counts,
    build,
    canonical_blocks,
    group_structure_report,
    uniform_strategies,
)
from .configfile import ConfigError
from .container import load_tensors, save_tensors
from .data import ModalitySpec, SyntheticDataset, balanced_subset, extract_patches, extract_tiles
from .relmatrix import mask_to_text
from .training import (
    MetricsReport,
    ReplicaSummary,
    TrainConfig,
    TrainData,
    TrainingFailure,
    evaluate,
    normalize_channels,
    replicas,
    train,
)

COMPARISON_STRATEGIES = (
    "baseline",
    "gconv",
    "fgconv",
    "sepdgconv",
    "ablation_best",
    "false_group",
)

KNOWN_KEYS = {
    "family",
    "width_scale",
    "num_classes",
    "in_channels",
    "task",
    "strategy",
    "groups",
    "init",
    "zero_init_residual",
    "optimizer",
    "lr",
    "lr_steps",
    "momentum",
    "epochs",
    "batch_size",
    "eval_batch_size",
    "seeds",
    "weight_decay",
    "gate_lr",
    "gate_weight_decay",
    "patch_size",
    "tile",
    "tile_stride",
    "max_train_per_class",
    "max_test_per_class",
    "run_name",
    "direction",
    "strategies",
    "figures",
    "gen_modalities",
    "gen_classes",
    "gen_size",
    "gen_seed",
    "gen_fusion",
    "gen_task",
    "gen_region",
    "gen_border_ignore",
}


def validate_keys(config: dict[str, str]) -> None:
    for key in config:
        base = key.split(".", 1)[0]
        if base == "strategy":
            continue
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")


def parse_seeds(text: str) -> tuple[int, ...]:
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(p) for p in text.split(",") if p.strip())


def parse_width_scale(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def parse_lr_steps(text: str) -> tuple[tuple[int, float], ...]:
    text = text.strip()
    if not text:
        return ()
    steps = []
    for item in text.split(","):
        epoch, rate = item.split(":", 1)
        steps.append((int(epoch), float(rate)))
    return tuple(steps)


def parse_modalities(text: str) -> tuple[ModalitySpec, ...]:
    specs = []
    for item in text.split(","):
        parts = item.split(":")
        if len(parts) != 4:
            raise ConfigError(f"modality spec {item!r} is not name:channels:kind:noise")
        specs.append(ModalitySpec(parts[0], int(parts[1]), parts[2], float(parts[3])))
    return tuple(specs)


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentSetup:
    """Resolved configuration for one experiment family."""

    family: str
    width_scale: float
    num_classes: int
    in_channels: int
    task: str
    block_strategies: dict
    groups: int
    sensor_widths: tuple[int, ...] | None
    train_config: TrainConfig
    patch_size: int = 7
    tile: int = 16
    tile_stride: int = 16
    max_train_per_class: int | None = None
    max_test_per_class: int | None = None
    run_name: str = "model"
    figures: bool = True

    def arch_spec(self, block_strategies=None) -> ArchSpec:
        return ArchSpec(
            family=self.family,
            num_classes=self.num_classes,
            in_channels=self.in_channels,
            width_scale=self.width_scale,
            task=self.task,
            block_strategies=dict(
                self.block_strategies if block_strategies is None else block_strategies
            ),
            groups=self.groups,
            sensor_widths=self.sensor_widths,
        )


def resolve_setup(config: dict[str, str], dataset: SyntheticDataset | None = None) -> ExperimentSetup:
    validate_keys(config)
    try:
        family = config.get("family", "resnet18")
        default_strategy = config.get("strategy", "regular")
        blocks = canonical_blocks(family)
        strategies = {name: default_strategy for name in blocks}
        for key, value in config.items():
            if key.startswith("strategy."):
                strategies[key.split(".", 1)[1]] = value

        num_classes = int(config["num_classes"]) if "num_classes" in config else (
            dataset.num_classes if dataset else None
        )
        in_channels = int(config["in_channels"]) if "in_channels" in config else (
            dataset.channels if dataset else None
        )
        if num_classes is None or in_channels is None:
            raise ConfigError("num_classes / in_channels unset and no dataset given")
        task = config.get("task") or (dataset.task if dataset else "")

        groups = int(config["groups"]) if "groups" in config else (
            len(dataset.modalities) if dataset else 1
        )
        sensor_widths = (
            tuple(m.channels for m in dataset.modalities) if dataset else None
        )

        train_config = TrainConfig(
            epochs=int(config.get("epochs", 100)),
            batch_size=int(config.get("batch_size", 64)),
            optimizer=config.get("optimizer", "sgd"),
            lr=float(config.get("lr", 0.001)),
            lr_steps=parse_lr_steps(config.get("lr_steps", "")),
            momentum=float(config.get("momentum", 0.9)),
            weight_decay=float(config.get("weight_decay", 0.0)),
            gate_lr=float(config["gate_lr"]) if "gate_lr" in config else None,
            gate_weight_decay=float(config.get("gate_weight_decay", 0.0)),
            init_scheme=config.get("init", "uniform"),
            zero_init_residual=_parse_bool(config.get("zero_init_residual", "false")),
            seeds=parse_seeds(config.get("seeds", "42-46")),
            eval_batch_size=int(config.get("eval_batch_size", 256)),
        )
        setup = ExperimentSetup(
            family=family,
            width_scale=parse_width_scale(config.get("width_scale", "1")),
            num_classes=num_classes,
            in_channels=in_channels,
            task=task,
            block_strategies=strategies,
            groups=groups,
            sensor_widths=sensor_widths,
            train_config=train_config,
            patch_size=int(config.get("patch_size", 7)),
            tile=int(config.get("tile", 16)),
            tile_stride=int(config.get("tile_stride", 16)),
            max_train_per_class=(
                int(config["max_train_per_class"]) if "max_train_per_class" in config else None
            ),
            max_test_per_class=(
                int(config["max_test_per_class"]) if "max_test_per_class" in config else None
            ),
            run_name=config.get("run_name", "model"),
            figures=_parse_bool(config.get("figures", "true")),
        )
    except ConfigError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    # construct one spec eagerly so invalid block names/strategies surface now
    setup.arch_spec()
    return setup


def make_train_data(dataset: SyntheticDataset, setup: ExperimentSetup) -> TrainData:
    """Materialize train/test arrays; the subsampling rng derives from the
    dataset seed, so every strategy and every run seed shares one split."""
    normalized = dataclasses.replace(
        dataset, image=normalize_channels(dataset.image)
    )
    if setup.task == "segmentation":
        train_x, train_y = extract_tiles(normalized, setup.tile, setup.tile_stride, split="train")
        test_x, test_y = extract_tiles(normalized, setup.tile, setup.tile_stride, split="test")
        return TrainData(train_x, train_y, test_x, test_y, dataset.num_classes)
    rng = np.random.default_rng(dataset.seed + 1_000_003)
    train_idx = dataset.train_indices
    test_idx = dataset.test_indices
    if setup.max_train_per_class is not None:
        train_idx = balanced_subset(normalized, train_idx, setup.max_train_per_class, rng)
    if setup.max_test_per_class is not None:
        test_idx = balanced_subset(normalized, test_idx, setup.max_test_per_class, rng)
    train_x, train_y = extract_patches(normalized, setup.patch_size, train_idx)
    test_x, test_y = extract_patches(normalized, setup.patch_size, test_idx)
    return TrainData(train_x, train_y, test_x, test_y, dataset.num_classes)


def _fmt(value) -> str:
    value = float(value)
    if math.isnan(value):
        return "nan"
    return repr(value)


def save_checkpoint(network, path) -> None:
    save_tensors(path, network.state_arrays())


def load_checkpoint(network, path) -> None:
    network.load_state_arrays(load_tensors(path))


def write_log_csv(rows, path) -> None:
    lines = ["epoch,lr,loss,train_oa,test_oa"]
    for r in rows:
        lines.append(
            f"{r.epoch},{_fmt(r.lr)},{_fmt(r.loss)},{_fmt(r.train_oa)},{_fmt(r.test_oa)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_masks(network, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for record, conv in zip(
        group_structure_report(network), _masked_convs(network)
    ):
        name = f"{record.layer_index:02d}_{record.block}.txt"
        (directory / name).write_text(mask_to_text(conv.current_mask()), encoding="utf-8")


def _masked_convs(network):
    out = []
    for block in network.named_blocks.values():
        out.extend(block.masked_convs())
    return out


def run_cell(
    setup: ExperimentSetup,
    data: TrainData,
    block_strategies: dict,
    seed: int,
    cell_dir: Path | None = None,
) -> MetricsReport:
    """Build, initialize, train and evaluate one (configuration, seed) cell."""
    import warnings

    spec = setup.arch_spec(block_strategies)
    network = build(spec)
    rng = np.random.default_rng(seed)
    network.init_params(
        rng, setup.train_config.init_scheme, setup.train_config.zero_init_residual
    )
    log = train(network, data, setup.train_config, rng)
    report = evaluate(
        network,
        data.test_inputs,
        data.test_labels,
        data.num_classes,
        setup.train_config.eval_batch_size,
    )
    if cell_dir is not None:
        cell_dir = Path(cell_dir)
        cell_dir.mkdir(parents=True, exist_ok=True)
        write_log_csv(log, cell_dir / "log.csv")
        save_checkpoint(network, cell_dir / "checkpoint.bin")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if group_structure_report(network):
                write_masks(network, cell_dir / "masks")
    return report


def run_replicated(
    setup: ExperimentSetup,
    data: TrainData,
    block_strategies: dict,
    cell_name: str,
    out_dir: Path | None = None,
) -> ReplicaSummary:
    def one(seed: int) -> MetricsReport:
        cell_dir = None if out_dir is None else Path(out_dir) / cell_name / str(seed)
        return run_cell(setup, data, block_strategies, seed, cell_dir)

    return replicas(one, setup.train_config.seeds)


# -- ablation ---------------------------------------------------------------


@dataclass(frozen=True)
class AblationPlan:
    """Block replacement order for one architecture family."""

    family: str
    direction: str  # "forward" | "backward"

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def blocks(self) -> tuple[str, ...]:
        order = canonical_blocks(self.family)
        return order if self.direction == "forward" else tuple(reversed(order))


def hybrid_strategies(plan: AblationPlan, steps: int) -> dict:
    """Strategy map after replacing the first `steps` blocks of the pass order
    with regular convolution; the remaining blocks stay gated."""
    order = plan.blocks
    if not 0 <= steps <= len(order):
        raise ValueError("steps outside the pass")
    replaced = set(order[:steps])
    return {
        name: ("regular" if name in replaced else "dgconv")
        for name in canonical_blocks(plan.family)
    }


def run_ablation(
    setup: ExperimentSetup,
    dataset: SyntheticDataset,
    directions=("forward", "backward"),
    out_dir=None,
) -> list[dict]:
    """One row per removal step and direction, with replica OA stats."""
    data = make_train_data(dataset, setup)
    rows = []
    for direction in directions:
        plan = AblationPlan(setup.family, direction)
        for steps in range(1, len(plan.blocks) + 1):
            block = plan.blocks[steps - 1]
            strategies = hybrid_strategies(plan, steps)
            cell = f"{direction}-{steps:02d}-{block}"
            summary = run_replicated(setup, data, strategies, cell, out_dir)
            rows.append(
                {
                    "direction": direction,
                    "steps": steps,
                    "block": block,
                    "mean_oa": summary.mean("oa"),
                    "std_oa": summary.std("oa"),
                    "seeds": summary.seeds,
                }
            )
    return rows


def baseline_parameter_counts(setup: ExperimentSetup) -> dict[str, int]:
    """Dense per-block parameter counts (mask independent): the static bars."""
    spec = setup.arch_spec(uniform_strategies(setup.family, "regular"))
    return block_parameter_counts(build(spec))


def write_ablation_summary(rows, counts, path) -> None:
    blocks = sorted(counts)
    header = "direction,steps,block,mean_oa,std_oa," + ",".join(
        f"params_{b}" for b in blocks
    )
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['direction']},{r['steps']},{r['block']},{_fmt(r['mean_oa'])},{_fmt(r['std_oa'])},"
            + ",".join(str(counts[b]) for b in blocks)
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- strategy comparison ------------------------------------------------------


def false_partition(widths: tuple[int, ...]) -> tuple[int, ...]:
    """Same totals, deliberately misaligned with the sensor boundaries."""
    total, g = sum(widths), len(widths)
    near_even = tuple(total // g + (1 if i < total % g else 0) for i in range(g))
    if near_even != tuple(widths):
        return near_even
    # already even: shift one channel across the first boundary
    shifted = list(near_even)
    for i in range(g - 1):
        if shifted[i] > 1:
            shifted[i] -= 1
            shifted[i + 1] += 1
            break
    return tuple(shifted)


@dataclass(frozen=True)
class ComparisonPlan:
    strategies: tuple[str, ...]
    ablation_rows: tuple = ()

    def __post_init__(self):
        if not self.strategies:
            raise ConfigError("comparison needs at least one strategy")
        for s in self.strategies:
            if s not in COMPARISON_STRATEGIES:
                raise ConfigError(f"unknown comparison strategy {s!r}")


def _strategy_setup(setup: ExperimentSetup, strategy: str) -> tuple[ExperimentSetup, dict]:
    """Per-strategy block map plus any setup adjustment (false grouping)."""
    family = setup.family
    if strategy == "baseline":
        return setup, uniform_strategies(family, "regular")
    if strategy == "sepdgconv":
        return setup, uniform_strategies(family, "dgconv")
    if strategy == "gconv":
        return setup, uniform_strategies(family, "group")
    if strategy == "fgconv":
        return setup, uniform_strategies(family, "fgconv")
    if strategy == "false_group":
        widths = setup.sensor_widths
        if widths is None:
            raise ConfigError("false_group needs sensor widths from the dataset")
        fake = false_partition(tuple(widths))
        adjusted = dataclasses.replace(setup, sensor_widths=fake, groups=len(fake))
        return adjusted, uniform_strategies(family, "group")
    raise ConfigError(f"strategy {strategy!r} is not a direct run")


def run_comparison(
    setup: ExperimentSetup,
    dataset: SyntheticDataset,
    plan: ComparisonPlan,
    out_dir=None,
) -> list[dict]:
    data = make_train_data(dataset, setup)
    rows = []
    for strategy in plan.strategies:
        if strategy == "ablation_best":
            abl = list(plan.ablation_rows) or run_ablation(
                setup, dataset, ("forward", "backward"),
                None if out_dir is None else Path(out_dir) / "ablation",
            )
            finite = [r for r in abl if np.isfinite(r["mean_oa"])]
            if not finite:
                rows.append({"strategy": strategy, "mean_oa": float("nan"),
                             "std_oa": float("nan"), "detail": "no finite cell"})
                continue
            best = max(finite, key=lambda r: r["mean_oa"])
            rows.append(
                {
                    "strategy": strategy,
                    "mean_oa": best["mean_oa"],
                    "std_oa": best["std_oa"],
                    "detail": f"{best['direction']}-{best['steps']:02d}-{best['block']}",
                }
            )
            continue
        cell_setup, strategies = _strategy_setup(setup, strategy)
        summary = run_replicated(cell_setup, data, strategies, strategy, out_dir)
        rows.append(
            {
                "strategy": strategy,
                "mean_oa": summary.mean("oa"),
                "std_oa": summary.std("oa"),
                "detail": "",
            }
        )
    return rows


def write_comparison_summary(rows, path) -> None:
    lines = ["strategy,mean_oa,std_oa,detail"]
    for r in rows:
        lines.append(f"{r['strategy']},{_fmt(r['mean_oa'])},{_fmt(r['std_oa'])},{r.get('detail', '')}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_metadata(path, config: dict[str, str], setup: ExperimentSetup, data_path="") -> None:
    lines = [
        "# run metadata",
        f"data={data_path}",
        f"seeds={','.join(str(s) for s in setup.train_config.seeds)}",
        f"family={setup.family}",
        f"task={setup.task}",
    ]
    lines.append("# config")
    for key in sorted(config):
        lines.append(f"{key}={config[key]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
