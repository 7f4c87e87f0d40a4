"""Figure rendering for the report paths, next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def group_structure_figure(records, path) -> None:
    """Two stacked panels: learned group count and mask sparsity per layer."""
    fig, (ax_groups, ax_sparsity) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    idx = [r.layer_index for r in records]
    ax_groups.plot(idx, [r.groups for r in records], "o-", color="tab:blue")
    ax_groups.set_ylabel("#groups")
    ax_groups.set_yscale("log", base=2)
    ax_sparsity.plot(idx, [r.sparsity for r in records], "o-", color="tab:orange")
    ax_sparsity.set_ylabel("sparsity")
    ax_sparsity.set_ylim(-0.05, 1.05)
    ax_sparsity.set_xlabel("masked layer (forward order)")
    blocks = [r.block for r in records]
    ticks = [i for i, b in enumerate(blocks) if i == 0 or blocks[i - 1] != b]
    ax_sparsity.set_xticks([idx[i] for i in ticks])
    ax_sparsity.set_xticklabels([blocks[i] for i in ticks], rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_figure(rows, block_names, param_counts, path) -> None:
    """Mean OA per removal step with std bars, parameter sizes underneath."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax2 = ax.twinx()
    positions = np.arange(len(block_names))
    bars = [param_counts.get(name, 0) for name in block_names]
    ax2.bar(positions, bars, width=0.55, color="tab:blue", alpha=0.25, zorder=0)
    ax2.set_ylabel("block parameters")
    colors = {"forward": "tab:red", "backward": "tab:blue"}
    for direction in ("forward", "backward"):
        sub = [r for r in rows if r["direction"] == direction]
        if not sub:
            continue
        xs = [block_names.index(r["block"]) for r in sub]
        means = [r["mean_oa"] for r in sub]
        stds = [r["std_oa"] for r in sub]
        ax.errorbar(
            xs, means, yerr=stds, fmt="o-", capsize=3,
            color=colors[direction], label=direction, zorder=3,
        )
    ax.set_xticks(positions)
    ax.set_xticklabels(block_names, rotation=45, ha="right")
    ax.set_ylabel("test OA")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def comparison_figure(rows, path) -> None:
    """Bar chart of mean test OA with std whiskers per strategy."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [r["strategy"] for r in rows]
    means = [r["mean_oa"] for r in rows]
    stds = [r["std_oa"] for r in rows]
    ax.bar(np.arange(len(rows)), means, yerr=stds, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_xticks(np.arange(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("test OA")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curves_figure(logs_by_seed, path) -> None:
    """Loss and test OA over epochs, one line per seed."""
    fig, (ax_loss, ax_oa) = plt.subplots(1, 2, figsize=(9, 3.5))
    for seed, rows in logs_by_seed.items():
        epochs = [r.epoch for r in rows]
        ax_loss.plot(epochs, [r.loss for r in rows], label=f"seed {seed}")
        ax_oa.plot(epochs, [r.test_oa for r in rows], label=f"seed {seed}")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_oa.set_xlabel("epoch")
    ax_oa.set_ylabel("test OA")
    ax_oa.set_ylim(0, 1.05)
    if logs_by_seed:
        ax_oa.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def confusion_figure(confusion, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(confusion, cmap="Blues")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
