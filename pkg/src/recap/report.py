"""Figure rendering for the CLI report paths (written next to the JSON/JSONL
artifacts)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def plot_loss_curve(losses: list[float], path: str, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(losses)), losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(arms: dict[str, dict], path: str) -> None:
    """Grouped bars: one panel per metric, one bar per arm."""
    metrics = ["heldout_ce", "exact_copy_rate", "bleu4", "cider_d"]
    names = list(arms)
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5))
    for ax, metric in zip(axes, metrics):
        vals = [arms[n][metric] for n in names]
        ax.bar(range(len(names)), vals, color="steelblue")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_title(metric)
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_dedup(top_groups: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    if top_groups:
        labels = [g["caption"][:24] for g in top_groups]
        counts = [g["count"] for g in top_groups]
        ax.barh(range(len(labels)), counts, color="indianred")
        ax.set_yticks(range(len(labels)))
        ax.set_yticklabels(labels, fontsize=8)
        ax.invert_yaxis()
    ax.set_xlabel("records sharing the caption")
    ax.set_title("largest duplicate-caption groups")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
