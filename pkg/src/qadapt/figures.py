"""Matplotlib renders emitted next to the delimited report files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

ADAPTED_COLOR = "#7b2d8b"
TIME_COLOR = "#e07b39"


def render_loss_trace(trace: list[float], out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(1, len(trace) + 1), trace, color=ADAPTED_COLOR)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_sweep(rows: list[dict], param: str, out_path: Path) -> None:
    """Recall and training time against the swept parameter."""
    values = [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(values, [r["recall_at_1"] for r in rows], "o-", color=ADAPTED_COLOR, label="adapted")
    ax.plot(
        values,
        [r["pretrained_recall_at_1"] for r in rows],
        ":",
        color=ADAPTED_COLOR,
        label="pre-trained",
    )
    ax.set_xlabel(param)
    ax.set_ylabel("recall@1")
    ax.grid(alpha=0.3)
    twin = ax.twinx()
    twin.plot(values, [r["train_seconds"] for r in rows], "s-", color=TIME_COLOR, label="train time")
    twin.set_ylabel("training time (s)", color=TIME_COLOR)
    handles1, labels1 = ax.get_legend_handles_labels()
    handles2, labels2 = twin.get_legend_handles_labels()
    ax.legend(handles1 + handles2, labels1 + labels2, fontsize=8, loc="best")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_ablation(rows: list[dict], out_path: Path) -> None:
    names = [r["variant"] for r in rows]
    recalls = [r["recall_at_1"] or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    colors = [TIME_COLOR if n == "pretrained" else ADAPTED_COLOR for n in names]
    ax.bar(names, recalls, color=colors)
    ax.set_ylabel("recall@1")
    ax.set_ylim(0, 1.05)
    ax.tick_params(axis="x", rotation=30)
    for i, v in enumerate(recalls):
        ax.text(i, v + 0.01, f"{v:.2f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
