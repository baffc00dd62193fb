"""Matplotlib figures for the report path, rendered headless to SVG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import quantile_curve
from .report import DEFAULT_QUANTILE_GRID

_METRIC_LABELS = {
    "top10": "top 10% mean ROUGE-L",
    "top30": "top 30% mean ROUGE-L",
    "top50": "top 50% mean ROUGE-L",
    "top100": "mean ROUGE-L",
}


def plot_leakage_over_rounds(reports, metric: str, path) -> None:
    """One line per (task, scheme): the chosen aggregate against the round index."""
    groups: dict = {}
    for report in reports:
        groups.setdefault((report.task, report.scheme), []).append(report)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for (task, scheme), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.round)
        ax.plot(
            [r.round for r in rows],
            [getattr(r, metric) for r in rows],
            marker="o", markersize=3, label=f"{task} / {scheme}",
        )
    ax.set_xlabel("communication round")
    ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_quantile(first_scores, last_scores, first_round: int, last_round: int, path) -> None:
    """Score of the top-x% cutoff: pre-training baseline dashed, final solid."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    grid = list(DEFAULT_QUANTILE_GRID)
    for scores, round_idx, style in (
        (first_scores, first_round, "--"),
        (last_scores, last_round, "-"),
    ):
        curve = quantile_curve(list(scores), grid)
        ax.plot(
            [100 * f for f, _ in curve],
            [s for _, s in curve],
            style, marker=".", label=f"round {round_idx}",
        )
    ax.set_xlabel("top x% of samples")
    ax.set_ylabel("ROUGE-L cutoff")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_train_loss(round_logs, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    rounds = [entry["round"] for entry in round_logs]
    ax.plot(rounds, [entry["global_loss"] for entry in round_logs], marker="o", markersize=3,
            label="train loss")
    if any(entry.get("global_ce_loss") != entry["global_loss"] for entry in round_logs):
        ax.plot(rounds, [entry["global_ce_loss"] for entry in round_logs], marker="s",
                markersize=3, label="cross-entropy part")
    ax.set_xlabel("communication round")
    ax.set_ylabel("mean training loss")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
