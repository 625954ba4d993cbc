"""Figures written by the train and eval steps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import pandas as pd


def plot_k_sweep(
    table: pd.DataFrame,
    output_path: str | Path,
    *,
    title: str = "Accuracy vs paragraph length",
) -> None:
    """Accuracy curves over paragraph length ``k``.

    Parameters
    ----------
    table : pd.DataFrame
        One row per (k, split, threshold) with columns ``k``, ``split``,
        ``threshold`` and ``accuracy``; rows with a missing accuracy are skipped.
    output_path : str | Path
        PNG destination.
    """
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=150)
    rows = table.dropna(subset=["accuracy"])
    for (split, threshold), group in rows.groupby(["split", "threshold"], sort=True):
        group = group.sort_values("k")
        style = "-" if split == "overall" else "--"
        ax.plot(group["k"], group["accuracy"], style, marker="o", label=f"{split} @ {threshold:g}")

    ax.set_xlabel("Sentences per paragraph (K)", fontsize=10)
    ax.set_ylabel("Accuracy", fontsize=10)
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title, fontsize=12, fontweight="bold")
    if len(rows) > 0:
        ax.legend(loc="lower right", fontsize=8, framealpha=0.8)
    ax.grid(True, alpha=0.3)

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def plot_loss_curve(
    log: pd.DataFrame,
    output_path: str | Path,
    *,
    columns: Sequence[str] = ("loss",),
) -> None:
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=150)
    for column in columns:
        if column in log and len(log) > 0:
            ax.plot(log["step"], log[column], label=column, linewidth=1.0)
    ax.set_xlabel("Step", fontsize=10)
    ax.set_ylabel("Loss", fontsize=10)
    if len(log) > 0:
        ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
