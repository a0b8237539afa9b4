"""Figure rendering for run directories and comparison tables.

Every figure lands next to the delimited output it illustrates.  The
Agg backend keeps rendering headless; metadata that would vary between
runs (timestamps) is stripped so reruns stay comparable.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.ticker import ScalarFormatter

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _finish(fig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def training_curve_figure(log: list[tuple[int, float, float]], path: str | Path) -> None:
    """Loss and validation Rouge-2 F1 per epoch for one run."""
    epochs = [row[0] for row in log]
    loss = [row[1] for row in log]
    val = [row[2] for row in log]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(epochs, loss, marker="o", color="#1f77b4")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(epochs, val, marker="o", color="#2ca02c")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val Rouge-2 F1")
    _finish(fig, path)


def comparison_figure(rows: list[dict], col: str, path: str | Path) -> None:
    """Bar chart of one metric column with per-condition error bars."""
    if not rows:
        return
    labels = [r["condition"] for r in rows]
    means = [r[f"{col}_mean"] for r in rows]
    sds = [r[f"{col}_sd"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 3.2))
    ax.bar(range(len(rows)), means, yerr=sds, capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(f"{col} F1 (test)")
    _finish(fig, path)


def sweep_figure(rows: list[dict], param: str, path: str | Path) -> None:
    """Line plot of test Rouge-2 F1 across a numeric sweep."""
    if not rows:
        return
    xs = []
    for r in rows:
        label = r["condition"]
        xs.append(float(label.split("=", 1)[1]) if "=" in label else float(label))
    means = [r["r2_mean"] for r in rows]
    sds = [r["r2_sd"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(xs, means, yerr=sds, marker="o", capsize=4, color="#c44e52")
    ax.set_xlabel(param)
    ax.set_ylabel("Rouge-2 F1 (test)")
    if param == "rank":
        ax.set_xscale("log", base=2)
        ax.set_xticks(xs)
        ax.get_xaxis().set_major_formatter(ScalarFormatter())
    _finish(fig, path)
