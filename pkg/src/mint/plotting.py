"""Report figures. Everything renders off-screen to image files."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def report_figure(width: float = 6.0, height: float | None = None):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden_ratio), facecolor="w")
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def moving_average(values: Sequence[float], window: int) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_loss_curves(rows: Sequence[Mapping], path, window: int = 5) -> Path:
    """One line per loss column found in a metrics CSV (stage 1: alc/alm/atg/total, stage 2: loss)."""
    fig, ax = report_figure()
    steps = [int(r["step"]) for r in rows]
    for col in ("alc", "alm", "atg", "total", "loss"):
        if rows and col in rows[0]:
            vals = [float(r[col]) for r in rows]
            if any(vals):
                ax.plot(steps, moving_average(vals, window), label=col)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (moving average, {window} steps)")
    if ax.lines:
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_recall_bars(r_at: Mapping[int, float], path) -> Path:
    fig, ax = report_figure(4.5)
    ks = sorted(r_at)
    ax.bar([f"R@{k}" for k in ks], [r_at[k] for k in ks], color="tab:blue")
    ax.set_ylim(0, 100)
    ax.set_ylabel("recall (%)")
    return _save(fig, path)


def plot_class_accuracy(per_class: Mapping[str, tuple[int, int]], path, title: str = "") -> Path:
    labels = list(per_class)
    fig, ax = report_figure(max(5.0, 0.6 * len(labels) + 2))
    acc = [100.0 * c / t if t else 0.0 for c, t in per_class.values()]
    ax.bar(range(len(labels)), acc, color="tab:green")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_metric_bars(metrics: Mapping[str, float], path, title: str = "") -> Path:
    fig, ax = report_figure(5.0)
    names = [k for k in metrics if k.startswith("rouge")]
    ax.bar(names, [metrics[k] for k in names], color="tab:orange")
    ax.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_ablation(rows: Sequence[Mapping], path) -> Path:
    fig, ax = report_figure()
    names = [r["method"] for r in rows]
    ax.bar(names, [r["accuracy"] for r in rows], color="tab:purple")
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.tick_params(axis="x", labelsize=8)
    return _save(fig, path)
