"""Static report figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.linestyle": "--",
    "grid.alpha": 0.5,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_width_sweep(sweep: Sequence[Mapping], path, full_loss: float | None = None) -> Path:
    """Median eval loss against trainable fraction, one point per adapter width."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = [100.0 * r["trainable_fraction"] for r in sweep]
        ys = [r["median_eval_loss"] for r in sweep]
        ax.plot(xs, ys, marker="o", color="tab:blue", label="TPA")
        for r, x, y in zip(sweep, xs, ys):
            ax.annotate(str(r["width"]), (x, y), textcoords="offset points", xytext=(4, 4), fontsize=7)
        if full_loss is not None:
            ax.axhline(full_loss, color="tab:red", linestyle=":", label="finetune 100%")
        ax.set_xlabel("Percentage of parameters updated")
        ax.set_ylabel("Eval loss")
        ax.legend()
        return _save(fig, path)


def plot_systems(rows: Sequence[Mapping], path) -> Path:
    """Bar chart of median eval loss per system."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r["system"] for r in rows]
        ax.bar(range(len(rows)), [r["median_eval_loss"] for r in rows], color="tab:gray")
        ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
        ax.set_ylabel("Eval loss")
        return _save(fig, path)


def plot_activation(rows: Sequence[Mapping], path) -> Path:
    """Fraction of activated neurons per block, one line per (site, scope)."""
    series: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for r in rows:
        series.setdefault((r["site"], r["scope"]), []).append((int(r["block_index"]), float(r["fraction_active"])))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (site, scope), pts in sorted(series.items()):
            pts.sort()
            style = "-" if scope == "all_tasks" else "--"
            ax.plot([p[0] + 1 for p in pts], [p[1] for p in pts], style, marker="o", markersize=3,
                    label=f"{site}: {scope.replace('_', ' ')}")
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("Conformer block index")
        ax.set_ylabel("Fraction of activated neurons")
        ax.legend()
        return _save(fig, path)
