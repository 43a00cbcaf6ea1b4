"""Comparison rows, width sweeps and their CSV/JSON/PNG renderings."""

from __future__ import annotations

import csv
import json
import statistics
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import plotting

COMPARISON_COLUMNS = [
    "system", "placement", "width", "mode", "seed", "trainable_fraction",
    "eval_loss", "eval_accuracy", "pack_bytes", "task",
]
SYSTEM_COLUMNS = ["system", "placement", "width", "mode", "runs", "trainable_fraction",
                  "median_eval_loss", "median_eval_accuracy"]
SWEEP_COLUMNS = ["width", "runs", "trainable_fraction", "median_eval_loss", "min_eval_loss", "max_eval_loss"]
COMPARISON_FILE = "comparison.csv"


def append_comparison_row(runs_dir, row: Mapping) -> Path:
    path = Path(runs_dir) / COMPARISON_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row.get(k, "") for k in COMPARISON_COLUMNS})
    return path


def read_comparison(runs_dir) -> list[dict]:
    path = Path(runs_dir) / COMPARISON_FILE
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["width"] = int(r["width"])
        r["seed"] = int(r["seed"])
        for k in ("trainable_fraction", "eval_loss", "eval_accuracy"):
            r[k] = float(r[k])
    return rows


def summarize_systems(rows: Iterable[Mapping]) -> list[dict]:
    groups: dict[str, list[Mapping]] = {}
    for r in rows:
        groups.setdefault(r["system"], []).append(r)
    out = []
    for system, rs in groups.items():
        out.append({
            "system": system,
            "placement": rs[0]["placement"],
            "width": rs[0]["width"],
            "mode": rs[0]["mode"],
            "runs": len(rs),
            "trainable_fraction": rs[0]["trainable_fraction"],
            "median_eval_loss": statistics.median(r["eval_loss"] for r in rs),
            "median_eval_accuracy": statistics.median(r["eval_accuracy"] for r in rs),
        })
    return out


def width_sweep(rows: Iterable[Mapping], widths: Sequence[int] | None = None, placement: str = "tpa") -> list[dict]:
    """Median eval loss per adapter width for one placement (all seeds pooled)."""
    by_width: dict[int, list[Mapping]] = {}
    for r in rows:
        if r["placement"] == placement and r["mode"] == "adapter":
            by_width.setdefault(int(r["width"]), []).append(r)
    chosen = sorted(by_width) if widths is None else [w for w in sorted(widths) if w in by_width]
    out = []
    for w in chosen:
        losses = [r["eval_loss"] for r in by_width[w]]
        out.append({
            "width": w,
            "runs": len(losses),
            "trainable_fraction": by_width[w][0]["trainable_fraction"],
            "median_eval_loss": statistics.median(losses),
            "min_eval_loss": min(losses),
            "max_eval_loss": max(losses),
        })
    return out


def seed_noise_band(sweep: Sequence[Mapping]) -> float:
    """Median over widths of the across-seed loss range."""
    if not sweep:
        return 0.0
    return statistics.median(r["max_eval_loss"] - r["min_eval_loss"] for r in sweep)


def is_monotone(sweep: Sequence[Mapping], band: float) -> bool:
    """Median loss never rises by more than ``band`` as width grows."""
    losses = [r["median_eval_loss"] for r in sweep]
    return all(b <= a + band for a, b in zip(losses, losses[1:]))


def _write_csv(path: Path, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def build_report(rows: Sequence[Mapping], widths: Sequence[int] | None = None) -> dict:
    systems = summarize_systems(rows)
    sweep = width_sweep(rows, widths)
    band = seed_noise_band(sweep)
    full = [s["median_eval_loss"] for s in systems if s["mode"] == "full"]
    return {
        "systems": systems,
        "width_sweep": sweep,
        "seed_noise_band": band,
        "width_monotone": is_monotone(sweep, band),
        "full_finetune_loss": full[0] if full else None,
    }


def write_report(report: Mapping, out) -> dict[str, Path]:
    """Write ``<out>.csv``, ``<out>_sweep.csv``, ``<out>.json`` and two PNG figures."""
    out = Path(out)
    stem = out.with_suffix("") if out.suffix in (".csv", ".json") else out
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "systems_csv": stem.with_name(stem.name + ".csv"),
        "sweep_csv": stem.with_name(stem.name + "_sweep.csv"),
        "json": stem.with_name(stem.name + ".json"),
        "width_png": stem.with_name(stem.name + "_width.png"),
        "systems_png": stem.with_name(stem.name + "_systems.png"),
    }
    _write_csv(paths["systems_csv"], report["systems"], SYSTEM_COLUMNS)
    _write_csv(paths["sweep_csv"], report["width_sweep"], SWEEP_COLUMNS)
    paths["json"].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    plotting.plot_width_sweep(report["width_sweep"], paths["width_png"], report["full_finetune_loss"])
    plotting.plot_systems(report["systems"], paths["systems_png"])
    return paths
