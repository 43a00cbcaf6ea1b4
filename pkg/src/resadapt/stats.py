"""ReLU activation statistics and exact neuron pruning.

A neuron counts as activated on a frame when its pre-activation is strictly
positive. Neurons that never activate on a dataset contribute exactly zero
through a ReLU, so removing them leaves every output on that dataset intact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterSet, prune_adapter
from .errors import ConfigError, DegenerateAdapterError, DimensionError, PreconditionError
from .layers import FFNParams, LayerNormParams, LinearParams
from .autodiff import Tensor
from .sites import Site

EXACT_POST_TOL = 1e-12

REPORT_COLUMNS = ["block_index", "site", "neurons_total", "neurons_active", "fraction_active", "scope"]
NEURON_COLUMNS = ["block_index", "site", "neuron", "positive_count", "total_frames", "max_abs_post"]


@dataclass(frozen=True, order=True)
class StatSite:
    """``kind`` is ``adapter`` (a bottleneck) or ``ffn`` (a frozen FFN inner layer)."""

    block_index: int
    kind: str
    site: Site

    @property
    def tag(self) -> str:
        return f"{self.kind}.{self.site.value}"

    @classmethod
    def parse(cls, block_index: int, tag: str) -> "StatSite":
        kind, _, site = tag.partition(".")
        try:
            return cls(int(block_index), kind, Site(site))
        except ValueError:
            raise ConfigError(f"unknown statistics site {tag!r}") from None


@dataclass
class ActivationStats:
    site: StatSite
    positive_count: np.ndarray
    total_frames: int = 0
    max_abs_post: np.ndarray | None = None

    def __post_init__(self):
        self.positive_count = np.asarray(self.positive_count, dtype=np.int64)
        if self.max_abs_post is None:
            self.max_abs_post = np.zeros(self.positive_count.shape)

    @classmethod
    def empty(cls, site: StatSite, width: int) -> "ActivationStats":
        return cls(site, np.zeros(width, dtype=np.int64), 0, np.zeros(width))

    @property
    def width(self) -> int:
        return self.positive_count.shape[0]

    def update(self, pre: np.ndarray, post: np.ndarray) -> None:
        pre = pre.reshape(-1, self.width)
        self.positive_count += (pre > 0).sum(axis=0)
        self.total_frames += pre.shape[0]
        np.maximum(self.max_abs_post, np.abs(post).reshape(-1, self.width).max(axis=0, initial=0.0),
                   out=self.max_abs_post)

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        if other.site != self.site or other.width != self.width:
            raise ConfigError(f"cannot merge statistics for {self.site} and {other.site}")
        return ActivationStats(
            self.site,
            self.positive_count + other.positive_count,
            self.total_frames + other.total_frames,
            np.maximum(self.max_abs_post, other.max_abs_post),
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ActivationStats)
            and self.site == other.site
            and self.total_frames == other.total_frames
            and np.array_equal(self.positive_count, other.positive_count)
            and np.array_equal(self.max_abs_post, other.max_abs_post)
        )


def merge_stats(a: Mapping[StatSite, ActivationStats], b: Mapping[StatSite, ActivationStats]):
    if set(a) != set(b):
        raise ConfigError("statistics cover different sites")
    return {s: a[s].merge(b[s]) for s in a}


def available_sites(model, include_ffn: bool = False) -> list[StatSite]:
    sites = []
    if model.adapters is not None:
        for i, site, p in model.adapters.items():
            if not p.collapsed:
                sites.append(StatSite(i, "adapter", site))
    if include_ffn:
        for i in range(len(model.encoder)):
            sites += [StatSite(i, "ffn", Site.FFN1), StatSite(i, "ffn", Site.FFN2)]
    return sorted(sites)


def _site_width(model, s: StatSite) -> int:
    if s.kind == "adapter":
        return model.adapters.blocks[s.block_index][s.site].width
    return getattr(model.encoder[s.block_index], s.site.value).inner.out_features


def collect_stats(model, inputs: np.ndarray, sites: Sequence[StatSite] | None = None,
                  chunk: int = 64) -> dict[StatSite, ActivationStats]:
    """Count strictly positive pre-activations per neuron over ``inputs`` ``[N, T, d]``."""
    if sites is None:
        sites = available_sites(model)
    valid = set(available_sites(model, include_ffn=True))
    unknown = [s for s in sites if s not in valid]
    if unknown:
        raise ConfigError(f"unknown statistics sites: {', '.join(f'{s.block_index}:{s.tag}' for s in unknown)}")
    stats = {s: ActivationStats.empty(s, _site_width(model, s)) for s in sites}
    by_key = {(s.block_index, s.tag): stats[s] for s in sites}

    def probe(block_index: int, tag: str, pre: np.ndarray) -> None:
        st = by_key.get((block_index, tag))
        if st is None:
            return
        post = np.maximum(pre, 0.0) if st.site.kind == "adapter" else pre * ad._sigmoid(pre)
        st.update(pre, post)

    inputs = np.asarray(inputs, dtype=np.float64)
    with ad.no_grad():
        for start in range(0, inputs.shape[0], chunk):
            model.forward(inputs[start : start + chunk], probe=probe)
    return stats


def activation_rate(stats: ActivationStats) -> np.ndarray:
    if stats.total_frames <= 0:
        raise PreconditionError(f"no frames recorded for {stats.site}")
    return stats.positive_count / stats.total_frames


def fraction_active(stats: ActivationStats, cutoff: float = 0.0) -> float:
    """Fraction of neurons whose activation rate exceeds ``cutoff``."""
    return float(np.mean(activation_rate(stats) > cutoff))


def keep_mask(stats: ActivationStats, threshold: float = 0.0, exact: bool = True) -> np.ndarray:
    """Neurons to keep: those whose activation rate exceeds ``threshold``.

    For FFN (swish) sites in ``exact`` mode a neuron is dropped only when it
    never fired and its post-activation magnitude stayed below 1e-12.
    """
    rate = activation_rate(stats)
    if stats.site.kind == "ffn" and exact:
        return ~((stats.positive_count == 0) & (stats.max_abs_post < EXACT_POST_TOL))
    return rate > threshold


def prune_ffn(p: FFNParams, keep) -> FFNParams:
    keep = np.asarray(keep, dtype=bool)
    width = p.inner.out_features
    if keep.shape != (width,):
        raise DimensionError(f"prune mask has shape {keep.shape}, FFN inner width is {width}")
    if not keep.any():
        raise DegenerateAdapterError("pruning would remove every FFN inner neuron")
    norm = LayerNormParams(Tensor(p.pre_norm.gamma.data), Tensor(p.pre_norm.beta.data), p.pre_norm.eps)
    return FFNParams(
        norm,
        LinearParams(Tensor(p.inner.weight.data[:, keep]), Tensor(p.inner.bias.data[keep])),
        LinearParams(Tensor(p.outer.weight.data[keep, :]), Tensor(p.outer.bias.data)),
    )


@dataclass
class PruneSummary:
    site: StatSite
    kept: int
    total: int


def prune_adapter_set(adapters: AdapterSet, stats: Mapping[StatSite, ActivationStats],
                      threshold: float = 0.0, allow_empty: bool = False) -> tuple[AdapterSet, list[PruneSummary]]:
    """Prune every adapter that has statistics; other adapters are copied unchanged."""
    blocks = []
    summary = []
    for i, sites in enumerate(adapters.blocks):
        new = {}
        for site, p in sites.items():
            st = stats.get(StatSite(i, "adapter", site))
            if st is None or p.collapsed:
                new[site] = prune_adapter(p, np.ones(p.width, dtype=bool))
                continue
            if st.width != p.width:
                raise DimensionError(f"statistics for {i}:{site.value} cover {st.width} neurons, adapter has {p.width}")
            keep = keep_mask(st, threshold)
            if not keep.any() and not allow_empty:
                raise DegenerateAdapterError(
                    f"threshold {threshold} would remove all {p.width} neurons of adapter {st.site.block_index}:"
                    f"{site.value}; pass allow_empty to collapse it to x + b_2")
            new[site] = prune_adapter(p, keep, allow_empty=allow_empty)
            summary.append(PruneSummary(st.site, int(keep.sum()), p.width))
        blocks.append(new)
    return AdapterSet(adapters.spec, blocks), summary


# reports -------------------------------------------------------------------------

def activation_report(stats: Mapping[StatSite, ActivationStats],
                      per_task: Sequence[Mapping[StatSite, ActivationStats]] = (),
                      cutoff: float = 0.0) -> list[dict]:
    """One row per site: neurons active over all data, plus the per-task maximum.

    ``single_task_max`` rows are emitted only when more than one task was
    measured separately.
    """
    rows = []
    for s in sorted(stats):
        active = int((activation_rate(stats[s]) > cutoff).sum())
        rows.append(_row(s, stats[s].width, active, "all_tasks"))
    if len(per_task) > 1:
        for s in sorted(stats):
            best = max(int((activation_rate(t[s]) > cutoff).sum()) for t in per_task)
            rows.append(_row(s, stats[s].width, best, "single_task_max"))
    return rows


def _row(s: StatSite, total: int, active: int, scope: str) -> dict:
    return {
        "block_index": s.block_index,
        "site": s.tag,
        "neurons_total": total,
        "neurons_active": active,
        "fraction_active": active / total,
        "scope": scope,
    }


def write_rows(rows: Iterable[dict], path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def neuron_rows(stats: Mapping[StatSite, ActivationStats], **extra) -> list[dict]:
    rows = []
    for s in sorted(stats):
        st = stats[s]
        for j in range(st.width):
            rows.append({
                "block_index": s.block_index,
                "site": s.tag,
                "neuron": j,
                "positive_count": int(st.positive_count[j]),
                "total_frames": st.total_frames,
                "max_abs_post": repr(float(st.max_abs_post[j])),
                **extra,
            })
    return rows


def read_neuron_stats(path) -> tuple[dict[StatSite, ActivationStats], list[dict]]:
    """Rebuild per-site statistics from a per-neuron CSV written by :func:`neuron_rows`."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not set(NEURON_COLUMNS) <= set(rows[0]):
        raise ConfigError(f"{path}: not a per-neuron statistics file (need columns {NEURON_COLUMNS})")
    grouped: dict[StatSite, list[dict]] = {}
    for r in rows:
        grouped.setdefault(StatSite.parse(int(r["block_index"]), r["site"]), []).append(r)
    out = {}
    for s, rs in grouped.items():
        rs.sort(key=lambda r: int(r["neuron"]))
        if [int(r["neuron"]) for r in rs] != list(range(len(rs))):
            raise ConfigError(f"{path}: neuron indices for {s.block_index}:{s.tag} are not contiguous")
        totals = {int(r["total_frames"]) for r in rs}
        if len(totals) != 1:
            raise ConfigError(f"{path}: inconsistent total_frames for {s.block_index}:{s.tag}")
        out[s] = ActivationStats(
            s,
            np.array([int(r["positive_count"]) for r in rs]),
            totals.pop(),
            np.array([float(r["max_abs_post"]) for r in rs]),
        )
    return out, rows
