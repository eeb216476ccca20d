"""Aggregate sweep records into heatmaps, trade-off curves, and a threshold.

The threshold rule: min-max normalize both corpus-mean metrics over the tau_end=0
curve, then pick the tau_start maximizing the smaller of the two normalized values,
breaking ties toward larger tau_start. The rule is scale-free (invariant under any
strictly increasing affine rescaling of either metric) and always lands on the
Pareto frontier, because a strictly dominated point has a strictly smaller minimum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .probe import ProbeRecord

BOOTSTRAP_RESAMPLES = 1000


def _ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(values, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1)
    uniq, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.zeros(len(uniq))
    np.add.at(sums, inverse, ranks)
    return (sums / counts)[inverse]


def spearman(x, y) -> float:
    """Rank correlation with average-rank tie handling."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length 1-d sequences of length >= 2")
    rx = _ranks(x) - (len(x) + 1) / 2
    ry = _ranks(y) - (len(y) + 1) / 2
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        raise ValueError("rank correlation undefined for a constant sequence")
    return float((rx * ry).sum() / denom)


def bootstrap_se(values, n_resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> float:
    """Standard error of the mean via seeded bootstrap."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    idx = rng.integers(arr.size, size=(n_resamples, arr.size))
    return float(arr[idx].mean(axis=1).std())


@dataclass
class HeatmapGrid:
    """Corpus means over the (tau_start, tau_end) grid; invalid cells are NaN."""

    taus: list[int]
    appearance: np.ndarray
    motion: np.ndarray
    appearance_se: np.ndarray
    motion_se: np.ndarray
    counts: np.ndarray

    def cell(self, tau_start: int, tau_end: int) -> tuple[float, float]:
        i = self.taus.index(tau_start)
        j = self.taus.index(tau_end)
        return float(self.appearance[i, j]), float(self.motion[i, j])


@dataclass(frozen=True)
class CurvePoint:
    tau_start: int
    appearance_gain: float
    motion_preservation: float
    appearance_se: float = 0.0
    motion_se: float = 0.0


@dataclass
class ThresholdChoice:
    tau_star: int
    rule: str
    normalized_gain: float
    normalized_preservation: float


def _cell_values(records: list[ProbeRecord]) -> dict[tuple[int, int], list[tuple[float, float]]]:
    cells: dict[tuple[int, int], list[tuple[float, float]]] = {}
    for r in records:
        if r.failed:
            continue
        key = (r.window.tau_start, r.window.tau_end)
        cells.setdefault(key, []).append((r.appearance_gain, r.motion_preservation))
    return cells


def build_heatmaps(
    records: list[ProbeRecord],
    T: int,
    interval: int,
    strict: bool = True,
    seed: int = 0,
) -> HeatmapGrid:
    """Mean grids over the full window grid; rows tau_start, columns tau_end."""
    taus = list(range(0, T + 1, interval))
    n = len(taus)
    appearance = np.full((n, n), np.nan)
    motion = np.full((n, n), np.nan)
    app_se = np.full((n, n), np.nan)
    mot_se = np.full((n, n), np.nan)
    counts = np.zeros((n, n), dtype=int)

    cells = _cell_values(records)
    missing = []
    for i, ts in enumerate(taus):
        for j, te in enumerate(taus):
            if ts <= te:
                continue
            vals = cells.get((ts, te))
            if not vals:
                missing.append((ts, te))
                continue
            gains = [g for g, _ in vals]
            pres = [p for _, p in vals]
            appearance[i, j] = np.mean(gains)
            motion[i, j] = np.mean(pres)
            app_se[i, j] = bootstrap_se(gains, seed=seed)
            mot_se[i, j] = bootstrap_se(pres, seed=seed + 1)
            counts[i, j] = len(vals)
    if strict and missing:
        raise ValueError(f"sweep is missing {len(missing)} grid cells: {missing[:8]}...")
    return HeatmapGrid(taus, appearance, motion, app_se, mot_se, counts)


def row_max_at_zero_fraction(grid: HeatmapGrid) -> float:
    """Fraction of tau_start rows whose appearance mean peaks at tau_end=0."""
    hits = 0
    rows = 0
    col0 = grid.taus.index(0)
    for i, ts in enumerate(grid.taus):
        row = grid.appearance[i]
        if np.all(np.isnan(row)):
            continue
        rows += 1
        hits += int(np.nanargmax(row) == col0)
    if rows == 0:
        raise ValueError("empty heatmap")
    return hits / rows


def tradeoff_curve(records: list[ProbeRecord], tau_end: int = 0, seed: int = 0) -> list[CurvePoint]:
    """Corpus-mean metrics against tau_start on the fixed-tau_end slice."""
    cells = _cell_values(records)
    slice_keys = sorted(k for k in cells if k[1] == tau_end)
    if not slice_keys:
        raise ValueError(f"no records with tau_end={tau_end}")
    points = []
    for ts, te in slice_keys:
        gains = [g for g, _ in cells[(ts, te)]]
        pres = [p for _, p in cells[(ts, te)]]
        points.append(
            CurvePoint(
                tau_start=ts,
                appearance_gain=float(np.mean(gains)),
                motion_preservation=float(np.mean(pres)),
                appearance_se=bootstrap_se(gains, seed=seed),
                motion_se=bootstrap_se(pres, seed=seed + 1),
            )
        )
    return points


def pareto_frontier(points: list[CurvePoint]) -> list[CurvePoint]:
    """Points not strictly dominated in both metrics, ascending tau_start."""
    frontier = []
    for p in points:
        dominated = any(
            q.appearance_gain > p.appearance_gain
            and q.motion_preservation > p.motion_preservation
            for q in points
        )
        if not dominated:
            frontier.append(p)
    return sorted(frontier, key=lambda p: p.tau_start)


def select_threshold(curve: list[CurvePoint]) -> ThresholdChoice:
    """Max-min of min-max-normalized metrics; ties go to the larger tau_start."""
    if len(curve) < 3:
        raise ValueError("need at least 3 curve points to select a threshold")
    gains = np.array([p.appearance_gain for p in curve])
    pres = np.array([p.motion_preservation for p in curve])
    for name, col in (("appearance_gain", gains), ("motion_preservation", pres)):
        if np.ptp(col) == 0:
            raise ValueError(f"flat curve: {name} never varies, normalization degenerate")
    ng = (gains - gains.min()) / np.ptp(gains)
    npres = (pres - pres.min()) / np.ptp(pres)
    scores = np.minimum(ng, npres)
    best = scores.max()
    candidates = [i for i, s in enumerate(scores) if s == best]
    pick = max(candidates, key=lambda i: curve[i].tau_start)
    return ThresholdChoice(
        tau_star=curve[pick].tau_start,
        rule="max_min_normalized",
        normalized_gain=float(ng[pick]),
        normalized_preservation=float(npres[pick]),
    )


def heatmap_to_csv(grid: HeatmapGrid, which: str, path) -> None:
    """One mean grid as CSV: first column tau_start, one column per tau_end."""
    data = {"appearance": grid.appearance, "motion": grid.motion}[which]
    lines = ["tau_start," + ",".join(str(t) for t in grid.taus)]
    for i, ts in enumerate(grid.taus):
        cells = ["nan" if np.isnan(v) else repr(float(v)) for v in data[i]]
        lines.append(f"{ts}," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def summary_dict(
    grid: HeatmapGrid,
    curve: list[CurvePoint],
    choice: ThresholdChoice,
    extra: dict | None = None,
) -> dict:
    frontier = pareto_frontier(curve)
    out = {
        "tau_star": choice.tau_star,
        "rule": choice.rule,
        "normalized_gain": choice.normalized_gain,
        "normalized_preservation": choice.normalized_preservation,
        "spearman_gain_vs_tau_start": spearman(
            [p.tau_start for p in curve], [p.appearance_gain for p in curve]
        ),
        "spearman_preservation_vs_tau_start": spearman(
            [p.tau_start for p in curve], [p.motion_preservation for p in curve]
        ),
        "row_max_at_zero_fraction": row_max_at_zero_fraction(grid),
        "curve": [
            {
                "tau_start": p.tau_start,
                "appearance_gain": p.appearance_gain,
                "motion_preservation": p.motion_preservation,
                "appearance_se": p.appearance_se,
                "motion_se": p.motion_se,
            }
            for p in curve
        ],
        "frontier_tau_starts": [p.tau_start for p in frontier],
        "cells": [
            {
                "tau_start": ts,
                "tau_end": te,
                "appearance_gain": float(grid.appearance[i, j]),
                "motion_preservation": float(grid.motion[i, j]),
                "appearance_se": float(grid.appearance_se[i, j]),
                "motion_se": float(grid.motion_se[i, j]),
                "count": int(grid.counts[i, j]),
            }
            for i, ts in enumerate(grid.taus)
            for j, te in enumerate(grid.taus)
            if ts > te and not np.isnan(grid.appearance[i, j])
        ],
    }
    if extra:
        out.update(extra)
    return out


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def render_heatmap_png(grid: HeatmapGrid, which: str, path, title: str | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = {"appearance": grid.appearance, "motion": grid.motion}[which]
    fig, ax = plt.subplots(figsize=(6, 5))
    masked = np.ma.masked_invalid(data)
    im = ax.imshow(masked, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(grid.taus)), [str(t) for t in grid.taus], rotation=45)
    ax.set_yticks(range(len(grid.taus)), [str(t) for t in grid.taus])
    ax.set_xlabel("tau_end")
    ax.set_ylabel("tau_start")
    ax.set_title(title or f"{which} mean over corpus")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_tradeoff_png(curve: list[CurvePoint], path, tau_star: int | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [p.tau_start for p in curve]
    gains = [p.appearance_gain for p in curve]
    pres = [p.motion_preservation for p in curve]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.errorbar(ts, gains, yerr=[p.appearance_se for p in curve],
                 color="tab:red", marker="o", label="appearance gain")
    ax1.set_xlabel("tau_start (tau_end = 0)")
    ax1.set_ylabel("appearance gain", color="tab:red")
    ax2 = ax1.twinx()
    ax2.errorbar(ts, pres, yerr=[p.motion_se for p in curve],
                 color="tab:blue", marker="s", label="motion preservation")
    ax2.set_ylabel("motion preservation", color="tab:blue")
    if tau_star is not None:
        ax1.axvline(tau_star, color="gray", linestyle="--", linewidth=1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
