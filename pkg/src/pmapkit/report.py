"""Delimited report files and the figures rendered alongside them.

Every CSV written here has a sibling PNG with the same stem so reports can
be both diffed and eyeballed. Figures use the Agg backend and never require
a display.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .calibration import CoverageHistogram, ReliabilityCurve, TemperatureFit
from .metrics import ApCurve, SweepResult
from .probmap import ProbabilityMap

__all__ = [
    "write_csv",
    "write_pr_curves",
    "write_sweep",
    "write_coverage",
    "write_reliability",
    "write_temperature_objective",
    "write_loss_trace",
    "write_map_figure",
]

_FIG_DPI = 110


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=_FIG_DPI, bbox_inches="tight")
    plt.close(fig)


def write_pr_curves(curve: ApCurve, csv_path: Path, figures: bool = True) -> None:
    rows = []
    for ti, t in enumerate(curve.thresholds):
        for r, p in zip(curve.recall_grid, curve.precisions[ti]):
            rows.append((float(t), float(r), float(p)))
    write_csv(csv_path, ["threshold", "recall", "precision"], rows)
    if not figures:
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    for ti, t in enumerate(curve.thresholds):
        ax.plot(curve.recall_grid, curve.precisions[ti], label=f"sim >= {t:.2f}", lw=1.2)
    ax.set_xlabel("recall")
    ax.set_ylabel("interpolated precision")
    ap = curve.ap
    ax.set_title(f"mAP {ap:.3f}" if not math.isnan(ap) else "mAP undefined")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, ncol=2)
    _save(fig, csv_path.with_suffix(".png"))


def write_sweep(result: SweepResult, csv_path: Path, figures: bool = True) -> None:
    write_csv(
        csv_path,
        ["threshold", "accuracy"],
        zip(result.thresholds, result.accuracies),
    )
    if not figures:
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(result.thresholds, result.accuracies, lw=1.5)
    ax.axvline(result.optimal_threshold, color="tab:red", ls="--", lw=1.0)
    ax.set_xlabel("presence threshold")
    ax.set_ylabel("accuracy")
    ax.set_title(
        f"best {result.optimal_accuracy:.3f} at {result.optimal_threshold:.2f}"
        + (" (degenerate)" if result.degenerate else "")
    )
    _save(fig, csv_path.with_suffix(".png"))


def write_coverage(
    hist: CoverageHistogram,
    csv_path: Path,
    figures: bool = True,
    reference: CoverageHistogram | None = None,
) -> None:
    edges = np.linspace(0.0, 1.0, len(hist.counts) + 1)
    write_csv(
        csv_path,
        ["bin_low", "bin_high", "count", "fraction"],
        (
            (edges[i], edges[i + 1], int(hist.counts[i]), float(hist.fractions[i]))
            for i in range(len(hist.counts))
        ),
    )
    if not figures:
        return
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(5, 4))
    if reference is not None:
        ax.bar(centers, reference.fractions, width=width * 0.9, alpha=0.4, label="before")
        ax.bar(centers, hist.fractions, width=width * 0.6, label="after")
        ax.legend()
    else:
        ax.bar(centers, hist.fractions, width=width * 0.9)
    ax.axhline(1.0 / len(hist.counts), color="k", ls=":", lw=1.0)
    ax.set_xlabel("coverage")
    ax.set_ylabel("fraction of keypoints")
    _save(fig, csv_path.with_suffix(".png"))


def write_reliability(curve: ReliabilityCurve, csv_path: Path, figures: bool = True) -> None:
    write_csv(
        csv_path,
        ["bin_center", "mean_score", "empirical", "count"],
        (
            (float(c), float(m), float(e), int(n))
            for c, m, e, n in zip(
                curve.bin_centers, curve.mean_score, curve.empirical, curve.counts
            )
        ),
    )
    if not figures:
        return
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ok = ~np.isnan(curve.mean_score)
    ax.plot([0, 1], [0, 1], "k:", lw=1.0)
    ax.plot(curve.mean_score[ok], curve.empirical[ok], "o-", lw=1.2)
    ax.set_xlabel("mean predicted presence")
    ax.set_ylabel("empirical frequency")
    ax.set_title(f"ECE {curve.ece:.4f}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    _save(fig, csv_path.with_suffix(".png"))


def write_temperature_objective(fit: TemperatureFit, csv_path: Path, figures: bool = True) -> None:
    write_csv(csv_path, ["temperature", "objective"], zip(fit.grid, fit.objective))
    if not figures:
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogx(fit.grid, fit.objective, lw=1.5)
    ax.axvline(fit.temperature, color="tab:red", ls="--", lw=1.0)
    ax.set_xlabel("temperature")
    ax.set_ylabel("coverage flatness error")
    ax.set_title(f"T* = {fit.temperature:.4f}")
    _save(fig, csv_path.with_suffix(".png"))


def write_loss_trace(
    trace: Sequence[float], steps: Sequence[float], csv_path: Path, figures: bool = True
) -> None:
    rows = [(0, float(trace[0]), "")] + [
        (i + 1, float(loss), f"{step:.6g}")
        for i, (loss, step) in enumerate(zip(trace[1:], steps))
    ]
    write_csv(csv_path, ["iteration", "loss", "step"], rows)
    if not figures:
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(range(len(trace)), trace, lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    _save(fig, csv_path.with_suffix(".png"))


def write_map_figure(pmap: ProbabilityMap, path: Path, target: tuple[float, float] | None = None) -> None:
    rect = pmap.window.rect
    fig, ax = plt.subplots(figsize=(4.5, 5))
    im = ax.imshow(
        pmap.values,
        origin="upper",
        extent=(rect.x0, rect.x1, rect.y1, rect.y0),
        cmap="viridis",
    )
    if target is not None:
        ax.plot([target[0]], [target[1]], "rx", ms=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xlabel("x (px)")
    ax.set_ylabel("y (px)")
    _save(fig, path)
