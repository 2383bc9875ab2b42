"""Quantile-coverage calibration of maps and reliability of presence scores.

A map is calibrated when, over a dataset, its top q-mass region contains a
fraction q of the true keypoints for every q. Coverage values are binned in
5% steps; a single temperature is fitted so the bins flatten out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .probmap import ProbabilityMap, scale_values

__all__ = [
    "CoverageHistogram",
    "ReliabilityCurve",
    "TemperatureFit",
    "coverage_histogram",
    "fit_temperature",
    "default_temperature_grid",
    "presence_reliability",
]

N_COVERAGE_BINS = 20


@dataclass(frozen=True)
class CoverageHistogram:
    """Counts of coverage values over 20 bins of width 5%."""

    counts: np.ndarray
    fractions: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def flatness_error(self) -> float:
        """Sum of squared deviations of the bin fractions from the ideal 5%."""
        return float(((self.fractions - 1.0 / N_COVERAGE_BINS) ** 2).sum())


def _coverage_bin(coverage: np.ndarray) -> np.ndarray:
    # coverage lies in (0, 1]; bin b covers (b/20, (b+1)/20]
    idx = np.ceil(coverage * N_COVERAGE_BINS).astype(int) - 1
    return np.clip(idx, 0, N_COVERAGE_BINS - 1)


def _stack_values(maps: Sequence[ProbabilityMap], cells: Sequence[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    if len(maps) == 0:
        raise ValueError("need at least one map")
    if len(maps) != len(cells):
        raise ValueError("maps and cells must have equal length")
    flat_cells = np.empty(len(maps), dtype=np.int64)
    rows = []
    width = maps[0].values.size
    for i, (pmap, (r, c)) in enumerate(zip(maps, cells)):
        if pmap.values.size != width:
            raise ValueError("all maps must share one grid size")
        if not (0 <= r < pmap.grid_h and 0 <= c < pmap.grid_w):
            raise ValueError(f"cell {(r, c)} outside {pmap.grid_h}x{pmap.grid_w} grid")
        rows.append(pmap.values.ravel())
        flat_cells[i] = r * pmap.grid_w + c
    return np.vstack(rows), flat_cells


def _coverage_rows(values: np.ndarray, flat_cells: np.ndarray) -> np.ndarray:
    """Coverage of one cell per row: mass of all entries >= the cell's value."""
    targets = values[np.arange(len(values)), flat_cells]
    return (values * (values >= targets[:, np.newaxis])).sum(axis=1)


def _histogram_from_coverage(coverage: np.ndarray) -> CoverageHistogram:
    counts = np.bincount(_coverage_bin(coverage), minlength=N_COVERAGE_BINS)
    return CoverageHistogram(counts=counts, fractions=counts / counts.sum())


def coverage_histogram(
    maps: Sequence[ProbabilityMap], gt_cells: Sequence[tuple[int, int]]
) -> CoverageHistogram:
    """Histogram of per-keypoint coverage values in 5% bins.

    A calibrated source puts about 5% of the keypoints into every bin; an
    overconfident one piles mass into the low bins.
    """
    values, flat_cells = _stack_values(maps, gt_cells)
    return _histogram_from_coverage(_coverage_rows(values, flat_cells))


@dataclass(frozen=True)
class TemperatureFit:
    temperature: float
    grid: np.ndarray
    objective: np.ndarray  # flatness error of the histogram at each grid point


def default_temperature_grid(
    low: float = 0.25, high: float = 4.0, count: int = 61
) -> np.ndarray:
    return np.exp(np.linspace(np.log(low), np.log(high), count))


def fit_temperature(
    maps: Sequence[ProbabilityMap],
    gt_cells: Sequence[tuple[int, int]],
    t_grid: np.ndarray | None = None,
) -> TemperatureFit:
    """Pick the temperature whose rescaled maps give the flattest coverage.

    The objective is the squared deviation of the 20 bin fractions from 5%;
    ties resolve to the temperature nearest one.
    """
    if t_grid is None:
        t_grid = default_temperature_grid()
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0 or np.any(t_grid <= 0):
        raise ValueError("temperature grid must be nonempty and positive")

    values, flat_cells = _stack_values(maps, gt_cells)
    objective = np.empty(len(t_grid))
    for i, t in enumerate(t_grid):
        scaled = _scale_rows(values, t)
        hist = _histogram_from_coverage(_coverage_rows(scaled, flat_cells))
        objective[i] = hist.flatness_error()

    best = objective.min()
    candidates = np.flatnonzero(objective == best)
    pick = candidates[np.argmin(np.abs(np.log(t_grid[candidates])))]
    return TemperatureFit(float(t_grid[pick]), t_grid, objective)


def _scale_rows(values: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise power scaling of stacked map values (zeros stay zero)."""
    out = np.zeros_like(values)
    with np.errstate(divide="ignore"):
        logs = np.where(values > 0, np.log(values, where=values > 0), -np.inf)
    logs = logs / temperature
    logs -= logs.max(axis=1, keepdims=True)
    np.exp(logs, out=out, where=np.isfinite(logs))
    return out / out.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ReliabilityCurve:
    """Binned agreement between predicted presence scores and outcomes."""

    bin_centers: np.ndarray
    mean_score: np.ndarray  # NaN for empty bins
    empirical: np.ndarray  # NaN for empty bins
    counts: np.ndarray
    ece: float


def presence_reliability(
    flags: np.ndarray, scores: np.ndarray, n_bins: int = 10
) -> ReliabilityCurve:
    """Reliability diagram and expected calibration error of presence scores.

    ECE is the count-weighted mean absolute gap between each bin's mean
    score and its empirical frequency; empty bins are skipped.
    """
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    flags = np.asarray(flags, dtype=bool).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    if flags.shape != scores.shape:
        raise ValueError("flags and scores must have equal length")
    if scores.size == 0:
        raise ValueError("need at least one sample")
    if np.any((scores < 0) | (scores > 1)):
        raise ValueError("scores must lie in [0, 1]")

    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(scores, edges[1:-1]), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=scores, minlength=n_bins)
    hits = np.bincount(idx, weights=flags.astype(float), minlength=n_bins)

    mean_score = np.full(n_bins, np.nan)
    empirical = np.full(n_bins, np.nan)
    nonempty = counts > 0
    mean_score[nonempty] = sums[nonempty] / counts[nonempty]
    empirical[nonempty] = hits[nonempty] / counts[nonempty]

    ece = float(
        (counts[nonempty] / counts.sum())
        @ np.abs(mean_score[nonempty] - empirical[nonempty])
    )
    return ReliabilityCurve(
        bin_centers=0.5 * (edges[:-1] + edges[1:]),
        mean_score=mean_score,
        empirical=empirical,
        counts=counts,
        ece=ece,
    )
