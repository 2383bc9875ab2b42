"""Shared builders for windows, maps, and synthetic pose datasets."""

from __future__ import annotations

import numpy as np
import pytest

from pmapkit.geometry import ActivationWindow, Rect
from pmapkit.instances import NUM_KEYPOINTS, PoseInstance
from pmapkit.probmap import ProbabilityMap


def square_window(grid_w=16, grid_h=16, cell=4.0, origin=(0.0, 0.0)) -> ActivationWindow:
    x0, y0 = origin
    return ActivationWindow(
        Rect(x0, y0, x0 + grid_w * cell, y0 + grid_h * cell), grid_w, grid_h
    )


def gaussian_values(grid_w, grid_h, center_xy_grid, sigma_cells) -> np.ndarray:
    """Continuous Gaussian sampled at cell centers (grid units), normalized."""
    xs = np.arange(grid_w) + 0.5
    ys = np.arange(grid_h) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    d2 = (gx - center_xy_grid[0]) ** 2 + (gy - center_xy_grid[1]) ** 2
    v = np.exp(-d2 / (2.0 * sigma_cells**2))
    return v / v.sum()


def gaussian_map(window, center_xy_grid, sigma_cells, keypoint_type=0) -> ProbabilityMap:
    return ProbabilityMap(
        window,
        gaussian_values(window.grid_w, window.grid_h, center_xy_grid, sigma_cells),
        keypoint_type,
    )


def smooth_random_map(window, rng, keypoint_type=0) -> ProbabilityMap:
    """Strictly positive random map with well-separated cell values."""
    logits = rng.normal(size=(window.grid_h, window.grid_w))
    from scipy.ndimage import gaussian_filter

    logits = gaussian_filter(logits, sigma=1.5, mode="nearest")
    v = np.exp(2.0 * (logits - logits.max()))
    return ProbabilityMap(window, v / v.sum(), keypoint_type)


def one_hot_map(window, row, col, keypoint_type=0) -> ProbabilityMap:
    v = np.zeros((window.grid_h, window.grid_w))
    v[row, col] = 1.0
    return ProbabilityMap(window, v, keypoint_type)


def make_instance(
    image_id=0,
    points=None,
    visibility=None,
    bbox=None,
    area=None,
    score=1.0,
    presence=None,
    ann_id=None,
) -> PoseInstance:
    """Instance with the given labeled points, rest unlabeled at the origin."""
    keypoints = np.zeros((NUM_KEYPOINTS, 3))
    if points is not None:
        points = np.asarray(points, dtype=float)
        n = len(points)
        keypoints[:n, :2] = points
        keypoints[:n, 2] = 2.0 if visibility is None else np.asarray(visibility, dtype=float)
    if bbox is None:
        labeled = keypoints[:, 2] > 0
        if labeled.any():
            xy = keypoints[labeled, :2]
            x0, y0 = xy.min(axis=0) - 5.0
            x1, y1 = xy.max(axis=0) + 5.0
            bbox = Rect(x0, y0, x1, y1)
        else:
            bbox = Rect(0.0, 0.0, 10.0, 10.0)
    return PoseInstance(
        image_id=image_id,
        keypoints=keypoints,
        bbox=bbox,
        area=area,
        score=score,
        presence=presence,
        ann_id=ann_id,
    )


# --- acceptance summary -----------------------------------------------------
# test_acceptance test names carry a criterion tag; outcomes are echoed as
# one line per criterion at the end of the run.

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _ACCEPTANCE_RESULTS[name] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and report.skipped:
        _ACCEPTANCE_RESULTS[name] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{name}: {_ACCEPTANCE_RESULTS[name]}")
