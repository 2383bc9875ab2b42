"""Keypoint similarity kernels, expected-similarity maps, and the dense loss.

Similarity between a candidate location and a target follows the Gaussian
form exp(-d^2 / (2 s^2 k^2)) with the object scale s (sqrt of object area,
pixels) and a per-keypoint-type constant k. Distances are always measured
in image pixels so results do not depend on grid resolution.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .geometry import ActivationWindow, Rect
from .instances import KEYPOINT_NAMES
from .probmap import ProbabilityMap

__all__ = [
    "OksParams",
    "LossConfig",
    "COCO_KAPPAS",
    "load_kappa_table",
    "oks_similarity",
    "oks_grid",
    "oks_kernel",
    "kernel_radius",
    "expected_oks_map",
    "dense_oks_loss",
    "dense_oks_loss_values",
    "dense_oks_loss_grad",
    "smoothness",
    "smoothness_grad",
]

# Standard COCO per-keypoint constants: twice the annotator sigmas, in the
# order of instances.KEYPOINT_NAMES (nose ... right_ankle).
_COCO_SIGMAS = np.array(
    [
        0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
        0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
    ]
)
COCO_KAPPAS = 2.0 * _COCO_SIGMAS
COCO_KAPPAS.setflags(write=False)

KAPPA_TABLE_ENV = "PMAPKIT_KAPPA_TABLE"


@dataclass(frozen=True)
class OksParams:
    """Scale parameters for one keypoint of one person."""

    object_scale: float
    kappa: float

    def __post_init__(self) -> None:
        if self.object_scale <= 0:
            raise ValueError(f"object scale must be positive, got {self.object_scale}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")

    @property
    def sigma_px(self) -> float:
        """Width of the similarity Gaussian in image pixels."""
        return self.object_scale * self.kappa


@dataclass(frozen=True)
class LossConfig:
    """Mixing weight between expected-risk and smoothness terms."""

    alpha: float = 0.04
    sobel_epsilon: float = 1e-12

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.sobel_epsilon <= 0:
            raise ValueError(f"sobel_epsilon must be positive, got {self.sobel_epsilon}")


def load_kappa_table(path: str | os.PathLike) -> np.ndarray:
    """Read per-keypoint constants from a key=value text file.

    Keys are the COCO keypoint names; '#' starts a comment. All 17 names
    must be present, e.g. ``left_wrist = 0.124``.
    """
    values: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'name = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in KEYPOINT_NAMES:
                raise ValueError(f"{path}:{lineno}: unknown keypoint name {key!r}")
            if key in values:
                raise ValueError(f"{path}:{lineno}: duplicate entry for {key!r}")
            try:
                values[key] = float(val)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key!r}") from exc
            if values[key] <= 0:
                raise ValueError(f"{path}:{lineno}: kappa for {key!r} must be positive")
    missing = [name for name in KEYPOINT_NAMES if name not in values]
    if missing:
        raise ValueError(f"{path}: missing keypoints: {', '.join(missing)}")
    return np.array([values[name] for name in KEYPOINT_NAMES])


def oks_similarity(d, params: OksParams):
    """Similarity of a prediction at pixel distance d from the target."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    sim = np.exp(-(d**2) / (2.0 * params.sigma_px**2))
    return float(sim) if sim.ndim == 0 else sim


def oks_grid(window: ActivationWindow, target: tuple[float, float], params: OksParams) -> np.ndarray:
    """Similarity of each grid-cell center to a target point (image coords)."""
    centers = window.cell_centers()
    d = np.hypot(centers[..., 0] - float(target[0]), centers[..., 1] - float(target[1]))
    return oks_similarity(d, params)


def kernel_radius(params: OksParams, window: ActivationWindow, tail: float = 1e-12) -> int:
    """Cell radius at which the similarity kernel decays below ``tail``.

    Capped at the grid span, beyond which extra kernel cells can never
    overlap the map.
    """
    cell = min(window.cell_width, window.cell_height)
    r_px = params.sigma_px * math.sqrt(2.0 * math.log(1.0 / tail))
    r = max(1, math.ceil(r_px / cell))
    return min(r, max(window.grid_w, window.grid_h) - 1)


def oks_kernel(params: OksParams, window: ActivationWindow, radius_cells: int) -> np.ndarray:
    """(2r+1) x (2r+1) grid of similarities at cell-center offsets.

    The radius must retain at least 99.9% of the kernel mass unless the
    grid span itself is the binding constraint.
    """
    if radius_cells < 1:
        raise ValueError(f"kernel radius must be >= 1, got {radius_cells}")
    cell = min(window.cell_width, window.cell_height)
    r_mass = params.sigma_px * math.sqrt(2.0 * math.log(1000.0))  # 99.9% mass radius
    required = min(math.ceil(r_mass / cell), max(window.grid_w, window.grid_h) - 1)
    if radius_cells < required:
        raise ValueError(
            f"kernel radius {radius_cells} truncates too much mass; need >= {required}"
        )
    offsets = np.arange(-radius_cells, radius_cells + 1)
    dx = offsets * window.cell_width
    dy = offsets * window.cell_height
    d = np.hypot(dx[np.newaxis, :], dy[:, np.newaxis])
    return oks_similarity(d, params)


def expected_oks_map(
    pmap: ProbabilityMap, params: OksParams, radius_cells: int | None = None
) -> np.ndarray:
    """Expected similarity earned by placing the point estimate at each cell.

    Convolves the map with the similarity kernel; mass outside the window is
    zero, so the boundary is zero-padded. Every output is in [0, 1].
    """
    if radius_cells is None:
        radius_cells = kernel_radius(params, pmap.window)
    kernel = oks_kernel(params, pmap.window, radius_cells)
    return convolve2d(pmap.values, kernel, mode="same", boundary="fill", fillvalue=0.0)


# 3x3 derivative stencils (correlation orientation; the sign cancels in the
# magnitude).
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _sobel_responses(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded = np.pad(values, 1, mode="edge")
    gx = correlate2d(padded, _SOBEL_X, mode="valid")
    gy = correlate2d(padded, _SOBEL_Y, mode="valid")
    return gx, gy


def _edge_pad_adjoint(full: np.ndarray) -> np.ndarray:
    """Fold gradients of an edge-padded array back onto its source cells."""
    full = full.copy()
    full[1, :] += full[0, :]
    full[-2, :] += full[-1, :]
    full[:, 1] += full[:, 0]
    full[:, -2] += full[:, -1]
    return full[1:-1, 1:-1]


def smoothness(values: np.ndarray, epsilon: float) -> float:
    """Total smoothed gradient magnitude of the grid, sqrt(Gx^2 + Gy^2 + eps) summed."""
    gx, gy = _sobel_responses(values)
    return float(np.sqrt(gx**2 + gy**2 + epsilon).sum())


def smoothness_grad(values: np.ndarray, epsilon: float) -> np.ndarray:
    """Exact gradient of :func:`smoothness` with respect to the grid values."""
    gx, gy = _sobel_responses(values)
    g = np.sqrt(gx**2 + gy**2 + epsilon)
    upstream = convolve2d(gx / g, _SOBEL_X, mode="full") + convolve2d(
        gy / g, _SOBEL_Y, mode="full"
    )
    return _edge_pad_adjoint(upstream)


def dense_oks_loss_values(
    values: np.ndarray,
    window: ActivationWindow,
    gt: tuple[float, float],
    params: OksParams,
    cfg: LossConfig,
) -> float:
    """Dense loss on raw grid values, without requiring unit mass.

    (1 - alpha) * sum_i (1 - sim_i) * p_i  +  alpha * smoothness(p). The
    first term is the expected penalty of sampling the location from p; the
    second discourages jagged maps without assuming any shape.
    """
    if not window.contains(gt):
        raise ValueError(f"target {gt} outside the activation window {window.rect}")
    values = np.asarray(values, dtype=float)
    miss = 1.0 - oks_grid(window, gt, params)
    risk = float((miss * values).sum())
    if cfg.alpha == 0.0:
        return risk
    return (1.0 - cfg.alpha) * risk + cfg.alpha * smoothness(values, cfg.sobel_epsilon)


def dense_oks_loss(
    pmap: ProbabilityMap, gt: tuple[float, float], params: OksParams, cfg: LossConfig
) -> float:
    """Dense loss of a probability map against a target inside its window."""
    return dense_oks_loss_values(pmap.values, pmap.window, gt, params, cfg)


def dense_oks_loss_grad_values(
    values: np.ndarray,
    window: ActivationWindow,
    gt: tuple[float, float],
    params: OksParams,
    cfg: LossConfig,
) -> np.ndarray:
    """Analytic gradient of :func:`dense_oks_loss_values` w.r.t. the grid."""
    if not window.contains(gt):
        raise ValueError(f"target {gt} outside the activation window {window.rect}")
    values = np.asarray(values, dtype=float)
    grad = (1.0 - cfg.alpha) * (1.0 - oks_grid(window, gt, params))
    if cfg.alpha > 0.0:
        grad = grad + cfg.alpha * smoothness_grad(values, cfg.sobel_epsilon)
    return grad


def dense_oks_loss_grad(
    pmap: ProbabilityMap, gt: tuple[float, float], params: OksParams, cfg: LossConfig
) -> np.ndarray:
    return dense_oks_loss_grad_values(pmap.values, pmap.window, gt, params, cfg)


def default_window(grid_w: int = 48, grid_h: int = 64, cell_px: float = 4.0) -> ActivationWindow:
    """Convenience window at the origin with square cells of ``cell_px`` pixels."""
    return ActivationWindow(Rect(0.0, 0.0, grid_w * cell_px, grid_h * cell_px), grid_w, grid_h)
