"""Point-estimate extraction from probability maps.

Four decoders: plain argmax, blur-and-Taylor refinement (the classical
subpixel baseline), expected-similarity maximization with per-axis
quadratic interpolation, and the two-window fusion that lets a wide map
delegate to a precise inner map.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import gaussian_filter

from .oks import OksParams, expected_oks_map
from .probmap import ProbabilityMap

__all__ = [
    "DecodeMethod",
    "DecodedKeypoint",
    "argmax_decode",
    "udp_decode",
    "expected_oks_decode",
    "fuse_double",
]

_LOG_FLOOR = 1e-12


class DecodeMethod(Enum):
    ARGMAX = "argmax"
    UDP = "udp"
    EXPECTED_OKS = "expected_oks"
    DOUBLE_HEATMAP = "double_heatmap"


@dataclass(frozen=True)
class DecodedKeypoint:
    """A point estimate in image pixels with its peak score.

    ``fallback`` marks refinements that degraded to the raw argmax (singular
    curvature or a peak on the grid border).
    """

    x: float
    y: float
    score: float
    method: DecodeMethod
    fallback: bool = False

    @property
    def location(self) -> tuple[float, float]:
        return self.x, self.y


def argmax_decode(pmap: ProbabilityMap) -> DecodedKeypoint:
    """Center of the maximal cell; ties break to the lowest row-major index."""
    row, col = pmap.argmax_cell()
    x, y = pmap.window.cell_center(row, col)
    return DecodedKeypoint(x, y, float(pmap.values[row, col]), DecodeMethod.ARGMAX)


def udp_decode(pmap: ProbabilityMap, blur_sigma: float = 2.0) -> DecodedKeypoint:
    """Blur, take the log, and apply one second-order Taylor step at the peak.

    The offset -H^-1 grad is clamped to half a cell per axis. A border peak
    or singular Hessian falls back to the unrefined cell center.
    """
    if blur_sigma <= 0:
        raise ValueError(f"blur_sigma must be positive, got {blur_sigma}")
    blurred = gaussian_filter(pmap.values, sigma=blur_sigma, mode="constant", cval=0.0)
    log_map = np.log(np.maximum(blurred, _LOG_FLOOR))
    flat = int(np.argmax(blurred))
    row, col = divmod(flat, pmap.grid_w)
    score = float(pmap.values[row, col])

    h, w = log_map.shape
    offset = None
    if 0 < row < h - 1 and 0 < col < w - 1:
        offset = _taylor_offset(log_map, row, col)
    if offset is None:
        x, y = pmap.window.cell_center(row, col)
        return DecodedKeypoint(x, y, score, DecodeMethod.UDP, fallback=True)

    x, y = pmap.window.grid_to_image((col + 0.5 + offset[0], row + 0.5 + offset[1]))
    return DecodedKeypoint(x, y, score, DecodeMethod.UDP)


def _taylor_offset(log_map: np.ndarray, row: int, col: int) -> np.ndarray | None:
    """One Newton step on the local quadratic model, or None when singular."""
    dx = 0.5 * (log_map[row, col + 1] - log_map[row, col - 1])
    dy = 0.5 * (log_map[row + 1, col] - log_map[row - 1, col])
    dxx = log_map[row, col + 1] - 2.0 * log_map[row, col] + log_map[row, col - 1]
    dyy = log_map[row + 1, col] - 2.0 * log_map[row, col] + log_map[row - 1, col]
    dxy = 0.25 * (
        log_map[row + 1, col + 1]
        - log_map[row + 1, col - 1]
        - log_map[row - 1, col + 1]
        + log_map[row - 1, col - 1]
    )
    det = dxx * dyy - dxy * dxy
    if abs(det) < 1e-12:
        return None
    hessian = np.array([[dxx, dxy], [dxy, dyy]])
    offset = -np.linalg.solve(hessian, np.array([dx, dy]))
    return np.clip(offset, -0.5, 0.5)


def _parabolic_offset(f_minus: float, f_zero: float, f_plus: float) -> float:
    denom = f_minus - 2.0 * f_zero + f_plus
    if denom == 0.0:
        return 0.0
    return float(np.clip(0.5 * (f_minus - f_plus) / denom, -0.5, 0.5))


def expected_oks_decode(
    pmap: ProbabilityMap, params: OksParams, radius_cells: int | None = None
) -> DecodedKeypoint:
    """Maximize expected similarity, then refine each axis with a parabola.

    Unlike peak-chasing decoders this weighs the whole distribution, so it
    prefers regions holding more mass over isolated sharp spikes. The score
    is the peak of the expected-similarity surface.
    """
    surface = expected_oks_map(pmap, params, radius_cells)
    flat = int(np.argmax(surface))
    row, col = divmod(flat, pmap.grid_w)
    score = float(surface[row, col])

    off_x = 0.0
    off_y = 0.0
    clipped = False
    if 0 < col < pmap.grid_w - 1:
        off_x = _parabolic_offset(surface[row, col - 1], surface[row, col], surface[row, col + 1])
    else:
        clipped = True
    if 0 < row < pmap.grid_h - 1:
        off_y = _parabolic_offset(surface[row - 1, col], surface[row, col], surface[row + 1, col])
    else:
        clipped = True

    x, y = pmap.window.grid_to_image((col + 0.5 + off_x, row + 0.5 + off_y))
    return DecodedKeypoint(x, y, score, DecodeMethod.EXPECTED_OKS, fallback=clipped)


def fuse_double(
    large_map: ProbabilityMap, expert_map: ProbabilityMap, params: OksParams
) -> tuple[DecodedKeypoint, bool]:
    """Two-window decode: the wide map decides, the inner expert map refines.

    Decodes the wide map; when that estimate falls inside the expert map's
    window the expert decode is returned instead. The boolean reports the
    wide map's in-inner-window decision.
    """
    if not large_map.window.rect.contains_rect(expert_map.window.rect):
        raise ValueError("expert window must be contained in the wide window")
    coarse = expected_oks_decode(large_map, params)
    inside = expert_map.window.contains(coarse.location)
    if inside:
        return expected_oks_decode(expert_map, params), True
    return coarse, False
