"""Rectangles, activation windows, and the in/out keypoint taxonomy.

Everything works in continuous image pixels with half-open rectangles
([x0, x1) x [y0, y1)) so the five-way partition of the plane into areas
A..E is unambiguous on edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Rect",
    "ImageExtent",
    "ActivationWindow",
    "KeypointArea",
    "WindowConfig",
    "window_from_bbox",
    "classify_keypoint",
    "domain_vector",
    "boundary_distance",
    "DEFAULT_PADDING",
    "DEFAULT_GRID",
]

DEFAULT_PADDING = 1.25
DEFAULT_GRID = (48, 64)  # (grid_w, grid_h), 3:4 aspect

Point = Sequence[float]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle covering [x0, x1) x [y0, y1), continuous pixels."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(
                f"degenerate rect ({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)

    def contains(self, p: Point) -> bool:
        x, y = float(p[0]), float(p[1])
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def contains_rect(self, other: "Rect") -> bool:
        return (
            self.x0 <= other.x0
            and other.x1 <= self.x1
            and self.y0 <= other.y0
            and other.y1 <= self.y1
        )

    def intersect(self, other: "Rect") -> "Rect | None":
        x0 = max(self.x0, other.x0)
        y0 = max(self.y0, other.y0)
        x1 = min(self.x1, other.x1)
        y1 = min(self.y1, other.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return Rect(x0, y0, x1, y1)

    def translate(self, dx: float, dy: float) -> "Rect":
        return Rect(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    @staticmethod
    def from_xywh(x: float, y: float, w: float, h: float) -> "Rect":
        return Rect(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return self.x0, self.y0, self.width, self.height


@dataclass(frozen=True)
class ImageExtent:
    """Integer pixel size of an image; its pixel domain is [0, w) x [0, h)."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image extent must be positive, got {self.width}x{self.height}")

    def as_rect(self) -> Rect:
        return Rect(0.0, 0.0, float(self.width), float(self.height))

    def contains(self, p: Point) -> bool:
        x, y = float(p[0]), float(p[1])
        return 0.0 <= x < self.width and 0.0 <= y < self.height


class KeypointArea(Enum):
    """Where a keypoint sits relative to bbox, activation window, and image.

    A: inside the bbox.
    B: inside window and image, outside the bbox.
    C: inside the window but outside the image.
    D: inside the image but outside the window.
    E: outside both window and image.
    """

    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"


@dataclass(frozen=True)
class ActivationWindow:
    """Rectangular localization domain plus the grid resolution mapped onto it.

    The rect aspect ratio must match grid_w:grid_h, which makes grid cells
    square in image pixels. Grid cell (row i, col j) covers
    [j, j+1) x [i, i+1) in grid units with center (j+0.5, i+0.5).
    """

    rect: Rect
    grid_w: int
    grid_h: int

    def __post_init__(self) -> None:
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError(f"grid must be positive, got {self.grid_w}x{self.grid_h}")
        target = self.grid_w / self.grid_h
        actual = self.rect.width / self.rect.height
        if abs(actual - target) > 1e-9 * target:
            raise ValueError(
                f"window aspect {actual} does not match grid aspect {target}"
            )

    @property
    def cell_width(self) -> float:
        return self.rect.width / self.grid_w

    @property
    def cell_height(self) -> float:
        return self.rect.height / self.grid_h

    def image_to_grid(self, p: Point) -> tuple[float, float]:
        """Map an image point to continuous grid units (x, y)."""
        gx = (float(p[0]) - self.rect.x0) / self.cell_width
        gy = (float(p[1]) - self.rect.y0) / self.cell_height
        return gx, gy

    def grid_to_image(self, p: Point) -> tuple[float, float]:
        """Exact inverse of :meth:`image_to_grid`."""
        x = self.rect.x0 + float(p[0]) * self.cell_width
        y = self.rect.y0 + float(p[1]) * self.cell_height
        return x, y

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        """Image coordinates of the center of grid cell (row, col)."""
        return self.grid_to_image((col + 0.5, row + 0.5))

    def cell_centers(self) -> np.ndarray:
        """(grid_h, grid_w, 2) array of cell-center image coordinates."""
        xs = self.rect.x0 + (np.arange(self.grid_w) + 0.5) * self.cell_width
        ys = self.rect.y0 + (np.arange(self.grid_h) + 0.5) * self.cell_height
        cx, cy = np.meshgrid(xs, ys)
        return np.stack([cx, cy], axis=-1)

    def cell_index(self, p: Point) -> tuple[int, int]:
        """(row, col) of the grid cell containing an image point, clipped to the grid."""
        gx, gy = self.image_to_grid(p)
        col = min(max(int(math.floor(gx)), 0), self.grid_w - 1)
        row = min(max(int(math.floor(gy)), 0), self.grid_h - 1)
        return row, col

    def contains(self, p: Point) -> bool:
        return self.rect.contains(p)

    def translate(self, dx: float, dy: float) -> "ActivationWindow":
        return ActivationWindow(self.rect.translate(dx, dy), self.grid_w, self.grid_h)


@dataclass(frozen=True)
class WindowConfig:
    """How activation windows are derived from bounding boxes.

    aspect is width:height; None means use the grid's own ratio.
    """

    aspect: float | None = None
    padding: float = DEFAULT_PADDING
    grid_w: int = DEFAULT_GRID[0]
    grid_h: int = DEFAULT_GRID[1]

    def window_for(self, bbox: Rect, image: ImageExtent | None = None) -> ActivationWindow:
        return window_from_bbox(
            bbox,
            image,
            aspect=self.aspect,
            padding=self.padding,
            grid=(self.grid_w, self.grid_h),
        )


def window_from_bbox(
    bbox: Rect,
    image: ImageExtent | None = None,
    *,
    aspect: float | None = None,
    padding: float = DEFAULT_PADDING,
    grid: tuple[int, int] = DEFAULT_GRID,
) -> ActivationWindow:
    """Build the activation window for a bounding box.

    The bbox is scaled about its center by ``padding``, then grown on one
    axis to reach the target aspect ratio: whichever side already meets or
    exceeds the target is held fixed and the other side expands, keeping the
    center. The result is the minimal-area rect of the target aspect,
    centered on the bbox, that encloses the padded bbox. It may extend
    beyond the image.
    """
    if padding < 1.0:
        raise ValueError(f"padding must be >= 1, got {padding}")
    grid_w, grid_h = int(grid[0]), int(grid[1])
    if aspect is None:
        aspect = grid_w / grid_h
    if aspect <= 0:
        raise ValueError(f"aspect ratio must be positive, got {aspect}")

    cx, cy = bbox.center
    w = bbox.width * padding
    h = bbox.height * padding
    if w / h >= aspect:
        h = w / aspect
    else:
        w = h * aspect
    rect = Rect(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    return ActivationWindow(rect, grid_w, grid_h)


def classify_keypoint(
    kp: Point, bbox: Rect, window: ActivationWindow, image: ImageExtent
) -> KeypointArea:
    """Assign a point to exactly one of the areas A..E."""
    in_bbox = bbox.contains(kp)
    in_window = window.contains(kp)
    in_image = image.contains(kp)
    if in_bbox:
        return KeypointArea.A
    if in_window and in_image:
        return KeypointArea.B
    if in_window:
        return KeypointArea.C
    if in_image:
        return KeypointArea.D
    return KeypointArea.E


def domain_vector(
    entries: Iterable[tuple[np.ndarray, Rect, ActivationWindow, ImageExtent]],
) -> np.ndarray:
    """Percentages of keypoints falling in areas A..E over a dataset.

    Each entry is (points, bbox, window, image) where points is an (n, 2)
    array of labeled keypoint coordinates. Returns a length-5 vector that
    sums to 100.
    """
    counts = np.zeros(5, dtype=np.int64)
    order = [KeypointArea.A, KeypointArea.B, KeypointArea.C, KeypointArea.D, KeypointArea.E]
    index = {area: i for i, area in enumerate(order)}
    for points, bbox, window, image in entries:
        for p in np.asarray(points, dtype=float).reshape(-1, 2):
            counts[index[classify_keypoint(p, bbox, window, image)]] += 1
    total = counts.sum()
    if total == 0:
        raise ValueError("domain vector undefined: no labeled keypoints")
    return 100.0 * counts / total


def boundary_distance(window: ActivationWindow | Rect, p: Point) -> float:
    """Euclidean distance from a point to the window's rectangle boundary.

    Zero exactly on the boundary; positive both inside and outside.
    """
    rect = window.rect if isinstance(window, ActivationWindow) else window
    x, y = float(p[0]), float(p[1])
    dx = max(rect.x0 - x, x - rect.x1, 0.0)
    dy = max(rect.y0 - y, y - rect.y1, 0.0)
    if dx > 0.0 or dy > 0.0:
        return math.hypot(dx, dy)
    return min(x - rect.x0, rect.x1 - x, y - rect.y0, rect.y1 - y)
