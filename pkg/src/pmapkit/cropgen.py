"""Crop-based dataset generation at annotation-geometry level.

Cropping pushes keypoints out of the image and out of the activation
window, populating the areas that ordinary datasets never exercise. Pixels
are never touched: the output is a transformed ground-truth document plus a
manifest of crop rectangles for external image tools.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    ActivationWindow,
    ImageExtent,
    KeypointArea,
    Rect,
    WindowConfig,
    classify_keypoint,
)
from .instances import NUM_KEYPOINTS, PoseInstance, object_scale_from_bbox, BBOX_AREA_FACTOR

__all__ = ["CropSpec", "ExtendedInstance", "CropReport", "sample_crop", "transform_instance", "build_cropset"]

MIN_CROP_SIDE = 8.0
_MAX_RESAMPLES = 100

PRESENT_AREAS = frozenset({KeypointArea.A, KeypointArea.B, KeypointArea.C})


@dataclass(frozen=True)
class CropSpec:
    """An axis-aligned, integer-pixel sub-rectangle of a source image."""

    rect: Rect
    image_id: int
    seed: int


@dataclass
class ExtendedInstance:
    """A transformed instance with per-keypoint presence flags and area labels."""

    instance: PoseInstance
    window: ActivationWindow
    presence: np.ndarray  # (17,) ints, 1 iff labeled and inside the window
    areas: list[KeypointArea | None]  # None for unlabeled keypoints


@dataclass
class CropReport:
    """What a generation run produced: crops, drops, and the area census."""

    crops: list[CropSpec]
    dropped_annotations: list[int]
    domain_vector: np.ndarray


def sample_crop(
    image: ImageExtent,
    strength: tuple[float, float],
    rng: np.random.Generator,
    *,
    image_id: int = 0,
    seed: int = 0,
) -> CropSpec:
    """Draw a crop keeping a per-axis fraction of the image.

    Each retained side fraction is drawn uniformly from ``strength``
    independently per axis, rounded to whole pixels, and the removed band is
    taken entirely from one uniformly chosen side per axis. Crops smaller
    than 8x8 px are resampled a bounded number of times.
    """
    lo, hi = float(strength[0]), float(strength[1])
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"strength must satisfy 0 < min <= max <= 1, got {strength}")
    for _ in range(_MAX_RESAMPLES):
        fx = rng.uniform(lo, hi)
        fy = rng.uniform(lo, hi)
        w = min(int(round(fx * image.width)), image.width)
        h = min(int(round(fy * image.height)), image.height)
        cut_left = rng.integers(0, 2) == 1
        cut_top = rng.integers(0, 2) == 1
        if w < MIN_CROP_SIDE or h < MIN_CROP_SIDE:
            continue
        x0 = image.width - w if cut_left else 0
        y0 = image.height - h if cut_top else 0
        return CropSpec(
            Rect(float(x0), float(y0), float(x0 + w), float(y0 + h)), image_id, seed
        )
    raise ValueError(
        f"could not sample a crop >= 8x8 px from {image.width}x{image.height} "
        f"with strength {strength}"
    )


def transform_instance(
    inst: PoseInstance,
    crop: CropSpec,
    window_cfg: WindowConfig | None = None,
) -> ExtendedInstance | None:
    """Rewrite one instance into crop coordinates, or None when it is dropped.

    Keypoints shift by the crop origin and may land outside the cropped
    image. The bounding box is the original box clipped to the crop (the
    tightest rect still known to enclose the remaining visible parts), the
    activation window is rebuilt from it, and every labeled keypoint is
    reclassified into areas A..E with presence set for A/B/C. Instances with
    no labeled keypoint inside the crop, or whose box leaves the crop
    entirely, are dropped.
    """
    if window_cfg is None:
        window_cfg = WindowConfig()
    x0, y0 = crop.rect.x0, crop.rect.y0
    new_extent = ImageExtent(int(round(crop.rect.width)), int(round(crop.rect.height)))

    keypoints = inst.keypoints.copy()
    labeled = inst.labeled_mask()
    keypoints[labeled, 0] -= x0
    keypoints[labeled, 1] -= y0

    in_crop = labeled & np.array(
        [crop.rect.contains(p) for p in inst.keypoints[:, :2]], dtype=bool
    )
    if not in_crop.any():
        return None
    clipped = inst.bbox.intersect(crop.rect)
    if clipped is None:
        return None
    new_bbox = clipped.translate(-x0, -y0)

    identity = (
        new_bbox.x0 == inst.bbox.x0
        and new_bbox.y0 == inst.bbox.y0
        and new_bbox.x1 == inst.bbox.x1
        and new_bbox.y1 == inst.bbox.y1
    )
    # the recorded object area only survives an identity clip; otherwise fall
    # back to the bbox convention so OKS scales track the new box
    if identity and inst.area is not None:
        new_area = inst.area
    else:
        new_area = BBOX_AREA_FACTOR * new_bbox.width * new_bbox.height

    window = window_cfg.window_for(new_bbox, new_extent)
    presence = np.zeros(NUM_KEYPOINTS, dtype=int)
    areas: list[KeypointArea | None] = [None] * NUM_KEYPOINTS
    for k in range(NUM_KEYPOINTS):
        if not labeled[k]:
            continue
        area = classify_keypoint(keypoints[k, :2], new_bbox, window, new_extent)
        areas[k] = area
        presence[k] = 1 if area in PRESENT_AREAS else 0

    new_inst = PoseInstance(
        image_id=inst.image_id,
        keypoints=keypoints,
        bbox=new_bbox,
        area=new_area,
        score=inst.score,
        presence=presence.astype(float),
        ann_id=inst.ann_id,
    )
    return ExtendedInstance(new_inst, window, presence, areas)


def build_cropset(
    images: dict[int, ImageExtent],
    instances: list[PoseInstance],
    strength: tuple[float, float],
    seed: int,
    window_cfg: WindowConfig | None = None,
) -> tuple[list[ExtendedInstance], CropReport]:
    """Crop every image once and transform all of its instances.

    Per-image random streams derive from (seed, image_id), so results do not
    depend on iteration order or parallel scheduling, and rerunning with the
    same seed reproduces the output exactly.
    """
    if window_cfg is None:
        window_cfg = WindowConfig()
    crops: dict[int, CropSpec] = {}
    for image_id in sorted(images):
        rng = np.random.default_rng(np.random.SeedSequence([seed, image_id]))
        crops[image_id] = sample_crop(
            images[image_id], strength, rng, image_id=image_id, seed=seed
        )

    out: list[ExtendedInstance] = []
    dropped: list[int] = []
    census: list[tuple[np.ndarray, Rect, ActivationWindow, ImageExtent]] = []
    for inst in instances:
        if inst.image_id not in crops:
            raise ValueError(f"annotation {inst.ann_id} references unknown image {inst.image_id}")
        ext = transform_instance(inst, crops[inst.image_id], window_cfg)
        if ext is None:
            dropped.append(inst.ann_id if inst.ann_id is not None else -1)
            continue
        out.append(ext)
        crop = crops[inst.image_id]
        extent = ImageExtent(int(round(crop.rect.width)), int(round(crop.rect.height)))
        labeled_xy = ext.instance.xy[ext.instance.labeled_mask()]
        census.append((labeled_xy, ext.instance.bbox, ext.window, extent))

    if census:
        from .geometry import domain_vector

        vector = domain_vector(census)
    else:
        vector = np.zeros(5)
    report = CropReport(
        crops=[crops[i] for i in sorted(crops)],
        dropped_annotations=dropped,
        domain_vector=vector,
    )
    return out, report
