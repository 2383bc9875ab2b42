"""Pose instances: 17-keypoint people with boxes, scales, and presence flags."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Rect

__all__ = ["KEYPOINT_NAMES", "NUM_KEYPOINTS", "PoseInstance", "object_scale_from_bbox"]

KEYPOINT_NAMES = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
]

NUM_KEYPOINTS = len(KEYPOINT_NAMES)

# Conventional box-to-object-area ratio used when a segmentation area is
# not available.
BBOX_AREA_FACTOR = 0.53


def object_scale_from_bbox(bbox: Rect) -> float:
    return math.sqrt(BBOX_AREA_FACTOR * bbox.width * bbox.height)


@dataclass
class PoseInstance:
    """One person: keypoints (17, 3) as [x, y, v] rows, box, and metadata.

    Visibility follows the COCO convention: v=0 not labeled, v=1 labeled but
    occluded, v=2 visible. ``presence`` is an optional parallel array; in
    ground truth it holds 0/1 in-window flags, in predictions it holds
    presence probabilities.
    """

    image_id: int
    keypoints: np.ndarray
    bbox: Rect
    area: float | None = None
    score: float = 1.0
    presence: np.ndarray | None = None
    ann_id: int | None = None

    def __post_init__(self) -> None:
        self.keypoints = np.asarray(self.keypoints, dtype=float)
        if self.keypoints.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"keypoints must be (17, 3), got {self.keypoints.shape}")
        if self.presence is not None:
            self.presence = np.asarray(self.presence, dtype=float)
            if self.presence.shape != (NUM_KEYPOINTS,):
                raise ValueError(f"presence must be (17,), got {self.presence.shape}")

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def visibility(self) -> np.ndarray:
        return self.keypoints[:, 2]

    def labeled_mask(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    def num_labeled(self) -> int:
        return int(self.labeled_mask().sum())

    def object_scale(self) -> float:
        """sqrt of the object area, falling back to the bbox convention."""
        if self.area is not None and self.area > 0:
            return math.sqrt(self.area)
        return object_scale_from_bbox(self.bbox)
