"""File formats: keypoint ground truth, predictions, and packed map binaries.

All parsers are total over byte inputs: they produce a document or raise a
``FormatError`` carrying a machine-checkable code, never an unstructured
crash. Serialization is deterministic so identical documents give identical
bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import ImageExtent, Rect
from .instances import NUM_KEYPOINTS, PoseInstance
from .probmap import ProbabilityMap
from .geometry import ActivationWindow

__all__ = [
    "FormatError",
    "GtImage",
    "GtAnnotation",
    "GtDocument",
    "PredInstance",
    "PredictionDocument",
    "PmapFile",
    "parse_gt",
    "serialize_gt",
    "parse_predictions",
    "serialize_predictions",
    "read_pmap",
    "write_pmap",
]

PMAP_MAGIC = b"PMAP"
PMAP_VERSION = 1
PMAP_SUM_TOL = 1e-5

_GT_IMAGE_KEYS = {"id", "width", "height"}
_GT_ANN_KEYS = {"id", "image_id", "bbox", "area", "keypoints", "presence"}
_PRED_KEYS = {"image_id", "score", "keypoints", "presence", "pmap"}


class FormatError(Exception):
    """A malformed or schema-violating input, with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: str, message: str) -> FormatError:
    return FormatError(code, message)


def _decode_json(data: bytes | str):
    try:
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return json.loads(data)
    except (ValueError, UnicodeDecodeError, RecursionError) as exc:
        raise _fail("bad_json", f"not parseable as JSON: {exc}") from exc


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail("bad_schema", f"{where}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise _fail("bad_schema", f"{where}: expected a finite number, got {value!r}")
    return value


def _integer(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise _fail("bad_schema", f"{where}: expected an integer, got {value!r}")
    return value


def _number_list(value, length: int, where: str) -> list[float]:
    if not isinstance(value, list) or len(value) != length:
        raise _fail(
            "bad_schema",
            f"{where}: expected a list of {length} numbers, got "
            f"{type(value).__name__} of length {len(value) if isinstance(value, list) else 'n/a'}",
        )
    return [_number(v, where) for v in value]


@dataclass
class GtImage:
    id: int
    width: int
    height: int
    extra: dict = field(default_factory=dict)

    def extent(self) -> ImageExtent:
        return ImageExtent(self.width, self.height)


@dataclass
class GtAnnotation:
    id: int
    image_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h
    keypoints: np.ndarray  # (17, 3)
    area: float | None = None
    presence: np.ndarray | None = None  # (17,) of 0/1
    extra: dict = field(default_factory=dict)

    def bbox_rect(self) -> Rect:
        x, y, w, h = self.bbox
        return Rect.from_xywh(x, y, w, h)

    def to_instance(self) -> PoseInstance:
        return PoseInstance(
            image_id=self.image_id,
            keypoints=self.keypoints,
            bbox=self.bbox_rect(),
            area=self.area,
            presence=self.presence,
            ann_id=self.id,
        )


@dataclass
class GtDocument:
    images: list[GtImage]
    annotations: list[GtAnnotation]
    extra: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def extents(self) -> dict[int, ImageExtent]:
        return {img.id: img.extent() for img in self.images}

    def instances(self) -> list[PoseInstance]:
        return [ann.to_instance() for ann in self.annotations]


def parse_gt(data: bytes | str) -> GtDocument:
    """Parse and validate a keypoints ground-truth JSON document.

    Schema errors cite the offending annotation id. Unknown fields on
    images, annotations, and the document root survive a round-trip.
    """
    root = _decode_json(data)
    if not isinstance(root, dict):
        raise _fail("bad_schema", "document root must be an object")
    images_raw = root.get("images")
    anns_raw = root.get("annotations")
    if not isinstance(images_raw, list) or not isinstance(anns_raw, list):
        raise _fail("bad_schema", "document must contain 'images' and 'annotations' lists")

    images = []
    seen_images = set()
    for i, obj in enumerate(images_raw):
        if not isinstance(obj, dict):
            raise _fail("bad_schema", f"images[{i}] must be an object")
        img_id = _integer(obj.get("id"), f"images[{i}].id")
        width = _integer(obj.get("width"), f"image {img_id} width")
        height = _integer(obj.get("height"), f"image {img_id} height")
        if width < 1 or height < 1:
            raise _fail("bad_schema", f"image {img_id}: nonpositive size {width}x{height}")
        if img_id in seen_images:
            raise _fail("bad_schema", f"duplicate image id {img_id}")
        seen_images.add(img_id)
        extra = {k: v for k, v in obj.items() if k not in _GT_IMAGE_KEYS}
        images.append(GtImage(img_id, width, height, extra))

    annotations = []
    for i, obj in enumerate(anns_raw):
        if not isinstance(obj, dict):
            raise _fail("bad_schema", f"annotations[{i}] must be an object")
        ann_id = _integer(obj.get("id"), f"annotations[{i}].id")
        where = f"annotation {ann_id}"
        image_id = _integer(obj.get("image_id"), f"{where}: image_id")
        if image_id not in seen_images:
            raise _fail("bad_schema", f"{where}: unknown image_id {image_id}")
        bbox = _number_list(obj.get("bbox"), 4, f"{where}: bbox")
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise _fail("bad_schema", f"{where}: bbox sides must be positive, got {bbox}")
        kps = _number_list(obj.get("keypoints"), 3 * NUM_KEYPOINTS, f"{where}: keypoints")
        keypoints = np.array(kps, dtype=float).reshape(NUM_KEYPOINTS, 3)
        if not np.isin(keypoints[:, 2], (0.0, 1.0, 2.0)).all():
            raise _fail("bad_schema", f"{where}: visibility codes must be 0, 1, or 2")
        area = None
        if obj.get("area") is not None:
            area = _number(obj["area"], f"{where}: area")
            if area <= 0:
                raise _fail("bad_schema", f"{where}: area must be positive")
        presence = None
        if obj.get("presence") is not None:
            pres = _number_list(obj["presence"], NUM_KEYPOINTS, f"{where}: presence")
            if any(p not in (0.0, 1.0) for p in pres):
                raise _fail("bad_schema", f"{where}: presence flags must be 0 or 1")
            presence = np.array(pres)
        extra = {k: v for k, v in obj.items() if k not in _GT_ANN_KEYS}
        annotations.append(
            GtAnnotation(ann_id, image_id, tuple(bbox), keypoints, area, presence, extra)
        )

    extra = {k: v for k, v in root.items() if k not in ("images", "annotations")}
    return GtDocument(images, annotations, extra)


def serialize_gt(doc: GtDocument) -> bytes:
    images = []
    for img in doc.images:
        obj = {"id": img.id, "width": img.width, "height": img.height}
        obj.update(img.extra)
        images.append(obj)
    annotations = []
    for ann in doc.annotations:
        obj = {
            "id": ann.id,
            "image_id": ann.image_id,
            "bbox": [float(v) for v in ann.bbox],
            "keypoints": [float(v) for v in ann.keypoints.ravel()],
        }
        if ann.area is not None:
            obj["area"] = float(ann.area)
        if ann.presence is not None:
            obj["presence"] = [int(v) for v in ann.presence]
        obj.update(ann.extra)
        annotations.append(obj)
    root = {"images": images, "annotations": annotations}
    root.update(doc.extra)
    return _dump_json(root)


def _dump_json(root) -> bytes:
    return json.dumps(root, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class PredInstance:
    image_id: int
    score: float
    keypoints: np.ndarray  # (17, 3) of x, y, confidence
    presence: np.ndarray  # (17,) in [0, 1]
    pmap: str | None = None
    extra: dict = field(default_factory=dict)

    def to_instance(self) -> PoseInstance:
        xy = self.keypoints[:, :2]
        labeled = np.full((NUM_KEYPOINTS, 1), 2.0)
        bbox = _pred_bbox(xy)
        return PoseInstance(
            image_id=self.image_id,
            keypoints=np.hstack([xy, labeled]),
            bbox=bbox,
            score=self.score,
            presence=self.presence,
        )


def _pred_bbox(xy: np.ndarray) -> Rect:
    x0, y0 = xy.min(axis=0)
    x1, y1 = xy.max(axis=0)
    # predictions carry no box of their own; use a keypoint hull padded so it
    # is never degenerate
    return Rect(x0 - 1.0, y0 - 1.0, x1 + 1.0, y1 + 1.0)


@dataclass
class PredictionDocument:
    instances: list[PredInstance]
    warnings: list[str] = field(default_factory=list)


def parse_predictions(data: bytes | str) -> PredictionDocument:
    """Parse a predictions JSON list (one object per scored instance)."""
    root = _decode_json(data)
    if not isinstance(root, list):
        raise _fail("bad_schema", "predictions root must be a list")
    instances = []
    for i, obj in enumerate(root):
        where = f"prediction {i}"
        if not isinstance(obj, dict):
            raise _fail("bad_schema", f"{where} must be an object")
        image_id = _integer(obj.get("image_id"), f"{where}: image_id")
        score = _number(obj.get("score"), f"{where}: score")
        kps = _number_list(obj.get("keypoints"), 3 * NUM_KEYPOINTS, f"{where}: keypoints")
        keypoints = np.array(kps, dtype=float).reshape(NUM_KEYPOINTS, 3)
        if np.any((keypoints[:, 2] < 0) | (keypoints[:, 2] > 1)):
            raise _fail("bad_schema", f"{where}: confidences must lie in [0, 1]")
        pres = _number_list(obj.get("presence"), NUM_KEYPOINTS, f"{where}: presence")
        presence = np.array(pres)
        if np.any((presence < 0) | (presence > 1)):
            raise _fail("bad_schema", f"{where}: presence must lie in [0, 1]")
        pmap = obj.get("pmap")
        if pmap is not None and not isinstance(pmap, str):
            raise _fail("bad_schema", f"{where}: pmap must be a path string")
        extra = {k: v for k, v in obj.items() if k not in _PRED_KEYS}
        instances.append(PredInstance(image_id, score, keypoints, presence, pmap, extra))
    return PredictionDocument(instances)


def serialize_predictions(doc: PredictionDocument) -> bytes:
    out = []
    for inst in doc.instances:
        obj = {
            "image_id": inst.image_id,
            "score": float(inst.score),
            "keypoints": [float(v) for v in inst.keypoints.ravel()],
            "presence": [float(v) for v in inst.presence],
        }
        if inst.pmap is not None:
            obj["pmap"] = inst.pmap
        obj.update(inst.extra)
        out.append(obj)
    return _dump_json(out)


@dataclass
class PmapFile:
    """Packed probability maps for one instance: K maps over one window."""

    window_rect: Rect
    grid_w: int
    grid_h: int
    presence: np.ndarray  # (K,) float32
    values: np.ndarray  # (K, grid_h, grid_w) float32
    version: int = PMAP_VERSION

    def window(self) -> ActivationWindow:
        return ActivationWindow(self.window_rect, self.grid_w, self.grid_h)

    def as_probability_maps(self) -> list[ProbabilityMap]:
        """Renormalized float64 maps (file storage is quantized float32)."""
        window = self.window()
        maps = []
        for k in range(len(self.values)):
            v = self.values[k].astype(float)
            maps.append(ProbabilityMap(window, v / v.sum(), keypoint_type=k))
        return maps

    @staticmethod
    def from_maps(maps: list[ProbabilityMap], presence: np.ndarray) -> "PmapFile":
        if len(maps) == 0:
            raise ValueError("need at least one map (write an empty file directly)")
        window = maps[0].window
        for m in maps:
            if m.window != window:
                raise ValueError("all maps must share one window")
        values = np.stack([m.values for m in maps]).astype(np.float32)
        return PmapFile(
            window_rect=window.rect,
            grid_w=window.grid_w,
            grid_h=window.grid_h,
            presence=np.asarray(presence, dtype=np.float32),
            values=values,
        )


_HEADER = struct.Struct("<4sIIII4d")


def write_pmap(pmap_file: PmapFile) -> bytes:
    """Serialize maps to the little-endian packed binary format."""
    k = len(pmap_file.presence)
    values = np.ascontiguousarray(pmap_file.values, dtype="<f4")
    presence = np.ascontiguousarray(pmap_file.presence, dtype="<f4")
    if values.shape != (k, pmap_file.grid_h, pmap_file.grid_w):
        raise _fail(
            "bad_shape",
            f"values shape {values.shape} does not match K={k}, "
            f"grid {pmap_file.grid_h}x{pmap_file.grid_w}",
        )
    _validate_pmap_payload(presence, values)
    rect = pmap_file.window_rect
    header = _HEADER.pack(
        PMAP_MAGIC,
        pmap_file.version,
        k,
        pmap_file.grid_h,
        pmap_file.grid_w,
        rect.x0,
        rect.y0,
        rect.x1,
        rect.y1,
    )
    return header + presence.tobytes() + values.tobytes()


def read_pmap(data: bytes) -> PmapFile:
    """Parse the packed binary format, verifying magic, version, and mass."""
    if len(data) < _HEADER.size:
        raise _fail("truncated", f"{len(data)} bytes is shorter than the header")
    magic, version, k, grid_h, grid_w, x0, y0, x1, y1 = _HEADER.unpack_from(data)
    if magic != PMAP_MAGIC:
        raise _fail("bad_magic", f"expected {PMAP_MAGIC!r}, got {magic!r}")
    if version != PMAP_VERSION:
        raise _fail("bad_version", f"unsupported version {version}")
    if grid_h < 1 or grid_w < 1:
        raise _fail("bad_header", f"nonpositive grid {grid_h}x{grid_w}")
    if not (math.isfinite(x0) and math.isfinite(y0) and math.isfinite(x1) and math.isfinite(y1)):
        raise _fail("bad_header", "window rect must be finite")
    if not (x0 < x1 and y0 < y1):
        raise _fail("bad_header", f"degenerate window rect ({x0}, {y0}, {x1}, {y1})")

    expected = _HEADER.size + 4 * k + 4 * k * grid_h * grid_w
    if len(data) < expected:
        raise _fail("truncated", f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise _fail("trailing_data", f"{len(data) - expected} bytes past the payload")

    offset = _HEADER.size
    presence = np.frombuffer(data, dtype="<f4", count=k, offset=offset).copy()
    offset += 4 * k
    values = (
        np.frombuffer(data, dtype="<f4", count=k * grid_h * grid_w, offset=offset)
        .reshape(k, grid_h, grid_w)
        .copy()
    )
    _validate_pmap_payload(presence, values)
    return PmapFile(
        window_rect=Rect(x0, y0, x1, y1),
        grid_w=grid_w,
        grid_h=grid_h,
        presence=presence,
        values=values,
        version=version,
    )


def _validate_pmap_payload(presence: np.ndarray, values: np.ndarray) -> None:
    if np.any(~np.isfinite(presence)) or np.any((presence < 0) | (presence > 1)):
        raise _fail("bad_presence", "presence values must be finite and in [0, 1]")
    if values.size == 0:
        return
    if np.any(~np.isfinite(values)) or np.any(values < 0):
        raise _fail("negative_values", "map values must be finite and nonnegative")
    sums = values.astype(np.float64).sum(axis=(1, 2))
    bad = np.abs(sums - 1.0) > PMAP_SUM_TOL
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise _fail("not_normalized", f"map {k} has mass {sums[k]:.8f}")
