"""Presence-aware keypoint similarity and detection-style evaluation.

The extended per-keypoint similarity scores four situations: both points in
the window (plain distance), a hallucinated point (distance from the
prediction to the window boundary), a missed point (distance from the truth
to the boundary), and agreement that the point is absent (full credit).
Dataset-level quality is the usual greedy-matching average precision over
similarity thresholds 0.50..0.95.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .geometry import ActivationWindow, WindowConfig, boundary_distance
from .instances import KEYPOINT_NAMES, NUM_KEYPOINTS, PoseInstance
from .oks import OksParams, oks_similarity

__all__ = [
    "DistanceCase",
    "KeypointVerdict",
    "ApCurve",
    "EvalReport",
    "SweepResult",
    "MatchEntry",
    "ImageMatches",
    "ex_oks_keypoint",
    "keypoint_verdicts",
    "pose_oks",
    "pose_ex_oks",
    "match_dataset",
    "mean_ap",
    "evaluate_dataset",
    "presence_sweep",
    "OKS_THRESHOLDS",
]

OKS_THRESHOLDS = np.round(np.arange(0.50, 0.951, 0.05), 2)
RECALL_GRID = np.linspace(0.0, 1.0, 101)
MAX_DETS = 20


class DistanceCase(Enum):
    BOTH_IN = "both_in"
    GT_OUT_PRED_IN = "gt_out_pred_in"
    GT_IN_PRED_OUT = "gt_in_pred_out"
    BOTH_OUT = "both_out"


@dataclass(frozen=True)
class KeypointVerdict:
    gt_present: bool
    pred_present: bool
    case: DistanceCase
    similarity: float


def ex_oks_keypoint(
    gt_point: Sequence[float],
    gt_present: bool,
    pred_point: Sequence[float],
    pred_present: bool,
    window: ActivationWindow | None,
    params: OksParams,
) -> KeypointVerdict:
    """Score one keypoint under the four-case presence-aware similarity.

    The window may be omitted only when both sides are present, where the
    score reduces to the plain point-to-point similarity.
    """
    if gt_present and pred_present:
        case = DistanceCase.BOTH_IN
        d = math.hypot(
            float(pred_point[0]) - float(gt_point[0]),
            float(pred_point[1]) - float(gt_point[1]),
        )
    elif pred_present:
        case = DistanceCase.GT_OUT_PRED_IN
        d = boundary_distance(_require_window(window), pred_point)
    elif gt_present:
        case = DistanceCase.GT_IN_PRED_OUT
        d = boundary_distance(_require_window(window), gt_point)
    else:
        case = DistanceCase.BOTH_OUT
        d = 0.0
    return KeypointVerdict(gt_present, pred_present, case, oks_similarity(d, params))


def _require_window(window: ActivationWindow | None) -> ActivationWindow:
    if window is None:
        raise ValueError("a window is required when either side is absent")
    return window


def keypoint_verdicts(
    gt: PoseInstance,
    pred: PoseInstance,
    kappas: np.ndarray,
    window: ActivationWindow | None = None,
    presence_threshold: float | None = None,
) -> list[KeypointVerdict | None]:
    """Per-keypoint verdicts over the labeled ground-truth keypoints.

    With ``presence_threshold`` None, both sides are taken as present and
    the result is the plain localization similarity. Otherwise ground-truth
    presence comes from its flag array (or window containment when the array
    is absent) and predicted presence from thresholding the predicted
    probabilities. Unlabeled keypoints yield None.
    """
    scale = gt.object_scale()
    labeled = gt.labeled_mask()
    out: list[KeypointVerdict | None] = [None] * NUM_KEYPOINTS
    for k in range(NUM_KEYPOINTS):
        if not labeled[k]:
            continue
        params = OksParams(scale, float(kappas[k]))
        if presence_threshold is None:
            gt_present = True
            pred_present = True
        else:
            if gt.presence is not None:
                gt_present = gt.presence[k] > 0.5
            else:
                gt_present = _require_window(window).contains(gt.xy[k])
            if pred.presence is not None:
                pred_present = pred.presence[k] >= presence_threshold
            else:
                pred_present = True
        out[k] = ex_oks_keypoint(
            gt.xy[k], gt_present, pred.xy[k], pred_present, window, params
        )
    return out


def _mean_similarity(verdicts: Iterable[KeypointVerdict | None]) -> float:
    sims = [v.similarity for v in verdicts if v is not None]
    if not sims:
        raise ValueError("instance has no labeled keypoints to score")
    return float(sum(sims) / len(sims))


def pose_oks(gt: PoseInstance, pred: PoseInstance, kappas: np.ndarray) -> float:
    """Mean localization similarity over the labeled ground-truth keypoints."""
    return _mean_similarity(keypoint_verdicts(gt, pred, kappas))


def pose_ex_oks(
    gt: PoseInstance,
    pred: PoseInstance,
    window: ActivationWindow,
    kappas: np.ndarray,
    presence_threshold: float,
) -> float:
    """Presence-aware instance similarity; equals pose_oks when everything is present."""
    if not 0.0 <= presence_threshold <= 1.0:
        raise ValueError(f"presence threshold must be in [0, 1], got {presence_threshold}")
    return _mean_similarity(
        keypoint_verdicts(gt, pred, kappas, window, presence_threshold)
    )


@dataclass
class MatchEntry:
    """One scored prediction and the ground truth it claimed, if any."""

    pred: PoseInstance
    gt: PoseInstance | None
    gt_window: ActivationWindow | None
    similarity: float  # NaN when unmatched


@dataclass
class ImageMatches:
    image_id: int
    num_gt: int
    entries: list[MatchEntry]


def _group_by_image(instances: Iterable[PoseInstance]) -> dict[int, list[PoseInstance]]:
    groups: dict[int, list[PoseInstance]] = {}
    for inst in instances:
        groups.setdefault(inst.image_id, []).append(inst)
    return groups


def _match_image(
    image_id: int,
    gt_list: list[PoseInstance],
    pred_list: list[PoseInstance],
    kappas: np.ndarray,
    metric: str,
    window_cfg: WindowConfig | None,
    presence_threshold: float | None,
    max_dets: int,
) -> ImageMatches:
    gt_list = [g for g in gt_list if g.num_labeled() > 0]
    windows: list[ActivationWindow | None]
    if metric == "ex_oks":
        windows = [window_cfg.window_for(g.bbox) for g in gt_list]
    else:
        windows = [None] * len(gt_list)
    pred_list = sorted(pred_list, key=lambda p: -p.score)[:max_dets]

    entries: list[MatchEntry] = []
    unclaimed = [True] * len(gt_list)
    for pred in pred_list:
        best_j = -1
        best_sim = -math.inf
        for j, gt in enumerate(gt_list):
            if not unclaimed[j]:
                continue
            if metric == "oks":
                sim = pose_oks(gt, pred, kappas)
            else:
                sim = pose_ex_oks(gt, pred, windows[j], kappas, presence_threshold)
            if sim > best_sim:
                best_sim = sim
                best_j = j
        if best_j >= 0:
            unclaimed[best_j] = False
            entries.append(MatchEntry(pred, gt_list[best_j], windows[best_j], best_sim))
        else:
            entries.append(MatchEntry(pred, None, None, math.nan))
    return ImageMatches(image_id, len(gt_list), entries)


def match_dataset(
    gts: Sequence[PoseInstance],
    preds: Sequence[PoseInstance],
    kappas: np.ndarray,
    *,
    metric: str = "oks",
    window_cfg: WindowConfig | None = None,
    presence_threshold: float = 0.5,
    max_dets: int = MAX_DETS,
    jobs: int = 1,
) -> list[ImageMatches]:
    """Greedy score-ordered matching per image, ordered by image id.

    Predictions are taken in descending score order (ties keep input order,
    capped at ``max_dets``); each claims the still-unmatched ground truth
    with the highest similarity. Matching is independent per image, so the
    result does not depend on ``jobs``.
    """
    if metric not in ("oks", "ex_oks"):
        raise ValueError(f"unknown metric {metric!r}")
    if metric == "ex_oks" and window_cfg is None:
        window_cfg = WindowConfig()
    thr = presence_threshold if metric == "ex_oks" else None

    gt_groups = _group_by_image(gts)
    pred_groups = _group_by_image(preds)
    image_ids = sorted(set(gt_groups) | set(pred_groups))

    def work(image_id: int) -> ImageMatches:
        return _match_image(
            image_id,
            gt_groups.get(image_id, []),
            pred_groups.get(image_id, []),
            kappas,
            metric,
            window_cfg,
            thr,
            max_dets,
        )

    if jobs > 1 and len(image_ids) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, image_ids))
    return [work(i) for i in image_ids]


@dataclass(frozen=True)
class ApCurve:
    """Interpolated precision-recall summary over the similarity thresholds."""

    thresholds: np.ndarray
    ap_per_threshold: np.ndarray
    recall_grid: np.ndarray
    precisions: np.ndarray  # (len(thresholds), len(recall_grid))
    ap: float


@dataclass
class EvalReport:
    metric: str
    curve: ApCurve
    per_keypoint_similarity: np.ndarray  # matched-pair mean per type, NaN when unseen
    num_images: int
    num_gt: int
    num_pred: int
    num_matched: int
    presence_threshold: float | None = None

    def to_dict(self) -> dict:
        per_kp = {
            name: (None if math.isnan(v) else float(v))
            for name, v in zip(KEYPOINT_NAMES, self.per_keypoint_similarity)
        }
        return {
            "metric": self.metric,
            "map": None if math.isnan(self.curve.ap) else float(self.curve.ap),
            "thresholds": [float(t) for t in self.curve.thresholds],
            "ap_per_threshold": [
                None if math.isnan(a) else float(a) for a in self.curve.ap_per_threshold
            ],
            "per_keypoint_mean_similarity": per_kp,
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_pred": self.num_pred,
            "num_matched": self.num_matched,
            "presence_threshold": self.presence_threshold,
        }


def evaluate_dataset(
    gts: Sequence[PoseInstance],
    preds: Sequence[PoseInstance],
    kappas: np.ndarray,
    *,
    metric: str = "oks",
    window_cfg: WindowConfig | None = None,
    presence_threshold: float = 0.5,
    max_dets: int = MAX_DETS,
    thresholds: np.ndarray = OKS_THRESHOLDS,
    jobs: int = 1,
) -> EvalReport:
    """Average precision and per-keypoint aggregates over a dataset.

    A matched pair counts as a true positive at threshold t iff its
    similarity reaches t; precision is interpolated at 101 recall points and
    averaged, then averaged over the 10 thresholds.
    """
    matches = match_dataset(
        gts,
        preds,
        kappas,
        metric=metric,
        window_cfg=window_cfg,
        presence_threshold=presence_threshold,
        max_dets=max_dets,
        jobs=jobs,
    )
    thr = presence_threshold if metric == "ex_oks" else None

    scores: list[float] = []
    sims: list[float] = []
    npos = 0
    matched = 0
    kp_sums = np.zeros(NUM_KEYPOINTS)
    kp_counts = np.zeros(NUM_KEYPOINTS, dtype=np.int64)
    for image in matches:
        npos += image.num_gt
        for entry in image.entries:
            scores.append(entry.pred.score)
            sims.append(entry.similarity)
            if entry.gt is None:
                continue
            matched += 1
            for k, verdict in enumerate(
                keypoint_verdicts(entry.gt, entry.pred, kappas, entry.gt_window, thr)
            ):
                if verdict is not None:
                    kp_sums[k] += verdict.similarity
                    kp_counts[k] += 1

    curve = _ap_curve(np.array(scores), np.array(sims), npos, thresholds)
    per_kp = np.where(kp_counts > 0, kp_sums / np.maximum(kp_counts, 1), np.nan)
    return EvalReport(
        metric=metric,
        curve=curve,
        per_keypoint_similarity=per_kp,
        num_images=len(matches),
        num_gt=npos,
        num_pred=len(scores),
        num_matched=matched,
        presence_threshold=thr,
    )


def mean_ap(
    gts: Sequence[PoseInstance],
    preds: Sequence[PoseInstance],
    kappas: np.ndarray,
    *,
    metric: str = "oks",
    window_cfg: WindowConfig | None = None,
    presence_threshold: float = 0.5,
    max_dets: int = MAX_DETS,
) -> ApCurve:
    report = evaluate_dataset(
        gts,
        preds,
        kappas,
        metric=metric,
        window_cfg=window_cfg,
        presence_threshold=presence_threshold,
        max_dets=max_dets,
    )
    return report.curve


def _ap_curve(
    scores: np.ndarray, sims: np.ndarray, npos: int, thresholds: np.ndarray
) -> ApCurve:
    order = np.argsort(-scores, kind="stable") if len(scores) else np.array([], dtype=int)
    sims = sims[order] if len(scores) else sims
    n_thr = len(thresholds)
    precisions = np.zeros((n_thr, len(RECALL_GRID)))
    aps = np.full(n_thr, np.nan)

    if npos > 0:
        for ti, t in enumerate(thresholds):
            tp = np.nan_to_num(sims, nan=-1.0) >= t
            ctp = np.cumsum(tp)
            cfp = np.cumsum(~tp)
            recall = ctp / npos
            with np.errstate(invalid="ignore", divide="ignore"):
                precision = np.where(ctp + cfp > 0, ctp / np.maximum(ctp + cfp, 1), 0.0)
            # enforce monotone precision from the right, then sample at the grid
            precision = np.maximum.accumulate(precision[::-1])[::-1]
            idx = np.searchsorted(recall, RECALL_GRID, side="left")
            valid = idx < len(recall)
            q = np.zeros(len(RECALL_GRID))
            q[valid] = precision[idx[valid]]
            precisions[ti] = q
            aps[ti] = q.mean()

    ap = float(np.mean(aps)) if npos > 0 else math.nan
    return ApCurve(
        thresholds=np.asarray(thresholds, dtype=float),
        ap_per_threshold=aps,
        recall_grid=RECALL_GRID.copy(),
        precisions=precisions,
        ap=ap,
    )


@dataclass
class SweepResult:
    """Accuracy of in/out classification across a grid of score thresholds."""

    thresholds: np.ndarray
    accuracies: np.ndarray
    optimal_threshold: float
    optimal_accuracy: float
    degenerate: bool
    n_pos: int
    n_neg: int


def presence_sweep(
    gt_flags: np.ndarray,
    scores: np.ndarray,
    *,
    balanced: bool = False,
    rng: np.random.Generator | None = None,
    step: float = 0.01,
) -> SweepResult:
    """Sweep a decision threshold over presence scores against binary truth.

    A sample is classified present when its score is >= the threshold.
    ``balanced`` subsamples the majority class down to the minority size
    using the supplied generator. Ties on best accuracy resolve to the
    lowest threshold; single-class input leaves the curve defined but marks
    the optimum as degenerate.
    """
    flags = np.asarray(gt_flags, dtype=bool).ravel()
    values = np.asarray(scores, dtype=float).ravel()
    if flags.shape != values.shape:
        raise ValueError("flags and scores must have equal length")
    if flags.size == 0:
        raise ValueError("sweep needs at least one sample")

    if balanced:
        if rng is None:
            raise ValueError("balanced subsampling requires a seeded generator")
        pos = np.flatnonzero(flags)
        neg = np.flatnonzero(~flags)
        if len(pos) == 0 or len(neg) == 0:
            raise ValueError("balanced sweep needs at least one sample of each class")
        if len(pos) > len(neg):
            pos = np.sort(rng.choice(pos, size=len(neg), replace=False))
        elif len(neg) > len(pos):
            neg = np.sort(rng.choice(neg, size=len(pos), replace=False))
        keep = np.sort(np.concatenate([pos, neg]))
        flags = flags[keep]
        values = values[keep]

    n_steps = int(round(1.0 / step))
    thresholds = np.linspace(0.0, 1.0, n_steps + 1)
    predicted = values[np.newaxis, :] >= thresholds[:, np.newaxis]
    accuracies = (predicted == flags[np.newaxis, :]).mean(axis=1)
    best = int(np.argmax(accuracies))
    return SweepResult(
        thresholds=thresholds,
        accuracies=accuracies,
        optimal_threshold=float(thresholds[best]),
        optimal_accuracy=float(accuracies[best]),
        degenerate=bool(flags.all() or (~flags).all()),
        n_pos=int(flags.sum()),
        n_neg=int((~flags).sum()),
    )
