import math

import numpy as np
import pytest

from pmapkit.geometry import ActivationWindow, Rect, WindowConfig
from pmapkit.instances import NUM_KEYPOINTS
from pmapkit.metrics import (
    DistanceCase,
    evaluate_dataset,
    ex_oks_keypoint,
    mean_ap,
    pose_ex_oks,
    pose_oks,
    presence_sweep,
)
from pmapkit.oks import OksParams

from conftest import make_instance

UNIT_KAPPAS = np.ones(NUM_KEYPOINTS)
WINDOW = ActivationWindow(Rect(0, 0, 100, 100), 10, 10)
# instances below carry area=100 so the object scale is 10; with kappa 1 the
# similarity is exp(-d^2 / 200)
PARAMS = OksParams(10.0, 1.0)


def sim_at(d):
    return math.exp(-(d**2) / 200.0)


def displacement_for(sim):
    return 10.0 * math.sqrt(-2.0 * math.log(sim))


class TestExOksKeypoint:
    def test_both_present_zero_distance(self):
        v = ex_oks_keypoint((5, 5), True, (5, 5), True, WINDOW, PARAMS)
        assert v.case is DistanceCase.BOTH_IN
        assert v.similarity == 1.0

    def test_both_absent_full_credit(self):
        v = ex_oks_keypoint((5, 5), False, (500, 500), False, WINDOW, PARAMS)
        assert v.case is DistanceCase.BOTH_OUT
        assert v.similarity == 1.0

    def test_hallucinated_point_penalized_by_boundary_distance(self):
        # prediction 30 px (= 3 * scale * kappa) from the nearest window edge
        v = ex_oks_keypoint((5, 5), False, (30, 50), True, WINDOW, PARAMS)
        assert v.case is DistanceCase.GT_OUT_PRED_IN
        assert v.similarity == pytest.approx(math.exp(-4.5))

    def test_missed_point_penalized_by_gt_boundary_distance(self):
        v = ex_oks_keypoint((90, 50), True, (0, 0), False, WINDOW, PARAMS)
        assert v.case is DistanceCase.GT_IN_PRED_OUT
        assert v.similarity == pytest.approx(sim_at(10.0))

    def test_window_required_when_absent(self):
        with pytest.raises(ValueError):
            ex_oks_keypoint((5, 5), False, (1, 1), True, None, PARAMS)


class TestPoseOks:
    def test_identical_prediction_scores_one(self):
        pts = np.random.default_rng(0).uniform(10, 90, size=(17, 2))
        gt = make_instance(points=pts, area=100.0)
        pred = make_instance(points=pts, area=100.0)
        assert pose_oks(gt, pred, UNIT_KAPPAS) == 1.0

    def test_one_displaced_keypoint(self):
        pts = np.random.default_rng(1).uniform(10, 90, size=(17, 2))
        gt = make_instance(points=pts, area=100.0)
        moved = pts.copy()
        moved[3, 0] += displacement_for(0.5)
        pred = make_instance(points=moved, area=100.0)
        assert pose_oks(gt, pred, UNIT_KAPPAS) == pytest.approx((16 + 0.5) / 17)

    def test_matches_per_keypoint_recomputation(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(10, 90, size=(17, 2))
        vis = rng.integers(0, 3, size=17).astype(float)
        if not (vis > 0).any():
            vis[0] = 2
        gt = make_instance(points=pts, visibility=vis, area=100.0)
        pred_pts = pts + rng.normal(scale=5.0, size=(17, 2))
        pred = make_instance(points=pred_pts, area=100.0)
        sims = [
            sim_at(np.hypot(*(pred_pts[k] - pts[k])))
            for k in range(17)
            if vis[k] > 0
        ]
        assert pose_oks(gt, pred, UNIT_KAPPAS) == pytest.approx(np.mean(sims))

    def test_no_labeled_keypoints_rejected(self):
        gt = make_instance(points=np.zeros((17, 2)), visibility=np.zeros(17), area=100.0)
        pred = make_instance(points=np.zeros((17, 2)), area=100.0)
        with pytest.raises(ValueError):
            pose_oks(gt, pred, UNIT_KAPPAS)


class TestPoseExOks:
    def test_equals_plain_oks_when_all_present(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(20, 80, size=(17, 2))
        gt = make_instance(points=pts, area=100.0, presence=np.ones(17))
        pred_pts = pts + rng.normal(scale=4.0, size=(17, 2))
        pred = make_instance(points=pred_pts, area=100.0, presence=np.ones(17))
        plain = pose_oks(gt, pred, UNIT_KAPPAS)
        extended = pose_ex_oks(gt, pred, WINDOW, UNIT_KAPPAS, presence_threshold=0.5)
        assert extended == plain  # bit-for-bit

    def test_all_absent_scores_one(self):
        pts = np.full((17, 2), 500.0)
        gt = make_instance(points=pts, area=100.0, presence=np.zeros(17))
        pred = make_instance(points=pts, area=100.0, presence=np.zeros(17))
        assert pose_ex_oks(gt, pred, WINDOW, UNIT_KAPPAS, 0.5) == 1.0

    def test_three_keypoint_hand_case(self):
        vis = np.zeros(17)
        vis[:3] = 2
        gt_pts = np.zeros((17, 2))
        gt_pts[0] = (50, 50)   # present, predicted exactly
        gt_pts[1] = (-40, 50)  # flagged absent, prediction hallucinates in-window
        gt_pts[2] = (90, 50)   # present, prediction says absent
        presence = np.zeros(17)
        presence[0] = 1
        presence[2] = 1
        gt = make_instance(points=gt_pts, visibility=vis, area=100.0, presence=presence)

        pred_pts = np.zeros((17, 2))
        pred_pts[0] = (50, 50)
        pred_pts[1] = (20, 50)  # 20 px from the nearest window edge
        pred_pts[2] = (90, 50)
        pred_presence = np.zeros(17)
        pred_presence[0] = 1.0
        pred_presence[1] = 0.9
        pred_presence[2] = 0.1
        pred = make_instance(points=pred_pts, area=100.0, presence=pred_presence)

        got = pose_ex_oks(gt, pred, WINDOW, UNIT_KAPPAS, presence_threshold=0.5)
        expected = (1.0 + sim_at(20.0) + sim_at(10.0)) / 3.0
        assert got == pytest.approx(expected, abs=1e-12)

    def test_gt_presence_derived_from_window_when_no_flags(self):
        vis = np.zeros(17)
        vis[:2] = 2
        gt_pts = np.zeros((17, 2))
        gt_pts[0] = (50, 50)    # inside the window
        gt_pts[1] = (150, 50)   # outside the window
        gt = make_instance(points=gt_pts, visibility=vis, area=100.0)
        pred = make_instance(points=gt_pts, area=100.0, presence=np.array([1.0, 0.0] + [0.0] * 15))
        got = pose_ex_oks(gt, pred, WINDOW, UNIT_KAPPAS, 0.5)
        assert got == pytest.approx(1.0)


def one_keypoint_instance(image_id, xy, score=1.0, presence_score=1.0, ann_id=None, offset=0.0):
    vis = np.zeros(17)
    vis[0] = 2
    pts = np.zeros((17, 2))
    pts[0] = (xy[0] + offset, xy[1])
    return make_instance(
        image_id=image_id,
        points=pts,
        visibility=vis,
        bbox=Rect(xy[0] - 20, xy[1] - 20, xy[0] + 20, xy[1] + 20),
        area=100.0,
        score=score,
        presence=np.full(17, presence_score),
        ann_id=ann_id,
    )


class TestMeanAp:
    def test_single_093_match_scores_09(self):
        gt = one_keypoint_instance(0, (50, 50))
        pred = one_keypoint_instance(0, (50, 50), offset=displacement_for(0.93))
        curve = mean_ap([gt], [pred], UNIT_KAPPAS)
        assert curve.ap == pytest.approx(0.9, abs=1e-12)

    def test_perfect_predictions_score_one(self):
        gts = [one_keypoint_instance(i, (40 + i, 40)) for i in range(4)]
        preds = [one_keypoint_instance(i, (40 + i, 40), score=0.8) for i in range(4)]
        assert mean_ap(gts, preds, UNIT_KAPPAS).ap == 1.0

    def test_three_image_micro_dataset_hand_value(self):
        # image 0: exact match (score .9); image 1: 0.93 match (score .8);
        # image 2: no truth, one false positive (score .7)
        gts = [one_keypoint_instance(0, (50, 50)), one_keypoint_instance(1, (60, 40))]
        preds = [
            one_keypoint_instance(0, (50, 50), score=0.9),
            one_keypoint_instance(1, (60, 40), score=0.8, offset=displacement_for(0.93)),
            one_keypoint_instance(2, (10, 10), score=0.7),
        ]
        curve = mean_ap(gts, preds, UNIT_KAPPAS)
        # nine thresholds pass both matches (AP 1); at 0.95 only the exact
        # match survives: recall stalls at 0.5, so 51 of 101 recall points
        # carry precision 1
        expected = (9 * 1.0 + 51 / 101) / 10
        assert curve.ap == pytest.approx(expected, abs=1e-12)
        assert curve.ap_per_threshold[-1] == pytest.approx(51 / 101, abs=1e-12)

    def test_invariant_to_monotone_score_rescaling(self):
        rng = np.random.default_rng(4)
        gts, preds = [], []
        for i in range(6):
            gts.append(one_keypoint_instance(i, (50, 50)))
            preds.append(
                one_keypoint_instance(
                    i, (50, 50), score=rng.uniform(0.1, 0.9), offset=rng.uniform(0, 15)
                )
            )
        base = mean_ap(gts, preds, UNIT_KAPPAS)
        for p in preds:
            p.score = p.score * 7.0 + 3.0
        rescaled = mean_ap(gts, preds, UNIT_KAPPAS)
        assert np.array_equal(base.ap_per_threshold, rescaled.ap_per_threshold)

    def test_empty_predictions_zero_ap(self):
        gts = [one_keypoint_instance(0, (50, 50))]
        assert mean_ap(gts, [], UNIT_KAPPAS).ap == 0.0

    def test_ex_map_equals_map_with_everything_present(self):
        rng = np.random.default_rng(5)
        gts, preds = [], []
        for i in range(5):
            gts.append(one_keypoint_instance(i, (50, 50), presence_score=1.0))
            preds.append(
                one_keypoint_instance(
                    i, (50, 50), score=rng.uniform(0.2, 1.0), offset=rng.uniform(0, 12),
                    presence_score=1.0,
                )
            )
        plain = mean_ap(gts, preds, UNIT_KAPPAS, metric="oks")
        extended = mean_ap(
            gts, preds, UNIT_KAPPAS, metric="ex_oks",
            window_cfg=WindowConfig(), presence_threshold=0.0,
        )
        assert np.array_equal(plain.ap_per_threshold, extended.ap_per_threshold)
        assert plain.ap == extended.ap

    def test_jobs_do_not_change_results(self):
        rng = np.random.default_rng(6)
        gts, preds = [], []
        for i in range(8):
            gts.append(one_keypoint_instance(i, (50, 50)))
            preds.append(
                one_keypoint_instance(i, (50, 50), score=rng.uniform(), offset=rng.uniform(0, 20))
            )
        a = evaluate_dataset(gts, preds, UNIT_KAPPAS, jobs=1)
        b = evaluate_dataset(gts, preds, UNIT_KAPPAS, jobs=4)
        assert np.array_equal(a.curve.ap_per_threshold, b.curve.ap_per_threshold)


class TestPresenceSweep:
    def test_separable_at_half(self):
        flags = np.array([False] * 50 + [True] * 50)
        scores = np.concatenate([np.linspace(0, 0.4, 50), np.linspace(0.5, 1.0, 50)])
        result = presence_sweep(flags, scores)
        assert result.optimal_accuracy == 1.0
        assert result.accuracies[50] == 1.0  # threshold 0.50

    def test_scores_equal_to_labels(self):
        flags = np.array([True, False, True, False, True])
        scores = flags.astype(float)
        result = presence_sweep(flags, scores)
        assert result.optimal_accuracy == 1.0
        assert result.optimal_threshold == pytest.approx(0.01)  # lowest tied threshold
        inner = (result.thresholds > 0) & (result.thresholds < 1)
        assert np.all(result.accuracies[inner] == 1.0)

    def test_matches_brute_force_confusion_scan(self):
        rng = np.random.default_rng(7)
        flags = rng.uniform(size=1000) < 0.3
        scores = np.clip(flags * 0.6 + rng.uniform(size=1000) * 0.5, 0, 1)
        result = presence_sweep(flags, scores)
        for t, acc in zip(result.thresholds, result.accuracies):
            tp = ((scores >= t) & flags).sum()
            tn = ((scores < t) & ~flags).sum()
            assert acc == pytest.approx((tp + tn) / 1000)

    def test_optimal_beats_class_prior(self):
        rng = np.random.default_rng(8)
        flags = rng.uniform(size=500) < 0.8
        scores = rng.uniform(size=500)
        result = presence_sweep(flags, scores)
        prior = max(flags.mean(), 1 - flags.mean())
        assert result.optimal_accuracy >= prior

    def test_balanced_subsampling(self):
        rng = np.random.default_rng(9)
        flags = np.array([True] * 900 + [False] * 100)
        scores = np.where(flags, 0.9, 0.1)
        result = presence_sweep(flags, scores, balanced=True, rng=np.random.default_rng(1))
        assert result.n_pos == result.n_neg == 100
        again = presence_sweep(flags, scores, balanced=True, rng=np.random.default_rng(1))
        assert np.array_equal(result.accuracies, again.accuracies)
        with pytest.raises(ValueError):
            presence_sweep(flags, scores, balanced=True)

    def test_single_class_is_degenerate_but_defined(self):
        flags = np.ones(10, dtype=bool)
        scores = np.linspace(0, 1, 10)
        result = presence_sweep(flags, scores)
        assert result.degenerate
        assert len(result.accuracies) == 101
