import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrrcnn.detector import ModelConfig, init_params
from hrrcnn.geometry import Box, iou
from hrrcnn.metrics import (
    Detections,
    average_precision,
    class_frequency_regression,
    evaluate_detections,
    linear_param_count,
    match_detections,
    param_count_report,
)


def corners(*rows):
    return np.array([Box.from_corners(*r).as_array() for r in rows])


def exhaustive_lexicographic_matching(dets, gts, thr):
    """Best TP-flag vector (lexicographic in score order) over all one-to-one matchings."""
    best = None
    slots = list(range(len(gts))) + [None] * len(dets)
    for choice in itertools.permutations(slots, len(dets)):
        flags = []
        ok = True
        for d, g in enumerate(choice):
            if g is None:
                flags.append(False)
            elif iou(Box(*dets[d]), Box(*gts[g])) >= thr:
                flags.append(True)
            else:
                ok = False
                break
        if ok and (best is None or flags > best):
            best = flags
    return np.array(best)


def curve_integration_ap(flags, scores, n_gt):
    """Loop over the 101 recall points on the explicit precision/recall curve."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    pts = []
    tp = fp = 0
    for i in order:
        tp += flags[i]
        fp += not flags[i]
        pts.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100
        cands = [p for rec, p in pts if rec >= r - 1e-15]
        total += max(cands) if cands else 0.0
    return total / 101


class TestMatching:
    def test_exact_hit(self):
        g = corners((0, 0, 10, 10))
        np.testing.assert_array_equal(match_detections(g, g, 0.5), [True])

    def test_duplicate_is_fp(self):
        g = corners((0, 0, 10, 10))
        np.testing.assert_array_equal(match_detections(np.repeat(g, 2, 0), g, 0.5), [True, False])

    def test_below_threshold(self):
        np.testing.assert_array_equal(match_detections(corners((0, 0, 10, 10)), corners((5, 0, 15, 10)), 0.5), [False])

    def test_three_det_two_gt_hand_case(self):
        gts = corners((0, 0, 10, 10), (8, 0, 18, 10))
        dets = corners((1, 0, 11, 10), (0, 0, 10, 10), (9, 0, 19, 10))
        flags = match_detections(dets, gts, 0.5)
        # det 0 takes gt 0 (IoU .82), det 1 loses its only candidate, det 2 takes gt 1
        np.testing.assert_array_equal(flags, [True, False, True])
        np.testing.assert_array_equal(flags, exhaustive_lexicographic_matching(dets, gts, 0.5))

    def test_random_small_instances_agree_with_exhaustive(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n_g, n_d = rng.integers(1, 4), rng.integers(1, 5)
            # separated gts: a det can clear 0.5 with at most one of them
            gts = np.column_stack([np.arange(n_g) * 25 + 5.0, np.full(n_g, 5.0), np.full((n_g, 2), 10.0)])
            src = gts[rng.integers(0, n_g, n_d)]
            dets = src + np.column_stack([rng.uniform(-4, 4, (n_d, 2)), np.zeros((n_d, 2))])
            np.testing.assert_array_equal(
                match_detections(dets, gts, 0.5), exhaustive_lexicographic_matching(dets, gts, 0.5)
            )

    def test_empty(self):
        assert match_detections(np.zeros((0, 4)), corners((0, 0, 1, 1)), 0.5).size == 0
        np.testing.assert_array_equal(match_detections(corners((0, 0, 1, 1)), np.zeros((0, 4)), 0.5), [False])


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([True, True, True], [0.9, 0.8, 0.7], 3) == 1.0

    def test_no_detections(self):
        assert average_precision([], [], 2) == 0.0

    def test_needs_gt(self):
        with pytest.raises(ValueError):
            average_precision([True], [1.0], 0)

    def test_four_det_hand_case(self):
        flags, scores = [True, False, True, False], [0.9, 0.8, 0.7, 0.6]
        # curve: (0.5, 1), (0.5, .5), (1, 2/3), (1, .5) -> 51 points at 1, 50 at 2/3
        expected = (51 * 1.0 + 50 * (2 / 3)) / 101
        assert average_precision(flags, scores, 2) == pytest.approx(expected, abs=1e-12)
        assert average_precision(flags, scores, 2) == pytest.approx(curve_integration_ap(flags, scores, 2), abs=1e-12)

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=1, max_size=12), st.integers(0, 4))
    def test_matches_curve_integration(self, dets, extra_gt):
        flags = [f for f, _ in dets]
        scores = [s for _, s in dets]
        # distinct scores so the ranking is unambiguous
        scores = list(np.array(scores) + np.arange(len(scores)) * 1e-6)
        n_gt = max(1, sum(flags) + extra_gt)
        assert average_precision(flags, scores, n_gt) == pytest.approx(
            curve_integration_ap(flags, scores, n_gt), abs=1e-12
        )

    def test_adding_correct_top_detection_never_hurts(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            flags = list(rng.random(6) < 0.5)
            scores = list(rng.random(6))
            n_gt = sum(flags) + 1
            before = average_precision(flags, scores, n_gt)
            after = average_precision(flags + [True], scores + [2.0], n_gt)
            assert after >= before - 1e-15


class TestEvaluate:
    def test_perfect_detections(self):
        gtb = [corners((0, 0, 10, 10), (20, 20, 30, 34))]
        gtl = [np.array([1, 2])]
        det = Detections(gtb[0].copy(), np.array([0.9, 0.8]), np.array([1, 2]))
        rep = evaluate_detections([det], gtb, gtl, [1, 2, 3])
        assert rep.ap50[1] == rep.ap50[2] == 1.0
        assert rep.ap[1] == 1.0
        assert rep.evaluated == [1, 2]
        assert rep.mean_ap50 == 1.0

    def test_wrong_class_is_fp(self):
        gtb = [corners((0, 0, 10, 10))]
        det = Detections(gtb[0].copy(), np.array([0.9]), np.array([2]))
        rep = evaluate_detections([det], gtb, [np.array([1])], [1, 2])
        assert rep.ap50[1] == 0.0
        assert rep.evaluated == [1]

    def test_loose_box_counts_at_50_only(self):
        gtb = [corners((0, 0, 10, 10))]
        det = Detections(corners((0, 0, 10, 14)), np.array([0.9]), np.array([1]))  # IoU 0.714
        rep = evaluate_detections([det], gtb, [np.array([1])], [1])
        assert rep.ap50[1] == 1.0
        assert rep.ap[1] == pytest.approx(5 / 10)  # thresholds .50 .. .70 pass


class TestRegression:
    def test_exact_line(self):
        fit = class_frequency_regression([3.0, 5.0, 9.0], [1.0, 2.0, 4.0])
        assert fit.slope == pytest.approx(2.0, abs=1e-12)
        assert fit.intercept == pytest.approx(1.0, abs=1e-12)

    def test_two_points_zero_residuals(self):
        fit = class_frequency_regression([0.1, -0.3], [40, 400])
        np.testing.assert_allclose(fit.residuals, 0.0, atol=1e-15)

    def test_normal_equation_oracle(self):
        rng = np.random.default_rng(2)
        x, y = rng.integers(10, 500, 5).astype(float), rng.normal(size=5)
        X = np.column_stack([np.ones(5), x])
        intercept, slope = np.linalg.solve(X.T @ X, X.T @ y)
        fit = class_frequency_regression(y, x)
        assert fit.slope == pytest.approx(slope, abs=1e-9)
        assert fit.intercept == pytest.approx(intercept, abs=1e-9)
        logfit = class_frequency_regression(y, x, log_scale=True)
        Xl = np.column_stack([np.ones(5), np.log(x)])
        np.testing.assert_allclose([logfit.intercept, logfit.slope], np.linalg.solve(Xl.T @ Xl, Xl.T @ y), atol=1e-9)

    def test_equal_counts(self):
        with pytest.raises(ValueError):
            class_frequency_regression([0.1, 0.2], [5, 5])

    def test_too_few(self):
        with pytest.raises(ValueError):
            class_frequency_regression([0.1], [5])


class TestParamCounts:
    def test_linear(self):
        assert linear_param_count(2, 1) == 3
        assert linear_param_count(2, 1, bias=False) == 2

    def test_report_additive(self):
        params = init_params(ModelConfig(), 0)
        rep = param_count_report(params)
        parts = rep["backbone"] + rep["projection"] + rep["box_head"] + rep["gam_total"] + rep.get("box_head_stage2", 0)
        assert rep["total"] == parts
        assert rep["gam_total"] == sum(rep[f"gam.{n}"] for n in params.gams())
        assert rep["gam_attention_total"] == sum(rep[f"gam.{n}.attention"] for n in params.gams())

    def test_unshared_heads_reported(self):
        rep = param_count_report(init_params(ModelConfig(share_head=False), 0))
        assert rep["box_head_stage2"] == rep["box_head"]
