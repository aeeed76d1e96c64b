import json

import numpy as np
import pytest

from sparselabel.bench import (
    BenchError,
    MatchConfig,
    evaluate_boundaries,
    evaluate_segmentation,
    f_measure,
    nms_thin,
    write_pr_csv,
    write_pr_summary,
)


class TestNmsThin:
    def test_all_zero_stays_zero(self):
        out = nms_thin(np.zeros((10, 12, 1)))
        assert np.all(out == 0)

    def test_single_pixel_line_unchanged(self):
        E = np.zeros((15, 15, 1))
        E[2:13, 7, 0] = 0.9
        out = nms_thin(E)
        assert np.array_equal(out, E)

    def test_three_pixel_ridge_keeps_center_column(self):
        E = np.zeros((15, 15))
        E[:, 6] = 0.5
        E[:, 7] = 0.9
        E[:, 8] = 0.5
        out = nms_thin(E)[:, :, 0]
        # cross-section argmax oracle: only the strongest column survives
        for y in range(2, 13):
            row = E[y]
            assert out[y, int(np.argmax(row))] == 0.9
            assert out[y, 6] == 0.0
            assert out[y, 8] == 0.0

    def test_multichannel_rejected(self):
        with pytest.raises(BenchError):
            nms_thin(np.zeros((5, 5, 3)))

    def test_out_of_range_rejected(self):
        with pytest.raises(BenchError):
            nms_thin(np.full((5, 5, 1), 1.5))

    def test_thick_blob_becomes_thin(self):
        E = np.zeros((20, 20))
        E[8:12, 3:17] = 0.8
        E[9:11, 3:17] = 1.0
        out = nms_thin(E)[:, :, 0]
        assert (out > 0).sum() < (E > 0).sum()
        # survivors form a curve at most 1 pixel wide vertically in the middle
        mid = out[:, 8:12]
        assert np.all((mid > 0).sum(axis=0) <= 1)


def single(edge, truth):
    return [(edge, [truth])]


class TestEvaluateBoundaries:
    def test_perfect_detection_scores_one_at_zero_threshold(self):
        truth = np.zeros((9, 9, 1))
        truth[4, 2:7, 0] = 1.0
        curve = evaluate_boundaries(single(truth.copy(), truth), MatchConfig())
        assert curve.precision[0] == 1.0
        assert curve.recall[0] == 1.0
        assert curve.f_measure[0] == 1.0
        assert curve.ods_f == 1.0

    def test_one_pixel_shift_absorbed_by_tolerance(self):
        truth = np.zeros((12, 12, 1))
        truth[5, 2:10, 0] = 1.0
        det = np.zeros((12, 12, 1))
        det[6, 2:10, 0] = 1.0
        cfg = MatchConfig(max_dist=2.0 / np.hypot(12, 12))
        curve = evaluate_boundaries(single(det, truth), cfg)
        assert curve.ods_f == 1.0

    def test_hand_enumerated_5x5_instance(self):
        # truth pixels at (1,1), (3,1), (2,4); detections at (1,1), (1,2),
        # (3,3), (4,4) [as (row, col)], tolerance radius 1.5 px
        truth = np.zeros((5, 5, 1))
        for r, c in [(1, 1), (3, 1), (2, 4)]:
            truth[r, c, 0] = 1.0
        det = np.zeros((5, 5, 1))
        for r, c in [(1, 1), (1, 2), (3, 3), (4, 4)]:
            det[r, c, 0] = 1.0
        cfg = MatchConfig(max_dist=1.5 / np.hypot(5, 5), threshold_count=2)
        curve = evaluate_boundaries(single(det, truth), cfg)
        # greedy by distance: (1,1)<->(1,1) at 0; remaining candidates:
        # det (1,2) is sqrt(2) from truth (2,4)? no: dist((1,2),(2,4)) = sqrt(5) > 1.5
        # det (3,3) has no truth within 1.5?  dist((3,3),(3,1)) = 2 > 1.5,
        # dist((3,3),(2,4)) = sqrt(2) <= 1.5 -> matches
        # det (4,4) -> nothing within 1.5 after (2,4) is taken (dist sqrt(4)=2)
        # => matched detections 2 of 4, matched truth 2 of 3
        assert curve.precision[0] == pytest.approx(2 / 4)
        assert curve.recall[0] == pytest.approx(2 / 3)

    def test_multiple_human_maps(self):
        # a detection correct in either map counts once; recall sums over maps
        t1 = np.zeros((7, 7, 1))
        t1[3, 1, 0] = 1.0
        t2 = np.zeros((7, 7, 1))
        t2[3, 5, 0] = 1.0
        det = np.zeros((7, 7, 1))
        det[3, 1, 0] = 1.0
        cfg = MatchConfig(max_dist=1.0 / np.hypot(7, 7), threshold_count=2)
        curve = evaluate_boundaries([(det, [t1, t2])], cfg)
        assert curve.precision[0] == 1.0
        assert curve.recall[0] == pytest.approx(1 / 2)

    def test_ods_le_ois(self):
        rng = np.random.default_rng(0)
        dets = []
        for _ in range(4):
            e = rng.random((16, 16, 1))
            e[e < 0.7] = 0.0
            t = (rng.random((16, 16, 1)) > 0.9).astype(float)
            dets.append((e, [t]))
        curve = evaluate_boundaries(dets, MatchConfig(max_dist=0.1))
        assert curve.ods_f <= curve.ois_f + 1e-12

    def test_thresholded_detections_nested(self):
        rng = np.random.default_rng(1)
        e = rng.random((10, 10))
        cfg = MatchConfig()
        thresholds = np.linspace(0, 1, cfg.threshold_count)
        prev = None
        for t in thresholds:
            cur = set(map(tuple, np.argwhere(e > t)))
            if prev is not None:
                assert cur.issubset(prev)
            prev = cur

    def test_matched_counts_symmetric(self):
        from sparselabel.bench import _greedy_match

        rng = np.random.default_rng(2)
        det = rng.random((20, 2)) * 10
        truth = rng.random((15, 2)) * 10
        m_det, m_truth = _greedy_match(det, truth, 2.0)
        assert m_det.sum() == m_truth

    def test_all_zero_detector_has_zero_ap(self):
        truth = np.zeros((8, 8, 1))
        truth[4, 2:6, 0] = 1.0
        curve = evaluate_boundaries(single(np.zeros((8, 8, 1)), truth))
        assert curve.ap == 0.0
        assert curve.ods_f == 0.0

    def test_perfect_detector_has_unit_ap(self):
        truth = np.zeros((8, 8, 1))
        truth[4, 2:6, 0] = 1.0
        curve = evaluate_boundaries(single(truth.copy(), truth))
        assert curve.ap == 1.0

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(BenchError, match="mismatch"):
            evaluate_boundaries([(np.zeros((5, 5, 1)), [np.zeros((6, 5, 1))])])

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        e = rng.random((12, 12, 1))
        t = (rng.random((12, 12, 1)) > 0.85).astype(float)
        a = evaluate_boundaries(single(e, t))
        b = evaluate_boundaries(single(e, t))
        assert np.array_equal(a.precision, b.precision)
        assert a.ods_f == b.ods_f and a.ois_f == b.ois_f and a.ap == b.ap


class TestEvaluateSegmentation:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(4)
        cls = rng.integers(0, 3, size=(6, 6))
        truth = np.eye(3)[cls]
        rep = evaluate_segmentation(truth, truth)
        assert rep.overall_accuracy == 1.0
        assert np.all(rep.per_class_accuracy == 1.0)

    def test_constant_prediction_matches_class_frequency(self):
        cls = np.zeros((10, 10), dtype=int)
        cls[:3] = 1
        cls[3:4] = 2
        truth = np.eye(3)[cls]  # frequencies 0.6 / 0.3 / 0.1
        pred = np.zeros_like(truth)
        pred[:, :, 0] = 1.0
        rep = evaluate_segmentation(pred, truth)
        assert rep.overall_accuracy == pytest.approx(0.6)

    def test_confusion_matches_counting_oracle(self):
        rng = np.random.default_rng(5)
        t_cls = rng.integers(0, 3, size=(6, 6))
        p_cls = rng.integers(0, 3, size=(6, 6))
        truth = np.eye(3)[t_cls]
        pred = np.eye(3)[p_cls] + rng.random((6, 6, 3)) * 0.1
        rep = evaluate_segmentation(pred, truth)
        expected = np.zeros((3, 3), dtype=int)
        for y in range(6):
            for x in range(6):
                expected[t_cls[y, x], np.argmax(pred[y, x])] += 1
        assert np.array_equal(rep.confusion, expected)

    def test_misaligned_rejected(self):
        with pytest.raises(BenchError):
            evaluate_segmentation(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))


class TestArtifacts:
    def test_csv_and_json_outputs(self, tmp_path):
        truth = np.zeros((8, 8, 1))
        truth[4, 2:6, 0] = 1.0
        curve = evaluate_boundaries(single(truth.copy(), truth))
        csv_path = tmp_path / "pr.csv"
        json_path = tmp_path / "summary.json"
        write_pr_csv(curve, csv_path)
        write_pr_summary(curve, json_path)
        rows = csv_path.read_text().strip().splitlines()
        assert rows[0] == "threshold,precision,recall,f_measure"
        assert len(rows) == 1 + len(curve.thresholds)
        summary = json.loads(json_path.read_text())
        assert summary == {"ods": 1.0, "ois": 1.0, "ap": 1.0}

    def test_f_measure_formula(self):
        assert f_measure(0.0, 0.0) == 0.0
        assert f_measure(0.5, 1.0) == pytest.approx(2 * 0.5 * 1.0 / 1.5)
