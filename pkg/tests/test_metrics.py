"""Metric tests against per-pixel counting oracles and published values."""

import numpy as np
import pytest

from _oracles import naive_binary_metrics, naive_counts, naive_iou
from _synthetic import two_conv_model
from toolseg.dataset import load_dataset
from toolseg.metrics import (ConfusionCounts, EvaluationReport, SequenceResult,
                             accumulate, balanced_accuracy, binary_report,
                             evaluate, format_percent, iou_report,
                             report_to_csv, report_to_table)
from toolseg.model import init_parameters


def _counts(pred, gt, c):
    return accumulate(np.asarray(pred), np.asarray(gt), ConfusionCounts.zeros(c))


class TestAccumulate:
    def test_perfect_prediction(self):
        mask = np.array([[0, 1], [2, 1]])
        counts = _counts(mask, mask, 3)
        np.testing.assert_array_equal(counts.fp, 0)
        np.testing.assert_array_equal(counts.fn, 0)
        assert counts.tp.sum() == 4

    def test_all_tool_against_all_background(self):
        pred = np.ones((2, 5), dtype=int)
        gt = np.zeros((2, 5), dtype=int)
        counts = _counts(pred, gt, 2)
        assert counts.fp[1] == 10
        assert counts.fn[0] == 10
        assert counts.tp.sum() == 0

    def test_totals_invariant(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 3, (6, 6))
        gt = rng.integers(0, 3, (6, 6))
        counts = _counts(pred, gt, 3)
        totals = counts.tp + counts.fp + counts.fn + counts.tn
        np.testing.assert_array_equal(totals, 36)

    def test_two_frames_equal_concatenation(self):
        rng = np.random.default_rng(1)
        p1, g1 = rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))
        p2, g2 = rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))
        stepwise = accumulate(p2, g2, _counts(p1, g1, 3))
        merged = _counts(np.concatenate([p1, p2]), np.concatenate([g1, g2]), 3)
        assert stepwise == merged

    def test_merge_algebra(self):
        rng = np.random.default_rng(2)
        parts = [_counts(rng.integers(0, 2, (3, 3)), rng.integers(0, 2, (3, 3)), 2)
                 for _ in range(3)]
        zero = ConfusionCounts.zeros(2)
        a, b, c = parts
        assert (a + b) + c == a + (b + c)
        assert a + b == b + a
        assert a + zero == a

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            accumulate(np.zeros((2, 2), int), np.zeros((3, 3), int),
                       ConfusionCounts.zeros(2))

    def test_matches_naive_counting(self):
        rng = np.random.default_rng(3)
        for c in (2, 3):
            pred = rng.integers(0, c, (8, 8))
            gt = rng.integers(0, c, (8, 8))
            counts = _counts(pred, gt, c)
            tp, fp, fn, tn = naive_counts(pred, gt, c)
            np.testing.assert_array_equal(counts.tp, tp)
            np.testing.assert_array_equal(counts.fp, fp)
            np.testing.assert_array_equal(counts.fn, fn)
            np.testing.assert_array_equal(counts.tn, tn)


class TestBinaryReport:
    def test_published_balanced_accuracy(self):
        # sensitivity 85.7%, specificity 98.8% average to 92.25%,
        # displayed as 92.3 after half-up rounding
        bal = balanced_accuracy(0.857, 0.988)
        assert abs(bal - 0.9225) < 1e-12
        assert format_percent(bal) == "92.3"

    def test_perfect(self):
        counts = _counts(np.array([[0, 1]]), np.array([[0, 1]]), 2)
        rep = binary_report(counts)
        assert (rep.sensitivity, rep.specificity, rep.balanced_accuracy) == (1, 1, 1)

    def test_hand_counts(self):
        counts = ConfusionCounts(tp=np.array([5, 3]), fp=np.array([1, 0]),
                                 fn=np.array([0, 1]), tn=np.array([3, 5]))
        rep = binary_report(counts)
        assert rep.sensitivity == 0.75
        assert rep.specificity == 1.0
        assert rep.balanced_accuracy == 0.875

    def test_zero_denominator_is_undefined(self):
        counts = _counts(np.zeros((2, 2), int), np.zeros((2, 2), int), 2)
        rep = binary_report(counts)  # no tool pixels anywhere
        assert rep.sensitivity is None
        assert rep.specificity == 1.0
        assert rep.balanced_accuracy is None

    def test_matches_naive(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pred = rng.integers(0, 2, (8, 8))
            gt = rng.integers(0, 2, (8, 8))
            rep = binary_report(_counts(pred, gt, 2))
            sens, spec, bal = naive_binary_metrics(pred, gt)
            assert rep.sensitivity == sens
            assert rep.specificity == spec
            assert rep.balanced_accuracy == bal


class TestIoUReport:
    def test_published_row_mean(self):
        # per-class 79.6 / 68.2 / 96.5 average to 81.4 (one decimal)
        mean = (0.796 + 0.682 + 0.965) / 3
        assert format_percent(mean) == "81.4"

    def test_identical_masks(self):
        mask = np.array([[0, 1], [2, 2]])
        rep = iou_report(_counts(mask, mask, 3))
        assert rep.per_class == (1.0, 1.0, 1.0)
        assert rep.mean_iou == 1.0

    def test_hand_counts(self):
        counts = ConfusionCounts(tp=np.array([0, 2]), fp=np.array([1, 1]),
                                 fn=np.array([1, 1]), tn=np.array([2, 0]))
        rep = iou_report(counts)
        assert rep.per_class[1] == 0.5

    def test_absent_class_undefined_and_excluded(self):
        pred = np.zeros((2, 2), int)
        gt = np.zeros((2, 2), int)
        rep = iou_report(_counts(pred, gt, 3))
        assert rep.per_class == (1.0, None, None)
        assert rep.mean_iou == 1.0

    def test_matches_naive(self):
        rng = np.random.default_rng(5)
        for c in (2, 3):
            for _ in range(20):
                pred = rng.integers(0, c, (8, 8))
                gt = rng.integers(0, c, (8, 8))
                rep = iou_report(_counts(pred, gt, c))
                assert list(rep.per_class) == naive_iou(pred, gt, c)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        pred = rng.integers(0, 3, (8, 8))
        gt = rng.integers(0, 3, (8, 8))
        a = iou_report(_counts(pred, gt, 3)).per_class
        b = iou_report(_counts(gt, pred, 3)).per_class
        assert a == b

    def test_bounds(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            pred = rng.integers(0, 3, (6, 6))
            gt = rng.integers(0, 3, (6, 6))
            rep = iou_report(_counts(pred, gt, 3))
            for v in (*rep.per_class, rep.mean_iou):
                if v is not None:
                    assert 0.0 <= v <= 1.0


class TestArgmaxInvariance:
    def test_monotone_transform_preserves_metrics(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(8, 8, 3))
        gt = rng.integers(0, 3, (8, 8))
        pred_a = np.argmax(logits, axis=-1)
        pred_b = np.argmax(3.7 * logits + 2.0, axis=-1)   # strictly monotone
        pred_c = np.argmax(np.exp(logits), axis=-1)
        assert iou_report(_counts(pred_a, gt, 3)) == iou_report(_counts(pred_b, gt, 3))
        assert iou_report(_counts(pred_a, gt, 3)) == iou_report(_counts(pred_c, gt, 3))

    def test_ties_break_to_lowest_index(self):
        logits = np.zeros((2, 2, 3))
        assert np.argmax(logits, axis=-1).max() == 0


class TestEvaluate:
    def test_two_sequences_plus_aggregate(self, two_sequence_dataset_dir):
        ds = load_dataset(two_sequence_dataset_dir)
        model = two_conv_model(3)
        params = init_parameters(model, seed=0)
        report = evaluate(model, params, ds)
        assert len(report.rows) == 2
        assert {r.sequence_id for r in report.rows} == {"seq_a", "seq_b"}
        assert report.aggregate.sequence_id == "overall"

    def test_aggregate_pools_counts(self, two_sequence_dataset_dir):
        ds = load_dataset(two_sequence_dataset_dir)
        model = two_conv_model(3)
        params = init_parameters(model, seed=0)
        report = evaluate(model, params, ds)
        pooled = report.rows[0].counts + report.rows[1].counts
        assert report.aggregate.counts == pooled

    def test_pooling_differs_from_mean_of_sequences(self):
        # two unequal sequences where pooled IoU != mean of per-sequence IoU:
        # seq1: tp=1, fp=1 over 2 px; seq2: tp=98, fn=0 over 98 px
        c1 = _counts(np.array([1, 1]), np.array([1, 0]), 2)
        c2 = _counts(np.ones(98, int).reshape(1, -1), np.ones(98, int).reshape(1, -1), 2)
        iou1 = iou_report(c1).per_class[1]
        iou2 = iou_report(c2).per_class[1]
        pooled = iou_report(c1 + c2).per_class[1]
        assert pooled == 99 / 100
        assert (iou1 + iou2) / 2 == pytest.approx(0.75)
        assert pooled != (iou1 + iou2) / 2

    def test_class_count_mismatch_rejected(self, two_sequence_dataset_dir):
        ds = load_dataset(two_sequence_dataset_dir)
        model = two_conv_model(2)
        with pytest.raises(ValueError):
            evaluate(model, init_parameters(model, seed=0), ds)


class TestFormatting:
    def test_half_up_rounding(self):
        assert format_percent(0.9225) == "92.3"
        assert format_percent(0.81433333) == "81.4"
        assert format_percent(1.0) == "100.0"
        assert format_percent(None) == "undefined"
        assert format_percent(0.10049) == "10.0"
        assert format_percent(0.1005) == "10.1"

    def _report(self):
        mask = np.array([[0, 1], [2, 2]])
        counts = _counts(mask, mask, 3)
        result = SequenceResult("seq_x", counts, iou_report(counts), None)
        return EvaluationReport((result,), result,
                                {0: "background", 1: "shaft", 2: "manipulator"})

    def test_csv_layout(self):
        csv = report_to_csv(self._report())
        lines = csv.splitlines()
        assert lines[0] == "sequence,class,iou"
        assert "seq_x,background,100.0" in lines
        assert "seq_x,mean,100.0" in lines

    def test_table_presents_manipulator_shaft_background(self):
        table = report_to_table(self._report())
        header = table.splitlines()[0]
        assert header.index("manipulator") < header.index("shaft") < header.index("background")
