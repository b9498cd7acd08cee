"""Metric checks against per-pixel set arithmetic written from scratch."""

import json
import math

import numpy as np
import numpy.testing as npt
import pytest

from segrl.metrics import (
    ConfusionCounts,
    MetricsReport,
    accumulate,
    dice_coefficient,
    dice_per_class,
    evaluate_pairs,
    iou_per_class,
    mean_iou,
    report_from_counts,
)


def set_metrics_reference(pred, gt, num_classes):
    """Per-class IoU/Dice via boolean set arithmetic; ignores absent classes."""
    iou, dice = {}, {}
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        inter = int(np.logical_and(p, g).sum())
        union = int(np.logical_or(p, g).sum())
        if union == 0:
            continue
        iou[c] = inter / union
        dice[c] = 2 * inter / (int(p.sum()) + int(g.sum()))
    return iou, dice


class TestConfusionCounts:
    def test_counts_match_pair_loop(self):
        rng = np.random.default_rng(2)
        pred = rng.integers(0, 3, size=(10, 10))
        gt = rng.integers(0, 3, size=(10, 10))
        counts = accumulate(ConfusionCounts(3), pred, gt)
        expected = np.zeros((3, 3), dtype=np.int64)
        for g, p in zip(gt.ravel(), pred.ravel()):
            expected[g, p] += 1
        npt.assert_array_equal(counts.matrix, expected)
        assert counts.num_samples == 1

    def test_tp_fp_fn_identities(self):
        rng = np.random.default_rng(8)
        pred = rng.integers(0, 4, size=(12, 12))
        gt = rng.integers(0, 4, size=(12, 12))
        counts = accumulate(ConfusionCounts(4), pred, gt)
        for c in range(4):
            tp = int(np.logical_and(pred == c, gt == c).sum())
            fp = int(np.logical_and(pred == c, gt != c).sum())
            fn = int(np.logical_and(pred != c, gt == c).sum())
            assert counts.tp[c] == tp
            assert counts.fp[c] == fp
            assert counts.fn[c] == fn

    def test_merge_is_addition(self):
        rng = np.random.default_rng(4)
        a = accumulate(ConfusionCounts(3), rng.integers(0, 3, (5, 5)),
                       rng.integers(0, 3, (5, 5)))
        b = accumulate(ConfusionCounts(3), rng.integers(0, 3, (5, 5)),
                       rng.integers(0, 3, (5, 5)))
        merged = a + b
        npt.assert_array_equal(merged.matrix, a.matrix + b.matrix)
        assert merged.num_samples == 2
        with pytest.raises(ValueError):
            a.merge(ConfusionCounts(4))

    def test_accumulate_rejects_bad_masks(self):
        counts = ConfusionCounts(3)
        with pytest.raises(ValueError):
            accumulate(counts, np.zeros((2, 2), int), np.zeros((3, 3), int))
        with pytest.raises(ValueError):
            accumulate(counts, np.full((2, 2), 3), np.zeros((2, 2), int))
        with pytest.raises(ValueError):
            accumulate(counts, np.zeros((2, 2), int), np.full((2, 2), -1))


class TestIoUDice:
    def test_random_pairs_match_set_arithmetic(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            k = int(rng.integers(2, 6))
            pred = rng.integers(0, k, size=(8, 8))
            gt = rng.integers(0, k, size=(8, 8))
            counts = accumulate(ConfusionCounts(k), pred, gt)
            iou_ref, dice_ref = set_metrics_reference(pred, gt, k)
            iou = iou_per_class(counts)
            dice = dice_per_class(counts)
            assert iou.keys() == iou_ref.keys()
            assert dice.keys() == dice_ref.keys()
            for c in iou_ref:
                assert iou[c] == pytest.approx(iou_ref[c], abs=1e-12)
                assert dice[c] == pytest.approx(dice_ref[c], abs=1e-12)

    def test_dice_iou_consistency_identity(self):
        # Dice = 2 IoU / (1 + IoU) holds per class by algebra on tp/fp/fn
        rng = np.random.default_rng(19)
        for _ in range(100):
            k = int(rng.integers(2, 5))
            counts = accumulate(ConfusionCounts(k), rng.integers(0, k, (9, 9)),
                                rng.integers(0, k, (9, 9)))
            iou = iou_per_class(counts)
            dice = dice_per_class(counts)
            for c, v in iou.items():
                assert dice[c] == pytest.approx(2 * v / (1 + v), abs=1e-12)

    def test_perfect_and_disjoint_predictions(self):
        gt = np.arange(16).reshape(4, 4) % 2
        counts = accumulate(ConfusionCounts(2), gt, gt)
        assert iou_per_class(counts) == {0: 1.0, 1: 1.0}
        counts = accumulate(ConfusionCounts(2), 1 - gt, gt)
        assert iou_per_class(counts) == {0: 0.0, 1: 0.0}

    def test_absent_class_excluded_from_mean(self):
        # class 2 never occurs in pred or gt: it must not drag the mean down
        pred = np.zeros((4, 4), dtype=np.int64)
        gt = np.zeros((4, 4), dtype=np.int64)
        gt[0, 0] = 1
        counts = accumulate(ConfusionCounts(3), pred, gt)
        iou = iou_per_class(counts)
        assert sorted(iou) == [0, 1]
        assert mean_iou(iou) == pytest.approx((15 / 16 + 0.0) / 2)

    def test_mean_of_empty_map_is_nan(self):
        assert math.isnan(mean_iou({}))
        assert math.isnan(dice_coefficient(ConfusionCounts(3)))


class TestReports:
    def test_report_fields_are_consistent(self):
        rng = np.random.default_rng(23)
        counts = ConfusionCounts(4)
        for _ in range(5):
            accumulate(counts, rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8)))
        report = report_from_counts(counts)
        assert report.num_samples == 5
        assert report.mean_iou == pytest.approx(mean_iou(report.per_class_iou))
        assert report.dice == pytest.approx(
            sum(report.per_class_dice.values()) / len(report.per_class_dice))

    def test_json_round_trip_and_table(self, tmp_path):
        report = MetricsReport(per_class_iou={0: 0.5, 1: 0.25}, mean_iou=0.375,
                               dice=0.5, num_samples=3,
                               per_class_dice={0: 2 / 3, 1: 0.4})
        jp = tmp_path / "metrics.json"
        tp = tmp_path / "metrics.txt"
        report.save(jp, tp)
        data = json.loads(jp.read_text())
        assert data["mean_iou"] == 0.375
        assert data["per_class_iou"]["1"] == 0.25
        table = tp.read_text()
        assert "class 0" in table and "mean" in table
        # one row per class plus header, separators, and the mean row
        assert len(table.strip().splitlines()) == 6

    def test_evaluate_pairs_dataset_mode_pools_counts(self):
        rng = np.random.default_rng(29)
        pairs = [(rng.integers(0, 3, (6, 6)), rng.integers(0, 3, (6, 6)))
                 for _ in range(4)]
        report = evaluate_pairs(pairs, 3)
        pooled = ConfusionCounts(3)
        for pred, gt in pairs:
            accumulate(pooled, pred, gt)
        assert report.mean_iou == pytest.approx(mean_iou(iou_per_class(pooled)))
        assert report.num_samples == 4

    def test_evaluate_pairs_per_image_mode_averages(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        perfect = (gt.copy(), gt.copy())
        half = (np.concatenate([np.zeros((2, 4), int), np.ones((2, 4), int)]), gt)
        report = evaluate_pairs([perfect, half], 2, mode="per_image")
        # image 1 scores 1.0; image 2 scores mean(0.5, 0) = 0.25
        assert report.mean_iou == pytest.approx((1.0 + 0.25) / 2)
        with pytest.raises(ValueError):
            evaluate_pairs([], 2, mode="per_image")
        with pytest.raises(ValueError):
            evaluate_pairs([perfect], 2, mode="bogus")
