import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lusscreen.errors import DataError
from lusscreen.metrics import (
    ConfusionMatrix,
    FoldMetrics,
    aggregate,
    classification_metrics,
    iou,
    threshold_mask,
)


class TestClassification:
    def test_perfect(self):
        cm = classification_metrics(["covid", "healthy", "covid"], ["covid", "healthy", "covid"])
        assert (cm.accuracy, cm.sensitivity, cm.specificity) == (1.0, 1.0, 1.0)

    def test_hand_counted(self):
        truths = ["covid"] * 4 + ["healthy"] * 6
        preds = ["covid"] * 3 + ["healthy"] + ["healthy"] * 4 + ["covid"] * 2
        cm = classification_metrics(preds, truths)
        assert cm == ConfusionMatrix(tp=3, fp=2, tn=4, fn=1)
        assert abs(cm.sensitivity - 0.75) < 1e-9
        assert abs(cm.specificity - 4 / 6) < 1e-9
        assert abs(cm.accuracy - 0.7) < 1e-9

    def test_indices_accepted(self):
        assert classification_metrics([0, 1], ["covid", "healthy"]).accuracy == 1.0

    def test_absent_sensitivity(self):
        cm = classification_metrics(["healthy", "covid"], ["healthy", "healthy"])
        assert cm.sensitivity is None
        assert cm.specificity == 0.5

    def test_errors(self):
        with pytest.raises(DataError):
            classification_metrics(["covid"], [])
        with pytest.raises(DataError):
            classification_metrics([], [])
        with pytest.raises(DataError):
            classification_metrics(["flu"], ["covid"])

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_accuracy_is_prevalence_weighted(self, tp, fp, tn, fn):
        cm = ConfusionMatrix(tp, fp, tn, fn)
        if cm.total == 0 or cm.sensitivity is None or cm.specificity is None:
            return
        prevalence = (tp + fn) / cm.total
        mix = prevalence * cm.sensitivity + (1 - prevalence) * cm.specificity
        assert abs(cm.accuracy - mix) < 1e-9

    @given(st.lists(st.tuples(st.sampled_from(["covid", "healthy"]), st.sampled_from(["covid", "healthy"])), min_size=1),
           st.randoms())
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = classification_metrics(*zip(*pairs))
        b = classification_metrics(*zip(*shuffled))
        assert a == b


class TestIou:
    def test_identical(self):
        m = np.zeros((4, 4), np.uint8)
        m[1:3, 1:3] = 255
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), np.uint8)
        b = np.zeros((4, 4), np.uint8)
        a[0, 0], b[3, 3] = 255, 255
        assert iou(a, b) == 0.0

    def test_both_empty(self):
        z = np.zeros((3, 3), np.uint8)
        assert iou(z, z) == 1.0

    def test_one_third(self):
        a = np.array([[255, 255], [0, 0]], np.uint8)
        b = np.array([[255, 0], [255, 0]], np.uint8)
        # intersection 1 pixel, union 3 pixels
        assert abs(iou(a, b) - 1 / 3) < 1e-9

    def test_dims_mismatch(self):
        with pytest.raises(DataError):
            iou(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(arrays(np.bool_, (5, 6)), arrays(np.bool_, (5, 6)))
    def test_symmetric_and_reflexive(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert iou(a, a) == 1.0
        assert 0.0 <= iou(a, b) <= 1.0


class TestThreshold:
    def test_inclusive_boundary(self):
        assert np.all(threshold_mask(np.full((1, 1, 3, 3), 0.5)) == 255)

    def test_zero_threshold(self):
        assert np.all(threshold_mask(np.random.default_rng(0).random((4, 4)), 0.0) == 255)

    def test_elementwise(self):
        p = np.random.default_rng(1).random((1, 1, 9, 7))
        mask = threshold_mask(p, 0.3)
        for i in range(9):
            for j in range(7):
                assert mask[i, j] == (255 if p[0, 0, i, j] >= 0.3 else 0)


def fold(i, acc_tp_tn, n=10, mean_iou=None):
    tp, tn = acc_tp_tn
    return FoldMetrics(i, ConfusionMatrix(tp=tp, fp=n // 2 - tn, tn=tn, fn=n // 2 - tp), mean_iou)


class TestAggregate:
    def test_identical_folds(self):
        rep = aggregate([fold(0, (4, 4)), fold(1, (4, 4))])
        assert rep.aggregate["accuracy"]["std"] == 0.0

    def test_two_point(self):
        rep = aggregate([fold(0, (4, 4)), fold(1, (5, 5))])  # accuracies 0.8, 1.0
        assert rep.aggregate["accuracy"]["mean"] == pytest.approx(0.9, abs=1e-12)
        assert rep.aggregate["accuracy"]["std"] == pytest.approx(math.sqrt(0.02), abs=1e-12)
        assert rep.aggregate["accuracy"]["std"] == pytest.approx(0.1414, abs=1e-4)

    def test_single_fold(self):
        rep = aggregate([fold(0, (3, 5))])
        assert rep.aggregate["accuracy"] == {"mean": 0.8, "std": None, "n": 1}

    def test_absent_excluded_with_note(self):
        f0 = FoldMetrics(0, ConfusionMatrix(tp=0, fp=1, tn=4, fn=0))
        f1 = fold(1, (5, 5))
        rep = aggregate([f0, f1])
        assert rep.aggregate["sensitivity"]["n"] == 1
        assert any("sensitivity" in note and "[0]" in note for note in rep.notes)

    def test_empty(self):
        with pytest.raises(DataError):
            aggregate([])

    def test_json_shape(self):
        d = aggregate([fold(0, (4, 4), mean_iou=0.5)]).to_dict()
        assert set(d) == {"folds", "aggregate", "notes"}
        assert d["folds"][0]["confusion"] == {"tp": 4, "fp": 1, "tn": 4, "fn": 1}
