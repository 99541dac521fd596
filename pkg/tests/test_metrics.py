"""Confusion matrix, per-class metrics, averages and ROC-AUC against independent oracles."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualstream.errors import DataError
from dualstream.metrics import (
    ConfusionMatrix,
    EvalReport,
    accuracy,
    binary_auc,
    classification_report,
    confusion,
    per_class_prf,
    report_from_confusion,
    roc_auc_ovr,
    roc_curve,
)

REFERENCE_CM = np.array([[64, 1, 1], [2, 29, 0], [0, 0, 20]])


def labels_from_cm(cm):
    y_true, y_pred = [], []
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            y_true += [i] * int(cm[i, j])
            y_pred += [j] * int(cm[i, j])
    return np.array(y_true), np.array(y_pred)


def pairwise_auc(scores, positive):
    pos, neg = scores[positive], scores[~positive]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size)


class TestConfusion:
    def test_reference_matrix_from_labels(self):
        y_true, y_pred = labels_from_cm(REFERENCE_CM)
        cm = confusion(y_true, y_pred)
        assert np.array_equal(cm.counts, REFERENCE_CM)
        assert cm.total == 117 and np.trace(cm.counts) == 113
        assert cm.counts[1, 0] == 2 and cm.counts[0, 1] == 1 and cm.counts[0, 2] == 1

    def test_perfect_is_diagonal(self):
        cm = confusion([0, 1, 2, 2], [0, 1, 2, 2])
        assert np.array_equal(cm.counts, np.diag([1, 1, 2]))

    def test_empty(self):
        assert not confusion([], []).counts.any()

    def test_errors(self):
        with pytest.raises(DataError):
            confusion([0, 1], [0])
        with pytest.raises(DataError):
            confusion([0, 3], [0, 1])


class TestPerClass:
    def test_reference_values(self):
        m = per_class_prf(ConfusionMatrix(REFERENCE_CM))
        np.testing.assert_allclose(m.precision, [64 / 66, 29 / 30, 20 / 21], rtol=1e-15)
        np.testing.assert_allclose(m.recall, [64 / 66, 29 / 31, 1.0], rtol=1e-15)
        assert np.round(m.precision, 4).tolist() == [0.9697, 0.9667, 0.9524]
        assert np.round(m.recall, 4).tolist() == [0.9697, 0.9355, 1.0]
        assert np.round(m.f1, 3).tolist() == [0.970, 0.951, 0.976]
        assert m.support.tolist() == [66, 31, 20]

    def test_degenerate_class(self):
        m = per_class_prf(ConfusionMatrix(np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])))
        assert (m.precision[2], m.recall[2], m.f1[2]) == (0.0, 0.0, 0.0)
        assert m.degenerate["precision"][2] and m.degenerate["recall"][2] and m.degenerate["f1"][2]
        assert not m.degenerate["precision"][:2].any()

    def test_diagonal_all_ones(self):
        m = per_class_prf(ConfusionMatrix(np.diag([4, 5, 6])))
        assert np.all(m.precision == 1) and np.all(m.recall == 1) and np.all(m.f1 == 1)


class TestAggregates:
    def test_reference_accuracy_and_macro(self):
        r = report_from_confusion(ConfusionMatrix(REFERENCE_CM))
        assert r.accuracy == 113 / 117 and f"{100 * r.accuracy:.2f}" == "96.58"
        assert round(r.macro_f1, 4) == 0.9654

    def test_single_class_all_correct(self):
        assert accuracy(ConfusionMatrix(np.array([[5, 0], [0, 0]]))) == 1.0

    def test_empty_accuracy(self):
        with pytest.raises(DataError):
            accuracy(ConfusionMatrix(np.zeros((3, 3), dtype=int)))

    @settings(max_examples=100)
    @given(st.lists(st.integers(0, 30), min_size=9, max_size=9).filter(lambda v: sum(v) > 0))
    def test_weighted_recall_is_accuracy(self, values):
        r = report_from_confusion(ConfusionMatrix(np.array(values).reshape(3, 3)))
        assert abs(r.weighted["recall"] - r.accuracy) < 1e-12
        for row in (r.macro, r.weighted):
            assert all(0.0 <= v <= 1.0 for v in row.values())
        assert r.macro["f1"] == pytest.approx(np.mean(r.per_class.f1), abs=1e-15)

    @settings(max_examples=50)
    @given(st.lists(st.integers(0, 30), min_size=9, max_size=9).filter(lambda v: sum(v) > 0), st.permutations([0, 1, 2]))
    def test_class_permutation(self, values, perm):
        cm = np.array(values).reshape(3, 3)
        perm = np.array(perm)
        a = report_from_confusion(ConfusionMatrix(cm))
        b = report_from_confusion(ConfusionMatrix(cm[np.ix_(perm, perm)]))
        np.testing.assert_allclose(b.per_class.f1, a.per_class.f1[perm], atol=1e-15)
        assert b.macro["f1"] == pytest.approx(a.macro["f1"], abs=1e-12)


class TestAuc:
    def test_rank_equals_pairwise_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 501))
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding injects ties
            positive = rng.random(n) < rng.uniform(0.1, 0.9)
            if positive.all() or not positive.any():
                positive[0] = not positive[0]
            assert binary_auc(scores, positive) == pairwise_auc(scores, positive)

    def test_hand_case_with_tie(self):
        scores = np.array([0.9, 0.9, 0.5, 0.1, 0.1, 0.5])
        positive = np.array([True, True, True, False, False, False])
        # 9 pairs: 8 correctly ordered, 1 tie -> 8.5 / 9
        assert binary_auc(scores, positive) == 8.5 / 9 == pairwise_auc(scores, positive)

    def test_perfect_separation(self):
        y = np.array([0, 0, 1, 1, 2, 2])
        per, macro = roc_auc_ovr(np.eye(3)[y], y)
        assert per == [1.0, 1.0, 1.0] and macro == 1.0

    def test_label_independent_scores(self):
        rng = np.random.default_rng(7)
        y = rng.integers(0, 3, 2000)
        scores = rng.dirichlet(np.ones(3), 2000)
        _, macro = roc_auc_ovr(scores, y)
        assert 0.45 <= macro <= 0.55

    def test_absent_class_excluded_with_warning(self):
        y = np.array([0, 1, 0, 1])
        scores = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.3, 0.6, 0.1]])
        with pytest.warns(UserWarning, match="class 2"):
            per, macro = roc_auc_ovr(scores, y)
        assert per[2] is None and macro == 1.0

    def test_roc_curve_area_matches_auc(self):
        rng = np.random.default_rng(3)
        scores = np.round(rng.random(300), 2)
        positive = rng.random(300) < 0.4
        fpr, tpr = roc_curve(scores, positive)
        assert fpr[0] == tpr[0] == 0.0 and fpr[-1] == tpr[-1] == 1.0
        assert np.trapezoid(tpr, fpr) == pytest.approx(binary_auc(scores, positive), abs=1e-12)


class TestReport:
    def test_render_matches_table_layout(self):
        text = report_from_confusion(ConfusionMatrix(REFERENCE_CM)).render()
        lines = text.splitlines()
        assert lines[1].split() == ["Benign", "0.97", "0.97", "0.970", "66"]
        assert lines[2].split() == ["Malignant", "0.97", "0.94", "0.951", "31"]
        assert lines[3].split() == ["Normal", "0.95", "1.00", "0.976", "20"]
        # the macro F1 cell renders 0.965: the footer value 0.9654 rounds down at three places
        assert lines[4].split() == ["Macro", "avg", "0.96", "0.97", "0.965", "117"]
        assert lines[5].split() == ["Weighted", "0.97", "0.97", "0.966", "117"]
        assert "Accuracy: 96.58%" in lines[-1] and "Macro F1: 0.9654" in lines[-1]

    def test_perfect_report(self):
        r = classification_report([0, 1, 2], [0, 1, 2], np.eye(3))
        assert r.accuracy == 1.0 and r.macro_f1 == 1.0 and r.macro_auc == 1.0

    def test_csv_roundtrip(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 3, 60)
        scores = rng.dirichlet(np.ones(3), 60)
        r = classification_report(y, scores.argmax(axis=1), scores)
        back = EvalReport.from_csv(r.to_csv())
        assert np.array_equal(back.confusion.counts, r.confusion.counts)
        assert back.accuracy == r.accuracy and back.macro == r.macro and back.weighted == r.weighted
        assert back.auc_per_class == r.auc_per_class and back.macro_auc == r.macro_auc
        np.testing.assert_array_equal(back.per_class.f1, r.per_class.f1)

    def test_csv_keeps_degenerate_flags(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r = classification_report([0, 0, 1], [0, 0, 1], np.array([[0.9, 0.1, 0], [0.8, 0.2, 0], [0.1, 0.9, 0]]))
        back = EvalReport.from_csv(r.to_csv())
        assert back.per_class.degenerate["precision"][2] and back.auc_per_class[2] is None
