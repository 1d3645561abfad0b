"""Metric suite: AUC oracles, macro averaging, confusion matrices."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfdistill.errors import DomainError
from selfdistill.metrics import confusion_matrix, macro_f1, macro_metrics, roc_auc_binary

from oracles import auc_pair_counting, auc_trapezoid


class TestBinaryAuc:
    def test_perfect_separation(self):
        assert roc_auc_binary([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties_half(self):
        assert roc_auc_binary([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_interleaved_pair_counting(self):
        scores = [0.9, 0.8, 0.3, 0.2]
        labels = [1, 0, 1, 0]
        assert roc_auc_binary(scores, labels) == 0.75
        assert roc_auc_binary(scores, labels) == auc_pair_counting(scores, labels)

    def test_one_class_rejected(self):
        with pytest.raises(DomainError):
            roc_auc_binary([0.1, 0.2], [1, 1])

    def test_rank_equals_trapezoid_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(4, 40))
            scores = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=n)  # force ties
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                continue
            assert abs(roc_auc_binary(scores, labels) - auc_trapezoid(scores, labels)) < 1e-9

    @given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 1)), min_size=4, max_size=30))
    @settings(max_examples=80, deadline=None)
    def test_monotone_transform_invariance_and_negation(self, rows):
        scores = np.array([r[0] for r in rows])
        labels = np.array([r[1] for r in rows])
        if labels.sum() in (0, len(labels)):
            return
        base = roc_auc_binary(scores, labels)
        squashed = roc_auc_binary(np.tanh(scores) * 3 + 1, labels)
        assert abs(base - squashed) < 1e-12
        negated = roc_auc_binary(-scores, labels)
        assert abs(base + negated - 1.0) < 1e-12


class TestConfusion:
    def test_identity_for_perfect_predictions(self):
        labels = np.array([0, 1, 2, 0, 1, 2])
        out = confusion_matrix(labels, labels, 3)
        np.testing.assert_allclose(out, np.eye(3))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 4, size=100)
        preds = rng.integers(0, 4, size=100)
        out = confusion_matrix(labels, preds, 4)
        np.testing.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-9)
        assert (out >= 0).all()

    def test_absent_class_row_stays_zero(self):
        out = confusion_matrix(np.array([0, 0]), np.array([0, 1]), 3)
        np.testing.assert_array_equal(out[2], np.zeros(3))


class TestMacroMetrics:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2] * 4)
        probs = np.zeros((12, 3))
        probs[np.arange(12), labels] = 1.0
        entry = macro_metrics(probs, labels)
        assert entry.auc == 1.0 and entry.accuracy == 1.0 and entry.f1 == 1.0
        np.testing.assert_allclose(entry.confusion, np.eye(3))

    def test_two_class_macro_equals_binary(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        p1 = rng.uniform(size=50)
        probs = np.stack([1 - p1, p1], axis=1)
        entry = macro_metrics(probs, labels)
        assert entry.auc == roc_auc_binary(p1, labels)

    def test_uniform_probs_argmax_ties_to_lowest_index(self):
        labels = np.array([0, 1, 1, 0])
        probs = np.full((4, 2), 0.5)
        entry = macro_metrics(probs, labels)
        np.testing.assert_allclose(entry.confusion[:, 0], np.ones(2))
        assert entry.accuracy == 0.5

    def test_absent_class_excluded_with_warning(self):
        labels = np.array([0, 1, 0, 1])
        probs = np.full((4, 3), 1 / 3)
        probs[:, 0] = [0.5, 0.1, 0.6, 0.2]
        with pytest.warns(UserWarning, match="class 2 absent"):
            entry = macro_metrics(probs, labels, n_classes=3)
        assert np.isfinite(entry.auc)

    def test_f1_rules(self):
        # class 2 has no samples and no predictions: excluded from the mean
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 1, 1, 1])
        # per class: c0 tp=1 fp=0 fn=1 -> 2/3; c1 tp=2 fp=1 fn=0 -> 4/5
        assert abs(macro_f1(labels, preds, 3) - np.mean([2 / 3, 4 / 5])) < 1e-12
        # a class with samples but no correct predictions contributes zero
        labels = np.array([0, 1])
        preds = np.array([1, 0])
        assert macro_f1(labels, preds, 2) == 0.0
