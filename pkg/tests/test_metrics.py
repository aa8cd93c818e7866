from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esk.metrics import evaluate


def brute_force_report(y_true, y_pred, k):
    conf = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        conf[t][p] += 1
    recalls, precisions, f1s = [], [], []
    for c in range(k):
        row = sum(conf[c])
        col = sum(conf[r][c] for r in range(k))
        r = conf[c][c] / row if row else None
        p = conf[c][c] / col if col else None
        if r is not None:
            recalls.append(r)
        if p is not None:
            precisions.append(p)
        pv = p if p is not None else 0.0
        rv = r if r is not None else 0.0
        f1s.append(2 * pv * rv / (pv + rv) if pv + rv > 0 else 0.0)
    return (
        sum(recalls) / len(recalls),
        sum(precisions) / len(precisions) if precisions else 0.0,
        sum(f1s) / k,
    )


class TestEvaluate:
    def test_perfect_predictions(self):
        for k in (2, 3, 5):
            y = list(range(k)) * 3
            report = evaluate(y, y, k)
            assert report.uar == 1.0
            assert report.macro_precision == 1.0
            assert report.macro_f1 == 1.0

    def test_hand_enumerated_example(self):
        report = evaluate([0, 1, 1], [0, 0, 1], 2)
        assert report.uar == 0.75
        assert np.array_equal(report.confusion, [[1, 0], [1, 1]])

    def test_all_one_class_on_balanced_truths(self):
        report = evaluate([0, 1, 2] * 4, [0] * 12, 3)
        assert report.uar == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_confusion_sums_to_n(self):
        rng = np.random.default_rng(0)
        y_true = rng.integers(0, 4, 50)
        y_pred = rng.integers(0, 4, 50)
        report = evaluate(y_true, y_pred, 4)
        assert report.confusion.sum() == 50

    def test_matches_brute_force_loop(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            y_true = rng.integers(0, 3, 30)
            y_pred = rng.integers(0, 3, 30)
            report = evaluate(y_true, y_pred, 3)
            uar, prec, f1 = brute_force_report(y_true.tolist(), y_pred.tolist(), 3)
            assert report.uar == pytest.approx(uar, abs=1e-12)
            assert report.macro_precision == pytest.approx(prec, abs=1e-12)
            assert report.macro_f1 == pytest.approx(f1, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        y_true = rng.integers(0, 3, 24)
        y_pred = rng.integers(0, 3, 24)
        perm = rng.permutation(3)
        base = evaluate(y_true, y_pred, 3)
        permuted = evaluate(perm[y_true], perm[y_pred], 3)
        assert permuted.uar == pytest.approx(base.uar, abs=1e-12)

    def test_uar_equals_accuracy_on_balanced_truths(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            y_true = rng.permutation(np.repeat(np.arange(3), 10))
            y_pred = rng.integers(0, 3, 30)
            report = evaluate(y_true, y_pred, 3)
            accuracy = float(np.mean(y_true == y_pred))
            assert report.uar == pytest.approx(accuracy, abs=1e-12)

    def test_never_predicted_class_excluded_from_precision(self):
        # class 2 never predicted: precision averages over classes 0 and 1 only
        report = evaluate([0, 1, 2], [0, 1, 1], 3)
        assert report.macro_precision == pytest.approx((1.0 + 0.5) / 2, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError, match="equal"):
            evaluate([0, 1], [0], 2)
        with pytest.raises(ValueError, match="outside"):
            evaluate([0, 3], [0, 1], 2)
        with pytest.raises(ValueError, match="equal"):
            evaluate([], [], 2)
