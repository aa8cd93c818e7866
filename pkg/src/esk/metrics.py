"""Confusion-matrix evaluation: UAR, macro precision, macro F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows = truth, cols = prediction
    uar: float
    macro_precision: float
    macro_f1: float


def evaluate(y_true, y_pred, n_classes: int) -> EvalReport:
    """Score predictions against truths over n_classes labels.

    UAR averages per-class recall over classes that occur in y_true;
    macro precision averages over classes that were predicted at least
    once; macro F1 averages over all classes with f1 = 0 when a class has
    neither precision nor recall.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError(
            f"need equal nonempty label vectors, got {y_true.size} truths "
            f"and {y_pred.size} predictions"
        )
    for name, arr in (("truth", y_true), ("prediction", y_pred)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} labels outside [0, {n_classes})")

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)

    diag = np.diag(confusion).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)

    recalls = np.divide(diag, row, out=np.zeros(n_classes), where=row > 0)
    precisions = np.divide(diag, col, out=np.zeros(n_classes), where=col > 0)
    uar = float(recalls[row > 0].mean())
    macro_precision = float(precisions[col > 0].mean()) if (col > 0).any() else 0.0

    pr_sum = precisions + recalls
    f1 = np.divide(
        2.0 * precisions * recalls, pr_sum, out=np.zeros(n_classes), where=pr_sum > 0
    )
    return EvalReport(confusion, uar, macro_precision, float(f1.mean()))
