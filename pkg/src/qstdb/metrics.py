"""Overall accuracy, average (per-class) accuracy and Cohen's kappa."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from qstdb.errors import InputError


@dataclass
class Metrics:
    confusion: np.ndarray  # rows: true class, columns: predicted class
    oa: float
    aa: float
    kappa: float

    def to_dict(self) -> dict:
        return {"oa": self.oa, "aa": self.aa, "kappa": self.kappa, "confusion": self.confusion.tolist()}

    def write_confusion_csv(self, path) -> None:
        k = self.confusion.shape[0]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["true\\pred"] + [str(c + 1) for c in range(k)])
            for i, row in enumerate(self.confusion):
                w.writerow([str(i + 1)] + [int(v) for v in row])


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """0-based class indices in, K x K counts out."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise InputError("prediction and label vectors differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise InputError("confusion matrix is empty")
    n = float(total)
    diag = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    oa = diag.sum() / n
    has = support > 0
    aa = float(np.mean(diag[has] / support[has]))
    pe = float((support * predicted).sum()) / (n * n)
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return Metrics(cm, float(oa), aa, float(kappa))


def evaluate(y_true, y_pred, num_classes: int) -> Metrics:
    if len(y_true) == 0:
        raise InputError("test set is empty")
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))
