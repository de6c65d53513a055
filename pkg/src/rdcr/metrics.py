"""Accuracy bookkeeping, Best/Last summaries and pseudo-label confusion audits."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

METRICS_COLUMNS = ("epoch", "lr", "w_s", "w_c", "w_r", "loss_sup", "loss_cons", "loss_rot",
                   "loss_total", "val_acc", "test_acc_student", "test_acc_teacher",
                   "test_acc_swa", "pseudo_acc")
ROLES = {"student": "test_acc_student", "teacher": "test_acc_teacher", "swa": "test_acc_swa"}


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    lr: float
    w_s: float
    w_c: float
    w_r: float
    loss_sup: float
    loss_cons: float
    loss_rot: float
    loss_total: float
    val_acc: float
    test_acc_student: float
    test_acc_teacher: float
    test_acc_swa: float
    pseudo_acc: float


assert tuple(f.name for f in fields(MetricsRecord)) == METRICS_COLUMNS


def accuracy(predictions, labels) -> float:
    """Percentage of matching entries."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * float(np.count_nonzero(predictions == labels)) / labels.size


def best_last(log: Sequence[MetricsRecord], which: str = "teacher") -> tuple[float, float]:
    """Highest test accuracy over the run and the final epoch's test accuracy."""
    if not log:
        raise ValueError("empty metrics log")
    col = ROLES[which]
    vals = [getattr(r, col) for r in log]
    return float(np.nanmax(vals)), float(vals[-1])


@dataclass
class ConfusionMatrix:
    """Rows are true labels, columns predicted (pseudo) labels."""

    counts: np.ndarray

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def ratios(self) -> np.ndarray:
        """Row-normalized percentages; empty rows stay zero."""
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(100.0 * self.counts, totals, out=np.zeros_like(self.counts, dtype=float),
                         where=totals > 0)

    def diagonal_mean(self) -> float:
        """Mean of the diagonal ratios over classes that occur."""
        present = self.counts.sum(axis=1) > 0
        return float(np.diag(self.ratios)[present].mean())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"pred_{j}" for j in range(self.K)])
        for row in self.ratios:
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def pseudo_confusion(y_pseudo, y_true, K: int) -> ConfusionMatrix:
    y_pseudo = np.asarray(y_pseudo, dtype=np.int64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if y_pseudo.shape != y_true.shape:
        raise ValueError("label vectors differ in length")
    for y in (y_pseudo, y_true):
        if y.size and (y.min() < 0 or y.max() >= K):
            raise ValueError(f"labels must lie in [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (y_true, y_pseudo), 1)
    return ConfusionMatrix(counts)


def write_metrics_csv(log: Sequence[MetricsRecord], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for rec in log:
        w.writerow([str(v) if isinstance(v, int) else repr(float(v)) for v in astuple(rec)])
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["epoch"]), *(float(r[c]) for c in METRICS_COLUMNS[1:])) for r in rows]
