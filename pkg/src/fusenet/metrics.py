"""Confusion matrices, overall accuracy / per-class F1, and red/green error images."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from fusenet.autograd import IGNORE_INDEX
from fusenet.netpbm import write_ppm


@dataclass
class ConfusionMatrix:
    """Rows are reference classes, columns are predicted classes."""

    counts: np.ndarray

    @classmethod
    def empty(cls, classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((classes, classes), dtype=np.int64))

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate_confusion(pred, ref, cm: ConfusionMatrix, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    k = cm.classes
    valid = ref != ignore_index
    p, r = pred[valid].astype(np.int64), ref[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= k or r.min() < 0 or r.max() >= k):
        raise ValueError(f"class index outside [0, {k - 1}]")
    counts = np.bincount(r * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + counts)


@dataclass
class MetricsReport:
    overall_accuracy: float
    precision: list[float | None]
    recall: list[float | None]
    f1: list[float | None]
    reference_counts: list[int]
    predicted_counts: list[int]
    class_names: list[str] = field(default_factory=list)
    total: int = 0

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "total_pixels": self.total,
            "classes": [
                {"name": name, "precision": p, "recall": r, "f1": f,
                 "reference_pixels": rc, "predicted_pixels": pc}
                for name, p, r, f, rc, pc in zip(self.class_names, self.precision, self.recall,
                                                 self.f1, self.reference_counts, self.predicted_counts)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "reference_pixels", "predicted_pixels"])

        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"

        for name, p, r, f, rc, pc in zip(self.class_names, self.precision, self.recall, self.f1,
                                         self.reference_counts, self.predicted_counts):
            w.writerow([name, fmt(p), fmt(r), fmt(f), rc, pc])
        w.writerow(["overall", "", "", "", self.total, self.total])
        w.writerow(["overall_accuracy", fmt(self.overall_accuracy), "", "", "", ""])
        return buf.getvalue()


def _ratio(num, den):
    return None if den == 0 else num / den


def summarize(cm: ConfusionMatrix, class_names=None) -> MetricsReport:
    """OA plus per-class precision/recall/F1; zero denominators give ``None`` rather than NaN."""
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts)
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    precision = [_ratio(int(diag[c]), int(cols[c])) for c in range(cm.classes)]
    recall = [_ratio(int(diag[c]), int(rows[c])) for c in range(cm.classes)]
    f1 = []
    for p, r in zip(precision, recall):
        if p is None or r is None:
            f1.append(None)
        else:
            f1.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    names = list(class_names) if class_names is not None else [str(c) for c in range(cm.classes)]
    return MetricsReport(int(diag.sum()) / total, precision, recall, f1,
                         [int(x) for x in rows], [int(x) for x in cols], names, total)


def render_error_image(pred, ref, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """HxWx3 uint8: green where correct, red where wrong, black where the reference is ignored."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    rgb = np.zeros(ref.shape + (3,), dtype=np.uint8)
    valid = ref != ignore_index
    rgb[valid & (pred == ref), 1] = 255
    rgb[valid & (pred != ref), 0] = 255
    return rgb


def write_error_image(path, pred, ref, ignore_index: int = IGNORE_INDEX) -> None:
    write_ppm(path, render_error_image(pred, ref, ignore_index))
