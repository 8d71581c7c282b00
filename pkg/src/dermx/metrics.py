"""Confusion matrix and classification-report metrics.

All metrics are computed from a multiclass confusion matrix whose rows are
true classes and columns predicted classes, in the canonical label order.
Precision, recall and F1 use the one-vs-rest TP/FP/FN/TN reduction; the
report's accuracy is overall multiclass accuracy (trace / total). Weighted
averages are support-weighted means of the per-class values.

Zero-denominator ratios evaluate to 0 and are flagged as degenerate instead
of raising.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .labels import CLASS_NAMES, NUM_CLASSES


class MetricValue(float):
    """A float that remembers whether its denominator was zero."""

    degenerate: bool

    def __new__(cls, value: float, degenerate: bool = False):
        obj = super().__new__(cls, value)
        obj.degenerate = degenerate
        return obj


def _ratio(num: float, den: float) -> MetricValue:
    if den == 0:
        return MetricValue(0.0, degenerate=True)
    return MetricValue(num / den)


def confusion_matrix(y_true, y_pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Count matrix with counts[i, j] = #{k : y_true[k]=i and y_pred[k]=j}."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape or t.ndim != 1:
        raise ValidationError(
            f"y_true and y_pred must be 1-d and equal length, got {t.shape} vs {p.shape}"
        )
    if t.size:
        if t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
            raise ValidationError(f"class indices must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t.astype(np.int64), p.astype(np.int64)), 1)
    return cm


@dataclass(frozen=True)
class PerClassCounts:
    """One-vs-rest counts for a single class."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def per_class_counts(cm: np.ndarray, c: int) -> PerClassCounts:
    cm = np.asarray(cm)
    tp = int(cm[c, c])
    fp = int(cm[:, c].sum() - tp)
    fn = int(cm[c, :].sum() - tp)
    tn = int(cm.sum() - tp - fp - fn)
    return PerClassCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def precision(counts: PerClassCounts) -> MetricValue:
    return _ratio(counts.tp, counts.tp + counts.fp)


def recall(counts: PerClassCounts) -> MetricValue:
    return _ratio(counts.tp, counts.tp + counts.fn)


def f1(precision_value: float, recall_value: float) -> MetricValue:
    return _ratio(2.0 * precision_value * recall_value, precision_value + recall_value)


def accuracy(cm: np.ndarray) -> MetricValue:
    """Overall multiclass accuracy, trace / total."""
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total == 0:
        raise ValidationError("empty confusion matrix has no accuracy")
    return MetricValue(float(np.trace(cm)) / total)


def per_class_accuracy(counts: PerClassCounts) -> MetricValue:
    """One-vs-rest accuracy (TP+TN)/total for a single class."""
    return _ratio(counts.tp + counts.tn, counts.total)


@dataclass(frozen=True)
class ClassMetrics:
    precision: MetricValue
    recall: MetricValue
    f1: MetricValue
    accuracy: MetricValue
    support: int

    @property
    def degenerate(self) -> bool:
        return self.precision.degenerate or self.recall.degenerate or self.f1.degenerate


@dataclass(frozen=True)
class ClassificationReport:
    """Per-class and support-weighted metrics for one evaluated model."""

    per_class: dict[str, ClassMetrics]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": float(self.accuracy),
            "weighted": {
                "precision": float(self.weighted_precision),
                "recall": float(self.weighted_recall),
                "f1": float(self.weighted_f1),
            },
            "per_class": {
                name: {
                    "precision": float(m.precision),
                    "recall": float(m.recall),
                    "f1": float(m.f1),
                    "accuracy": float(m.accuracy),
                    "support": m.support,
                    "degenerate": m.degenerate,
                }
                for name, m in self.per_class.items()
            },
            "confusion_matrix": self.confusion.tolist(),
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def to_csv(self, path: str | Path) -> None:
        """Per-class rows plus a weighted-average row, Table-style columns."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["Class", "Accuracy", "Precision", "Recall", "F1-Score", "Support"])
            for name, m in self.per_class.items():
                writer.writerow(
                    [name, f"{m.accuracy:.6f}", f"{m.precision:.6f}", f"{m.recall:.6f}",
                     f"{m.f1:.6f}", m.support]
                )
            writer.writerow(
                ["weighted avg", f"{self.accuracy:.6f}", f"{self.weighted_precision:.6f}",
                 f"{self.weighted_recall:.6f}", f"{self.weighted_f1:.6f}",
                 int(self.confusion.sum())]
            )


def weighted_report(cm: np.ndarray, class_names=CLASS_NAMES) -> ClassificationReport:
    """Build the full classification report from a confusion matrix."""
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total == 0:
        raise ValidationError("cannot build a report from an empty confusion matrix")

    per_class: dict[str, ClassMetrics] = {}
    w_p = w_r = w_f = 0.0
    for c, name in enumerate(class_names):
        counts = per_class_counts(cm, c)
        p = precision(counts)
        r = recall(counts)
        f = f1(p, r)
        support = int(cm[c, :].sum())
        per_class[name] = ClassMetrics(
            precision=p, recall=r, f1=f, accuracy=per_class_accuracy(counts), support=support
        )
        w_p += support * p
        w_r += support * r
        w_f += support * f

    return ClassificationReport(
        per_class=per_class,
        weighted_precision=w_p / total,
        weighted_recall=w_r / total,
        weighted_f1=w_f / total,
        accuracy=float(accuracy(cm)),
        confusion=cm,
    )


def report_from_predictions(y_true, y_pred, num_classes: int = NUM_CLASSES) -> ClassificationReport:
    cm = confusion_matrix(y_true, y_pred, num_classes=num_classes)
    names = CLASS_NAMES if num_classes == NUM_CLASSES else tuple(
        f"class_{i}" for i in range(num_classes)
    )
    return weighted_report(cm, class_names=names)


def confusion_to_csv(cm: np.ndarray, path: str | Path, class_names=CLASS_NAMES) -> None:
    cm = np.asarray(cm)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, cm):
            writer.writerow([name, *row.tolist()])


def render_confusion_heatmap(cm: np.ndarray, path: str | Path, class_names=CLASS_NAMES) -> None:
    """Save an annotated heatmap image of the confusion matrix."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    threshold = cm.max() / 2 if cm.max() else 0.5
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(
                j, i, str(int(cm[i, j])), ha="center", va="center",
                color="white" if cm[i, j] > threshold else "black", fontsize=8,
            )
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
