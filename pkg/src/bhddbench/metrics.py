"""Confusion matrices, macro precision/recall/F1, accuracy and report serialisation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

N_CLASSES = 10
CSV_HEADER = ("model", "precision", "recall", "f1", "accuracy")
DECIMALS = 4


class ConfusionMatrix:
    """``counts[t, p]`` is the number of samples of true class ``t`` predicted as ``p``."""

    def __init__(self, counts: np.ndarray | None = None, n_classes: int = N_CLASSES):
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion counts must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def render(self) -> str:
        return render_confusion(self)


def accumulate_confusion(cm: ConfusionMatrix, true_labels, predicted_labels) -> ConfusionMatrix:
    """Add one count per (true, predicted) pair, in place; returns ``cm``."""
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"{t.size} true labels but {p.size} predictions")
    k = cm.n_classes
    for name, arr in (("true", t), ("predicted", p)):
        bad = (arr < 0) | (arr >= k)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"{name} label {arr[i]} at position {i} outside [0, {k})")
    np.add.at(cm.counts, (t, p), 1)
    return cm


def confusion_from_labels(true_labels, predicted_labels, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    return accumulate_confusion(ConfusionMatrix(n_classes=n_classes), true_labels, predicted_labels)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int
    flagged: bool  # an empty denominator forced some value to 0


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    per_class: list[ClassMetrics]
    confusion: ConfusionMatrix
    model: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def flagged_classes(self) -> list[int]:
        return [i for i, c in enumerate(self.per_class) if c.flagged]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (self.precision == other.precision and self.recall == other.recall and self.f1 == other.f1
                and self.accuracy == other.accuracy and self.per_class == other.per_class
                and self.confusion == other.confusion and self.model == other.model
                and self.metadata == other.metadata)


def compute_metrics(cm: ConfusionMatrix, model: str = "", metadata: dict | None = None) -> MetricsReport:
    """Per-class and macro metrics.

    Macro values are unweighted means over all classes; a class whose
    precision or recall denominator is zero contributes 0 and is flagged.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise ValueError("cannot compute metrics of an empty confusion matrix")
    diag = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    per_class = []
    for c in range(cm.n_classes):
        tp = int(diag[c])
        prec = tp / int(predicted[c]) if predicted[c] else 0.0
        rec = tp / int(support[c]) if support[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class.append(ClassMetrics(prec, rec, f1, int(support[c]), int(predicted[c]),
                                      flagged=not (support[c] and predicted[c])))
    k = cm.n_classes
    return MetricsReport(
        precision=sum(c.precision for c in per_class) / k,
        recall=sum(c.recall for c in per_class) / k,
        f1=sum(c.f1 for c in per_class) / k,
        accuracy=int(diag.sum()) / total,
        per_class=per_class,
        confusion=ConfusionMatrix(counts.copy()),
        model=model,
        metadata=dict(metadata or {}),
    )


def top_confusions(cm: ConfusionMatrix, k: int = 3) -> list[tuple[int, int, int]]:
    """The ``k`` largest off-diagonal cells as ``(true, predicted, count)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cells = [(t, p, int(n)) for (t, p), n in np.ndenumerate(cm.counts) if t != p and n > 0]
    cells.sort(key=lambda c: (-c[2], c[0], c[1]))
    return cells[:k]


# ---------------------------------------------------------------------------
# serialisation


def _r(x: float) -> float:
    return round(float(x), DECIMALS)


def report_to_dict(report: MetricsReport) -> dict:
    """JSON-ready view; ``raw`` holds the unrounded values."""
    return {
        "model": report.model,
        "precision": _r(report.precision),
        "recall": _r(report.recall),
        "f1": _r(report.f1),
        "accuracy": _r(report.accuracy),
        "raw": {
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "accuracy": report.accuracy,
        },
        "per_class": [
            {"class": i, "precision": c.precision, "recall": c.recall, "f1": c.f1,
             "support": c.support, "predicted": c.predicted, "flagged": c.flagged}
            for i, c in enumerate(report.per_class)
        ],
        "flagged_classes": report.flagged_classes,
        "top_confusions": [list(c) for c in top_confusions(report.confusion, 3)],
        "confusion_matrix": report.confusion.counts.tolist(),
        "metadata": report.metadata,
    }


def report_from_dict(d: dict) -> MetricsReport:
    raw = d["raw"]
    return MetricsReport(
        precision=raw["precision"],
        recall=raw["recall"],
        f1=raw["f1"],
        accuracy=raw["accuracy"],
        per_class=[ClassMetrics(c["precision"], c["recall"], c["f1"], c["support"], c["predicted"], c["flagged"])
                   for c in d["per_class"]],
        confusion=ConfusionMatrix(np.array(d["confusion_matrix"], dtype=np.int64)),
        model=d["model"],
        metadata=d["metadata"],
    )


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def csv_rows(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow([r.model] + [f"{v:.{DECIMALS}f}" for v in (r.precision, r.recall, r.f1, r.accuracy)])
    return buf.getvalue()


def serialize_report(report: MetricsReport, format: str = "json") -> bytes:
    if format == "json":
        return dumps_json(report_to_dict(report)).encode()
    if format == "csv":
        return csv_rows([report]).encode()
    raise ValueError(f"unknown report format {format!r}; expected 'json' or 'csv'")


def report_from_json(payload: bytes | str) -> MetricsReport:
    return report_from_dict(json.loads(payload))


def render_confusion(cm: ConfusionMatrix) -> str:
    """Fixed-width text table; rows are true classes, columns predictions."""
    k = cm.n_classes
    width = max(4, len(str(int(cm.counts.max()))) + 1)
    head = "true\\pred" + "".join(f"{j:>{width}}" for j in range(k))
    lines = [head]
    for i in range(k):
        lines.append(f"{i:>9}" + "".join(f"{int(n):>{width}}" for n in cm.counts[i]))
    return "\n".join(lines) + "\n"
