"""Confusion matrices, classification metrics, and model comparison tables.

Micro-averaged metrics come from pooled counts, which for single-label
classification collapse to trace/total; micro precision, recall, F1 and
accuracy are therefore identical by construction (the same identity that
makes published per-model metric rows repeat one value). Macro variants
average unweighted per-class scores and use an explicit 0-with-flag
convention for empty denominators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class LengthMismatch(ValueError):
    def __init__(self, n_true: int, n_pred: int):
        super().__init__(f"y_true has {n_true} labels, y_pred has {n_pred}")


class InvalidLabel(ValueError):
    def __init__(self, value):
        super().__init__(f"labels must be 0 or 1, found {value!r}")


class EmptyMatrix(ValueError):
    def __init__(self):
        super().__init__("confusion matrix has no observations; metrics undefined")


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 counts; rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (2, 2) or (counts < 0).any():
            raise ValueError(f"need a non-negative 2x2 count matrix, got {counts!r}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision_micro: float
    recall_micro: float
    f1_micro: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    per_class_precision: tuple[float, float]
    per_class_recall: tuple[float, float]
    per_class_f1: tuple[float, float]
    undefined: tuple[str, ...]  # flags for metrics forced to 0 by empty denominators


@dataclass(frozen=True)
class EvaluationReport:
    model: str
    confusion: ConfusionMatrix
    metrics: Metrics
    seed: int
    config_digest: str

    def to_json(self) -> str:
        payload = {
            "model": self.model,
            "confusion": self.confusion.counts.tolist(),
            "seed": self.seed,
            "config_digest": self.config_digest,
            "metrics": {
                "accuracy": self.metrics.accuracy,
                "precision_micro": self.metrics.precision_micro,
                "recall_micro": self.metrics.recall_micro,
                "f1_micro": self.metrics.f1_micro,
                "precision_macro": self.metrics.precision_macro,
                "recall_macro": self.metrics.recall_macro,
                "f1_macro": self.metrics.f1_macro,
                "undefined": list(self.metrics.undefined),
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvaluationReport":
        payload = json.loads(text)
        cm = ConfusionMatrix(np.array(payload["confusion"]))
        return EvaluationReport(
            model=payload["model"],
            confusion=cm,
            metrics=metrics(cm),
            seed=payload["seed"],
            config_digest=payload["config_digest"],
        )


def confusion(y_true, y_pred) -> ConfusionMatrix:
    """counts[i][j] = rows with true class i predicted as class j.
    Accepts empty inputs (all-zero matrix; metrics stay undefined)."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if len(y_true) != len(y_pred):
        raise LengthMismatch(len(y_true), len(y_pred))
    for arr in (y_true, y_pred):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise InvalidLabel(arr[~np.isin(arr, (0, 1))][0])
    counts = np.zeros((2, 2), dtype=np.int64)
    for i in (0, 1):
        for j in (0, 1):
            counts[i, j] = int(((y_true == i) & (y_pred == j)).sum())
    return ConfusionMatrix(counts)


def metrics(cm: ConfusionMatrix) -> Metrics:
    """All metric variants from one confusion matrix.

    Micro scores use pooled counts: for single-label data the pooled
    true-positive total is the trace and every pooled denominator is the
    grand total, so micro precision = micro recall = micro F1 = accuracy
    exactly.
    """
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise EmptyMatrix()

    accuracy = float(np.trace(counts) / total)
    undefined: list[str] = []
    prec, rec, f1 = [], [], []
    for k in (0, 1):
        tp = float(counts[k, k])
        predicted = float(counts[:, k].sum())
        actual = float(counts[k, :].sum())
        if predicted == 0:
            undefined.append(f"precision_class{k}")
            p = 0.0
        else:
            p = tp / predicted
        if actual == 0:
            undefined.append(f"recall_class{k}")
            r = 0.0
        else:
            r = tp / actual
        if p + r == 0:
            undefined.append(f"f1_class{k}")
            f = 0.0
        else:
            f = 2 * p * r / (p + r)
        prec.append(p)
        rec.append(r)
        f1.append(f)

    return Metrics(
        accuracy=accuracy,
        precision_micro=accuracy,
        recall_micro=accuracy,
        f1_micro=accuracy,
        precision_macro=(prec[0] + prec[1]) / 2,
        recall_macro=(rec[0] + rec[1]) / 2,
        f1_macro=(f1[0] + f1[1]) / 2,
        per_class_precision=(prec[0], prec[1]),
        per_class_recall=(rec[0], rec[1]),
        per_class_f1=(f1[0], f1[1]),
        undefined=tuple(undefined),
    )


def evaluate(model: str, y_true, y_pred, seed: int = 0, config_digest: str = "") -> EvaluationReport:
    cm = confusion(y_true, y_pred)
    return EvaluationReport(model, cm, metrics(cm), seed, config_digest)


_TABLE_COLUMNS = ("model", "Accuracy", "Precision", "recall", "F1")


@dataclass(frozen=True)
class ComparisonTable:
    """Per-model micro metrics sorted by accuracy (descending) plus all
    pairwise accuracy deltas in percentage points."""

    rows: tuple[tuple[str, float, float, float, float], ...]
    deltas: tuple[tuple[str, str, float], ...]  # (better, worse, points)

    def to_text(self) -> str:
        widths = [max(len(_TABLE_COLUMNS[0]), *(len(r[0]) for r in self.rows)), 8, 9, 6, 6]
        header = "  ".join(name.ljust(w) for name, w in zip(_TABLE_COLUMNS, widths))
        lines = [header, "-" * len(header)]
        for row in self.rows:
            cells = [row[0].ljust(widths[0])] + [
                f"{v:.3f}".ljust(w) for v, w in zip(row[1:], widths[1:])
            ]
            lines.append("  ".join(cells))
        for better, worse, points in self.deltas:
            lines.append(f"{better} vs {worse}: {points:+.1f} points")
        return "\n".join(lines) + "\n"

    def to_csv(self, stream, comment: str | None = None) -> None:
        if comment:
            stream.write(f"# {comment}\n")
        stream.write(",".join(_TABLE_COLUMNS) + "\n")
        for row in self.rows:
            stream.write(",".join([row[0], *(repr(float(v)) for v in row[1:])]) + "\n")


def comparison_report(reports: list[EvaluationReport]) -> ComparisonTable:
    """Table-of-models view: micro metrics per model (the headline
    presentation), accuracy-sorted, with pairwise deltas in points."""
    if not reports:
        raise ValueError("need at least one evaluation report")
    ordered = sorted(reports, key=lambda r: (-r.metrics.accuracy, r.model))
    rows = tuple(
        (
            r.model,
            r.metrics.accuracy,
            r.metrics.precision_micro,
            r.metrics.recall_micro,
            r.metrics.f1_micro,
        )
        for r in ordered
    )
    deltas = []
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            hi, lo = ordered[i], ordered[j]
            points = (hi.metrics.accuracy - lo.metrics.accuracy) * 100.0
            deltas.append((hi.model, lo.model, points))
    return ComparisonTable(rows=rows, deltas=tuple(deltas))


def confusion_to_csv(cm: ConfusionMatrix, stream, comment: str | None = None) -> None:
    """2x2 CSV with labeled axes (rows true, columns predicted)."""
    if comment:
        stream.write(f"# {comment}\n")
    stream.write(",pred0,pred1\n")
    for i in (0, 1):
        stream.write(f"true{i},{cm.counts[i, 0]},{cm.counts[i, 1]}\n")
