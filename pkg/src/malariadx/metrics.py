"""Confusion counts, accuracy / precision / recall, and the comparison table."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import RejectedInputError, UndefinedMetricError

DEFAULT_THRESHOLD = 0.5
CSV_HEADER = ("model", "accuracy", "precision", "recall")
COLUMNS = ("Model Name", "Accuracy", "Precision", "Recall")
NAME_WIDTH = 22
VALUE_WIDTH = 10
NOT_APPLICABLE = "n/a"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise RejectedInputError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(probabilities, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Count outcomes with ``p >= threshold`` predicting the positive class."""
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise RejectedInputError(f"{len(p)} probabilities but {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise RejectedInputError("labels must be hard 0/1 values")
    if np.any(np.isnan(p)):
        raise RejectedInputError("probabilities contain NaN")
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)), tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)), fn=int(np.sum(~pred & pos)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    """Correct fraction as a percentage, 0..100."""
    if cm.total == 0:
        raise UndefinedMetricError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total * 100.0


def precision(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fp == 0:
        raise UndefinedMetricError("precision with no positive predictions")
    return cm.tp / (cm.tp + cm.fp)


def recall(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("recall with no positive labels")
    return cm.tp / (cm.tp + cm.fn)


def _or_none(metric, cm):
    try:
        return metric(cm)
    except UndefinedMetricError:
        return None


@dataclass(frozen=True)
class MetricsReport:
    """One table row.  Values are fractions in [0, 1]; ``None`` means undefined.

    ``digits`` gives the decimals rendered for accuracy, precision and recall.
    """

    model: str
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    digits: Tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        for v in self.values:
            if v is not None and not 0.0 <= v <= 1.0:
                raise RejectedInputError(f"metric {v} outside [0, 1] for {self.model!r}")
        if any(ch in self.model for ch in ",\n\t"):
            raise RejectedInputError("model name may not contain commas, tabs or newlines")

    @property
    def values(self) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        return (self.accuracy, self.precision, self.recall)

    def rendered(self) -> Tuple[str, str, str]:
        return tuple(NOT_APPLICABLE if v is None else f"{v:.{d}f}"
                     for v, d in zip(self.values, self.digits))

    @classmethod
    def from_confusion(cls, model: str, cm: ConfusionMatrix, digits=(4, 4, 4)) -> "MetricsReport":
        acc = _or_none(accuracy, cm)
        return cls(model, None if acc is None else acc / 100.0,
                   _or_none(precision, cm), _or_none(recall, cm), tuple(digits))


def evaluate_predictions(model: str, probabilities, labels,
                         threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    return MetricsReport.from_confusion(model, confusion(probabilities, labels, threshold))


def format_report(reports: Sequence[MetricsReport]) -> str:
    """Fixed-width table: a header line plus one line per report."""
    width = max([NAME_WIDTH] + [len(r.model) + 2 for r in reports])
    lines = [COLUMNS[0].ljust(width) + "".join(c.rjust(VALUE_WIDTH) for c in COLUMNS[1:])]
    for r in reports:
        lines.append(r.model.ljust(width) + "".join(v.rjust(VALUE_WIDTH) for v in r.rendered()))
    return "\n".join(lines) + "\n"


def _parse_value(text: str) -> Tuple[Optional[float], int]:
    if text == NOT_APPLICABLE:
        return None, 4
    digits = len(text.split(".", 1)[1]) if "." in text else 0
    return float(text), digits


def _report_from_fields(model: str, fields: Sequence[str]) -> MetricsReport:
    parsed = [_parse_value(f.strip()) for f in fields]
    return MetricsReport(model, *(v for v, _ in parsed), digits=tuple(d for _, d in parsed))


def parse_report(text: str) -> List[MetricsReport]:
    """Inverse of :func:`format_report`."""
    lines = text.splitlines()
    if not lines or lines[0].split() != ["Model", "Name", "Accuracy", "Precision", "Recall"]:
        raise RejectedInputError("not a metrics table")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        model, *values = line.rsplit(None, 3)
        if len(values) != 3:
            raise RejectedInputError(f"malformed table row {line!r}")
        out.append(_report_from_fields(model.rstrip(), values))
    return out


def to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow((r.model, *r.rendered()))
    return buf.getvalue()


def from_csv(text: str) -> List[MetricsReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise RejectedInputError(f"metrics CSV must start with {','.join(CSV_HEADER)}")
    out = []
    for row in rows[1:]:
        if len(row) != 4:
            raise RejectedInputError(f"metrics CSV row has {len(row)} fields")
        out.append(_report_from_fields(row[0], row[1:]))
    return out


def reference_reports() -> List[MetricsReport]:
    """The published comparison rows, stored verbatim as package data."""
    text = resources.files("malariadx").joinpath("fixtures/reference_metrics.csv").read_text()
    return from_csv(text)
