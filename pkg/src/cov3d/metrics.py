"""Macro-F1 evaluation for the presence and severity tasks.

Per-class F1 uses the usual zero-division convention (a class never predicted
and never correctly recovered scores 0) and the macro average runs over the
declared class set, including classes absent from the predictions. The
severity task is evaluated only on scans that carry a severity annotation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .dataio import SEVERITY_CLASSES, AnnotationSet
from .errors import DataError


@dataclass
class ConfusionMatrix:
    classes: list
    counts: list[list[int]]  # rows = truth, cols = predicted

    @classmethod
    def from_labels(cls, truth, predicted, classes) -> "ConfusionMatrix":
        truth = list(truth)
        predicted = list(predicted)
        if len(truth) != len(predicted):
            raise DataError(
                f"evaluation error: {len(truth)} truth labels vs {len(predicted)} predictions"
            )
        if not truth:
            raise DataError("evaluation error: empty input")
        classes = list(classes)
        index = {label: i for i, label in enumerate(classes)}
        counts = [[0] * len(classes) for _ in classes]
        for t, p in zip(truth, predicted):
            if t not in index or p not in index:
                raise DataError(f"evaluation error: label {t!r}/{p!r} outside class set {classes}")
            counts[index[t]][index[p]] += 1
        return cls(classes=classes, counts=counts)

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def class_counts(self, label) -> tuple[int, int, int]:
        """(true positives, false positives, false negatives) for one class."""
        i = self.classes.index(label)
        tp = self.counts[i][i]
        fp = sum(self.counts[r][i] for r in range(len(self.classes))) - tp
        fn = sum(self.counts[i]) - tp
        return tp, fp, fn


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


def _scores_from_counts(tp: int, fp: int, fn: int) -> ClassScores:
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return ClassScores(precision=precision, recall=recall, f1=f1, support=tp + fn)


@dataclass
class EvalReport:
    task: str  # "presence" | "severity"
    macro_f1: float
    per_class: dict
    n_items: int
    confusion: ConfusionMatrix

    def to_text(self) -> str:
        lines = [
            f"task: {self.task}",
            f"items: {self.n_items}",
            f"{'class':>10} {'precision':>10} {'recall':>10} {'f1':>10} {'support':>8}",
        ]
        for label, scores in self.per_class.items():
            lines.append(
                f"{str(label):>10} {scores.precision:>10.6f} {scores.recall:>10.6f} "
                f"{scores.f1:>10.6f} {scores.support:>8d}"
            )
        lines.append(f"macro_f1: {self.macro_f1:.6f}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        lines = [f"task={self.task}", f"n_items={self.n_items}", f"macro_f1={self.macro_f1!r}"]
        for label, scores in self.per_class.items():
            for name in ("precision", "recall", "f1"):
                lines.append(f"class_{label}_{name}={getattr(scores, name)!r}")
            lines.append(f"class_{label}_support={scores.support}")
        return "\n".join(lines) + "\n"

    def write_kv(self, path) -> None:
        Path(path).write_text(self.to_kv())


def report_from_confusion(task: str, cm: ConfusionMatrix) -> EvalReport:
    per_class = {}
    for label in cm.classes:
        per_class[label] = _scores_from_counts(*cm.class_counts(label))
    macro = sum(s.f1 for s in per_class.values()) / len(cm.classes)
    return EvalReport(task=task, macro_f1=macro, per_class=per_class,
                      n_items=cm.total, confusion=cm)


def macro_f1(truth, predicted, classes) -> float:
    """Unweighted mean of per-class F1 over the declared class set."""
    cm = ConfusionMatrix.from_labels(truth, predicted, classes)
    return report_from_confusion("ad-hoc", cm).macro_f1


def evaluate_presence(annotations: AnnotationSet, predictions,
                      partition: str = "validation") -> EvalReport:
    """Task 1: binary presence over every labeled scan of the partition.

    ``predictions`` maps scan_id -> bool.
    """
    labeled = [r for r in annotations.partition(partition) if r.covid_label is not None]
    missing = [r.scan_id for r in labeled if r.scan_id not in predictions]
    if missing:
        raise DataError(f"coverage error: missing predictions for {', '.join(sorted(missing))}")
    truth = [r.covid_label for r in labeled]
    pred = [bool(predictions[r.scan_id]) for r in labeled]
    cm = ConfusionMatrix.from_labels(truth, pred, [False, True])
    return report_from_confusion("presence", cm)


def evaluate_task2(annotations: AnnotationSet, predictions,
                   partition: str = "validation") -> EvalReport:
    """Task 2: 4-way severity, restricted to severity-annotated scans.

    ``predictions`` maps scan_id -> class in 1..4.
    """
    annotated = [r for r in annotations.partition(partition) if r.severity is not None]
    if not annotated:
        raise DataError(f"evaluation error: no severity-annotated scans in {partition!r}")
    missing = [r.scan_id for r in annotated if r.scan_id not in predictions]
    if missing:
        raise DataError(f"coverage error: missing predictions for {', '.join(sorted(missing))}")
    truth = [r.severity for r in annotated]
    pred = [int(predictions[r.scan_id]) for r in annotated]
    cm = ConfusionMatrix.from_labels(truth, pred, list(SEVERITY_CLASSES))
    return report_from_confusion("severity", cm)
