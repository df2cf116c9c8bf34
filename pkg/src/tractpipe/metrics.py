"""Dice scores and per-method reporting (mean +/- std over subject-class pairs)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .segmentation import SliceClassifier, binarize, predict_subject
from .volume import ShapeMismatchError

__all__ = ["DiceReport", "dice", "dice_all", "evaluate", "evaluate_predictions", "report_to_csv", "write_report"]

CSV_COLUMNS = ("method", "subject_id", "class", "dice")


def dice(pred, truth, class_index: int) -> float:
    """``2|P & T| / (|P| + |T|)`` for one class; 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} and truth {truth.shape} shapes differ")
    p = pred[..., class_index] != 0
    t = truth[..., class_index] != 0
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def dice_all(pred, truth) -> np.ndarray:
    return np.array([dice(pred, truth, k) for k in range(np.asarray(truth).shape[-1])])


@dataclass
class DiceReport:
    method_tag: str
    class_names: list[str]
    subject_ids: list[str]
    scores: np.ndarray  # (subjects, classes)
    per_class: list[tuple[str, float, float]] = dc_field(init=False)
    overall_mean: float = dc_field(init=False)
    overall_std: float = dc_field(init=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.per_class = [
            (name, float(self.scores[:, k].mean()), float(self.scores[:, k].std()))
            for k, name in enumerate(self.class_names)
        ]
        self.overall_mean = float(self.scores.mean())
        self.overall_std = float(self.scores.std())


def evaluate_predictions(preds, truths, subject_ids, method: str, threshold: float = 0.5, class_names=None) -> DiceReport:
    """Dice report for precomputed probability volumes."""
    if not truths:
        raise ValueError("cannot evaluate on an empty test set")
    n_classes = np.asarray(truths[0]).shape[-1]
    class_names = class_names or [f"tract_{k}" for k in range(n_classes)]
    scores = [dice_all(binarize(p, threshold), t) for p, t in zip(preds, truths)]
    return DiceReport(method, list(class_names), list(subject_ids), np.array(scores))


def evaluate(model: SliceClassifier, test, threshold: float = 0.5, method: str = "model", class_names=None) -> DiceReport:
    """Predict, binarise and score every test subject (objects with ``peaks``, ``truth``, ``id``)."""
    test = list(test)
    if not test:
        raise ValueError("cannot evaluate on an empty test set")
    preds = [predict_subject(model, s.peaks) for s in test]
    return evaluate_predictions(preds, [s.truth for s in test], [s.id for s in test], method, threshold, class_names)


def report_rows(report: DiceReport):
    for sid, row in zip(report.subject_ids, report.scores):
        for name, value in zip(report.class_names, row):
            yield (report.method_tag, sid, name, f"{value:.6f}")
    yield (report.method_tag, "ALL", "mean", f"{report.overall_mean:.6f}")
    yield (report.method_tag, "ALL", "std", f"{report.overall_std:.6f}")


def report_to_csv(reports) -> str:
    if isinstance(reports, DiceReport):
        reports = [reports]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in reports:
        writer.writerows(report_rows(report))
    return buf.getvalue()


def write_report(reports, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_to_csv(reports), encoding="utf-8")
    return path
