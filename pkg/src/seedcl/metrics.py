"""Classification metrics (confusion matrix, per-class precision/recall/F1,
macro averages, rendered reports) and color-histogram comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import EmptyMatrix, ShapeMismatch, UnknownLabel
from .image import Image, round_half_up


def confusion_matrix(
    y_true: Sequence[str], y_pred: Sequence[str], class_names: Sequence[str]
) -> np.ndarray:
    """Counts matrix with one row per true class and one column per prediction."""
    if len(y_true) != len(y_pred):
        raise ShapeMismatch(f"{len(y_true)} true labels vs {len(y_pred)} predictions")
    index = {c: i for i, c in enumerate(class_names)}
    cm = np.zeros((len(class_names), len(class_names)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        if t not in index:
            raise UnknownLabel(f"true label {t!r} not in {list(class_names)}")
        if p not in index:
            raise UnknownLabel(f"predicted label {p!r} not in {list(class_names)}")
        cm[index[t], index[p]] += 1
    return cm


def precision_recall_f1(cm: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall, F1 from a counts matrix.

    A zero denominator (no predictions, no true members, or both scores
    zero) yields 0 for that entry rather than NaN.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeMismatch(f"confusion matrix must be square, got {cm.shape}")
    if cm.shape[0] == 0:
        raise EmptyMatrix("confusion matrix has no classes")
    tp = np.diag(cm).astype(np.float64)
    pred_totals = cm.sum(axis=0).astype(np.float64)
    true_totals = cm.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_totals > 0, tp / pred_totals, 0.0)
        recall = np.where(true_totals > 0, tp / true_totals, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / denom, 0.0)
    return precision, recall, f1


def macro_average(values: Sequence[float]) -> float:
    """Unweighted mean over classes."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyMatrix("macro average of zero classes")
    return float(np.mean(values))


@dataclass
class ClassificationReport:
    class_names: List[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_dict(self) -> dict:
        per_class = {
            c: {
                "precision": float(self.precision[i]),
                "recall": float(self.recall[i]),
                "f1-score": float(self.f1[i]),
                "support": int(self.support[i]),
            }
            for i, c in enumerate(self.class_names)
        }
        return {
            "classes": per_class,
            "accuracy": self.accuracy,
            "macro avg": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1-score": self.macro_f1,
                "support": int(self.support.sum()),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def classification_report(
    y_true: Sequence[str], y_pred: Sequence[str], class_names: Sequence[str]
) -> ClassificationReport:
    """Full per-class and macro-averaged report from label sequences."""
    cm = confusion_matrix(y_true, y_pred, class_names)
    return report_from_matrix(cm, class_names)


def report_from_matrix(cm: np.ndarray, class_names: Sequence[str]) -> ClassificationReport:
    cm = np.asarray(cm)
    if cm.shape[0] == 0 or cm.sum() == 0:
        raise EmptyMatrix("cannot report on an empty confusion matrix")
    precision, recall, f1 = precision_recall_f1(cm)
    support = cm.sum(axis=1)
    accuracy = float(np.trace(cm) / cm.sum())
    return ClassificationReport(
        class_names=list(class_names),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        accuracy=accuracy,
        macro_precision=macro_average(precision),
        macro_recall=macro_average(recall),
        macro_f1=macro_average(f1),
    )


def _fmt2(x: float) -> str:
    # Two decimals with exact round-half-up, so 0.005 renders as 0.01.
    return f"{round_half_up(x * 100.0) / 100.0:.2f}"


def render_report(report: ClassificationReport) -> str:
    """Fixed-width text table: per-class rows, accuracy, macro averages."""
    name_width = max([len(c) for c in report.class_names] + [len("macro avg"), 12])
    header = f"{'':>{name_width}}  {'precision':>9}  {'recall':>9}  {'f1-score':>9}  {'support':>9}"
    lines = [header, ""]
    for i, c in enumerate(report.class_names):
        lines.append(
            f"{c:>{name_width}}  {_fmt2(report.precision[i]):>9}  {_fmt2(report.recall[i]):>9}"
            f"  {_fmt2(report.f1[i]):>9}  {int(report.support[i]):>9}"
        )
    total = int(report.support.sum())
    lines.append("")
    lines.append(f"{'accuracy':>{name_width}}  {'':>9}  {'':>9}  {_fmt2(report.accuracy):>9}  {total:>9}")
    lines.append(
        f"{'macro avg':>{name_width}}  {_fmt2(report.macro_precision):>9}  {_fmt2(report.macro_recall):>9}"
        f"  {_fmt2(report.macro_f1):>9}  {total:>9}"
    )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# color histograms


def color_histogram(image: Image) -> np.ndarray:
    """Per-channel 256-bin intensity histogram, each channel summing to 1."""
    pixels = image.pixels
    out = np.zeros((3, 256), dtype=np.float64)
    count = pixels.shape[0] * pixels.shape[1]
    for ch in range(3):
        out[ch] = np.bincount(pixels[:, :, ch].reshape(-1), minlength=256) / count
    return out


def histogram_rms_difference(h1: np.ndarray, h2: np.ndarray) -> float:
    """Root mean square over all 768 bins of two histogram stacks."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape or h1.shape != (3, 256):
        raise ShapeMismatch(f"histograms must both be (3, 256), got {h1.shape} and {h2.shape}")
    return float(np.sqrt(np.mean((h1 - h2) ** 2)))
