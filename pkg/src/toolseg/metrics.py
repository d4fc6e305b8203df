"""Confusion-count accumulation and segmentation metrics.

Counts are one-vs-rest per class and merge by elementwise addition, so
per-frame tallies can be accumulated in any grouping and pooled.
Reports derive ratios from pooled counts (micro-averaging), never by
averaging per-sequence ratios; the per-sequence rows exist so the
difference stays auditable. A metric whose denominator is zero is
reported as ``None`` (undefined), not coerced to 0 or NaN.

Displayed percentages round half-up to one decimal place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .dataset import Preprocessing, SequenceDataset, load_image, load_mask
from .engine import forward
from .model import ModelSpec

__all__ = [
    "ConfusionCounts",
    "BinaryReport",
    "IoUReport",
    "SequenceResult",
    "EvaluationReport",
    "accumulate",
    "binary_report",
    "iou_report",
    "balanced_accuracy",
    "evaluate",
    "format_percent",
    "report_to_csv",
    "report_to_table",
]


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    """Per-class one-vs-rest tallies; merge is elementwise addition."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = lambda: np.zeros(num_classes, dtype=np.int64)
        return cls(z(), z(), z(), z())

    def __eq__(self, other):
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("tp", "fp", "fn", "tn"))

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge counts with different class counts")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def __add__(self, other):
        return self.merge(other)


def accumulate(pred: np.ndarray, gt: np.ndarray,
               counts: ConfusionCounts) -> ConfusionCounts:
    """Add one prediction/ground-truth mask pair into the tallies."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    c = counts.num_classes
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= c:
        raise ValueError(f"prediction labels outside 0..{c - 1}")
    if gt.min(initial=0) < 0 or gt.max(initial=0) >= c:
        raise ValueError(f"ground-truth labels outside 0..{c - 1}")
    cm = np.bincount(gt.ravel() * c + pred.ravel(), minlength=c * c).reshape(c, c)
    tp = np.diag(cm).astype(np.int64)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = cm.sum() - tp - fn - fp
    return counts.merge(ConfusionCounts(tp, fp, fn, tn))


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def balanced_accuracy(sensitivity: float | None,
                      specificity: float | None) -> float | None:
    if sensitivity is None or specificity is None:
        return None
    return (sensitivity + specificity) / 2.0


@dataclass(frozen=True)
class BinaryReport:
    sensitivity: float | None
    specificity: float | None
    balanced_accuracy: float | None


def binary_report(counts: ConfusionCounts) -> BinaryReport:
    """Sensitivity/specificity/balanced accuracy with tool = class 1."""
    if counts.num_classes != 2:
        raise ValueError("binary report needs exactly 2 classes")
    tool = 1
    sens = _ratio(int(counts.tp[tool]), int(counts.tp[tool] + counts.fn[tool]))
    spec = _ratio(int(counts.tn[tool]), int(counts.tn[tool] + counts.fp[tool]))
    return BinaryReport(sens, spec, balanced_accuracy(sens, spec))


@dataclass(frozen=True)
class IoUReport:
    per_class: tuple[float | None, ...]
    mean_iou: float | None


def iou_report(counts: ConfusionCounts) -> IoUReport:
    """Per-class IoU = tp/(tp+fp+fn) plus the mean over classes present
    in the ground truth; a class absent from both prediction and ground
    truth is undefined (None) and excluded from the mean."""
    per_class = []
    present = []
    for c in range(counts.num_classes):
        tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
        per_class.append(_ratio(tp, tp + fp + fn))
        if tp + fn > 0:
            present.append(per_class[-1])
    mean = sum(present) / len(present) if present else None
    return IoUReport(tuple(per_class), mean)


@dataclass(frozen=True)
class SequenceResult:
    sequence_id: str
    counts: ConfusionCounts
    iou: IoUReport
    binary: BinaryReport | None


@dataclass(frozen=True)
class EvaluationReport:
    rows: tuple[SequenceResult, ...]
    aggregate: SequenceResult
    class_names: dict[int, str] = field(default_factory=dict)


def _result(seq_id: str, counts: ConfusionCounts) -> SequenceResult:
    binary = binary_report(counts) if counts.num_classes == 2 else None
    return SequenceResult(seq_id, counts, iou_report(counts), binary)


def evaluate(model: ModelSpec, params: dict, dataset: SequenceDataset, *,
             preprocessing: Preprocessing | None = None,
             mask_transform=None) -> EvaluationReport:
    """Predict every frame, pool counts per sequence and overall.

    The aggregate row is computed from merged counts, which in general
    differs from the mean of per-sequence metrics.
    """
    if mask_transform is None and dataset.num_classes != model.num_classes:
        raise ValueError(f"model predicts {model.num_classes} classes but the "
                         f"dataset has {dataset.num_classes}")
    rows = []
    total = ConfusionCounts.zeros(model.num_classes)
    for seq_id, frames in dataset.sequences:
        counts = ConfusionCounts.zeros(model.num_classes)
        for rec in frames:
            image = load_image(rec, preprocessing)
            gt = load_mask(rec)
            if mask_transform is not None:
                gt = mask_transform(gt)
            logits = forward(model, params, image)
            pred = np.argmax(logits, axis=-1)
            counts = accumulate(pred, gt, counts)
        rows.append(_result(seq_id, counts))
        total = total.merge(counts)
    names = (dataset.class_names if mask_transform is None
             else {0: "background", 1: "tool"})
    return EvaluationReport(tuple(rows), _result("overall", total), names)


def format_percent(value: float | None) -> str:
    """Percentage with one decimal, half-up: 0.9225 -> '92.3'."""
    if value is None:
        return "undefined"
    quantized = Decimal(repr(value * 100.0)).quantize(Decimal("0.1"),
                                                      rounding=ROUND_HALF_UP)
    return str(quantized)


def _display_order(num_classes: int) -> list[int]:
    # 3-class reports list manipulator, shaft, background; otherwise
    # ascending class IDs.
    return [2, 1, 0] if num_classes == 3 else list(range(num_classes))


def report_to_csv(report: EvaluationReport) -> str:
    """``sequence,class,iou`` rows; undefined IoUs are left empty."""
    lines = ["sequence,class,iou"]
    for row in (*report.rows, report.aggregate):
        for c in range(row.counts.num_classes):
            name = report.class_names.get(c, f"class{c}")
            iou = row.iou.per_class[c]
            lines.append(f"{row.sequence_id},{name},"
                         f"{'' if iou is None else format_percent(iou)}")
        mean = row.iou.mean_iou
        lines.append(f"{row.sequence_id},mean,"
                     f"{'' if mean is None else format_percent(mean)}")
    return "\n".join(lines) + "\n"


def report_to_table(report: EvaluationReport) -> str:
    """Human-readable table: balanced-accuracy columns for binary runs,
    per-class IoU columns otherwise."""
    num_classes = report.aggregate.counts.num_classes
    out = []
    if num_classes == 2:
        out.append(f"{'sequence':<16}{'sensitivity':>14}{'specificity':>14}"
                   f"{'balanced acc':>14}")
        for row in (*report.rows, report.aggregate):
            b = row.binary
            out.append(f"{row.sequence_id:<16}"
                       f"{format_percent(b.sensitivity):>14}"
                       f"{format_percent(b.specificity):>14}"
                       f"{format_percent(b.balanced_accuracy):>14}")
    order = _display_order(num_classes)
    header = f"{'sequence':<16}"
    for c in order:
        header += f"{report.class_names.get(c, f'class{c}'):>14}"
    header += f"{'mean IoU':>14}"
    out.append(header)
    for row in (*report.rows, report.aggregate):
        line = f"{row.sequence_id:<16}"
        for c in order:
            line += f"{format_percent(row.iou.per_class[c]):>14}"
        line += f"{format_percent(row.iou.mean_iou):>14}"
        out.append(line)
    return "\n".join(out) + "\n"
