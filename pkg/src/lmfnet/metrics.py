"""Confusion-matrix segmentation metrics: OA, per-class F1 / IoU and their means."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

DEFAULT_IGNORE = 255


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = pixels with truth ``i`` predicted ``j``."""

    num_classes: int
    ignore_label: int | None = DEFAULT_IGNORE
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_classes < 1:
            raise DataError("confusion matrix needs at least one class")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise DataError(f"counts shape {self.counts.shape} vs {self.num_classes} classes")

    def accumulate(self, truth, pred) -> "ConfusionMatrix":
        accumulate_confusion(self, truth, pred)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot add confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.ignore_label, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    """Add the pixel pairs of (truth, pred) to ``cm`` in place; ignore-labelled truth pixels are skipped."""
    truth = np.asarray(truth).astype(np.int64).ravel()
    pred = np.asarray(pred).astype(np.int64).ravel()
    if truth.shape != pred.shape:
        raise DataError(f"truth and prediction sizes differ: {truth.size} vs {pred.size}")
    if cm.ignore_label is not None:
        keep = truth != cm.ignore_label
        truth, pred = truth[keep], pred[keep]
    C = cm.num_classes
    bad = (truth < 0) | (truth >= C) | (pred < 0) | (pred >= C)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"class index out of range [0, {C}): truth={truth[i]}, pred={pred[i]}")
    cm.counts += np.bincount(truth * C + pred, minlength=C * C).reshape(C, C)
    return cm


def _counts(cm) -> np.ndarray:
    m = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)
    if m.sum() <= 0:
        raise NumericError("metrics undefined on an empty confusion matrix")
    return m


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """num/den with 0/0 -> 0; also returns the mask of 0/0 entries."""
    empty = den == 0
    out = np.where(empty, 0.0, num / np.where(empty, 1, den))
    return out, empty


def overall_accuracy(cm) -> float:
    m = _counts(cm)
    return int(np.trace(m)) / int(m.sum())


def f1_scores(cm) -> tuple[np.ndarray, float, np.ndarray]:
    """Per-class F1, mF1, and the mask of classes scored 0 by the 0/0 rule."""
    m = _counts(cm)
    tp = np.diag(m)
    fn = m.sum(axis=1) - tp
    fp = m.sum(axis=0) - tp
    f1, empty = _safe_ratio(2 * tp, 2 * tp + fn + fp)
    return f1, float(f1.mean()), empty


def iou_scores(cm) -> tuple[np.ndarray, float, np.ndarray]:
    """Per-class IoU (Jaccard: intersection over row + column - diagonal), mIoU, 0/0 mask."""
    m = _counts(cm)
    tp = np.diag(m)
    union = m.sum(axis=1) + m.sum(axis=0) - tp
    iou, empty = _safe_ratio(tp, union)
    return iou, float(iou.mean()), empty


def metrics_report(cm, class_names=None, params: int | None = None) -> dict:
    m = _counts(cm)
    C = m.shape[0]
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(C)]
    if len(names) != C:
        raise DataError(f"{len(names)} class names for {C} classes")
    iou, miou, empty = iou_scores(m)
    f1, mf1, _ = f1_scores(m)
    return {
        "iou": {n: float(v) for n, v in zip(names, iou)},
        "mF1": mf1,
        "mIoU": miou,
        "OA": overall_accuracy(m),
        "params": params,
        "f1": {n: float(v) for n, v in zip(names, f1)},
        "absent_classes": [n for n, e in zip(names, empty) if e],
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def format_table(rows: dict[str, dict], class_names) -> str:
    """Aligned text table: one row per run, per-class IoU then mF1, mIoU, OA, params (percent)."""
    names = list(class_names)
    header = ["method"] + names + ["mF1", "mIoU", "OA", "params(M)"]
    lines = []
    for label, rep in rows.items():
        params = rep.get("params")
        cells = [label] + [f"{100 * rep['iou'][n]:.2f}" for n in names]
        cells += [f"{100 * rep[k]:.2f}" for k in ("mF1", "mIoU", "OA")]
        cells.append("-" if params is None else f"{params / 1e6:.2f}")
        lines.append(cells)
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines])
