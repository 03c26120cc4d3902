"""Confusion-matrix accumulation and grouped mIoU reporting.

IoU is computed per class as TP / (TP + FP + FN); classes that never occur
(no TP, FP or FN) are undefined and excluded from group means rather than
counted as zero, because small synthetic test splits may omit classes.
Group conventions follow incremental-segmentation reporting: the background
class is grouped with the initial classes, the "all" group covers everything.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import SegModel, image_to_tensor
from .synth import IGNORE, LabeledImage, TaskSequence


@dataclass
class ConfusionMatrix:
    """(K+1)x(K+1) pixel counts, rows = ground truth, cols = prediction."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        n = num_classes + 1
        return cls(counts=np.zeros((n, n), dtype=np.int64))

    @property
    def num_labels(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Additivity over disjoint pixel sets: merged counts are the sum."""
        return ConfusionMatrix(counts=self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred_labels: np.ndarray, gt_labels: np.ndarray) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair; ignore pixels are skipped."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("prediction and ground truth must share a shape")
    n = cm.num_labels
    gt = gt_labels.reshape(-1).astype(np.int64)
    pred = pred_labels.reshape(-1).astype(np.int64)
    scored = gt != IGNORE
    gt, pred = gt[scored], pred[scored]
    if gt.size and (gt.min() < 0 or gt.max() >= n):
        raise ValueError(f"ground-truth label outside 0..{n - 1}")
    if pred.size and (pred.min() < 0 or pred.max() >= n):
        raise ValueError(f"predicted label outside 0..{n - 1}")
    binned = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    cm.counts += binned
    return cm


def per_class_iou(cm: ConfusionMatrix) -> list[float | None]:
    """IoU per class index; None where the class never occurred."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - np.diag(cm.counts)
    fn = cm.counts.sum(axis=1) - np.diag(cm.counts)
    denom = tp + fp + fn
    out: list[float | None] = []
    for c in range(cm.num_labels):
        out.append(float(tp[c] / denom[c]) if denom[c] > 0 else None)
    return out


@dataclass
class MetricsReport:
    """Per-class IoU plus group means, with optional per-step history."""

    per_class_iou: list[float | None]
    group_miou: dict[str, float | None]
    per_step_history: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "group_miou": self.group_miou,
            "per_step_history": self.per_step_history,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(
            per_class_iou=list(d["per_class_iou"]),
            group_miou=dict(d["group_miou"]),
            per_step_history=list(d.get("per_step_history", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def miou(cm: ConfusionMatrix, groups: dict[str, set[int]]) -> MetricsReport:
    """Grouped mean IoU; undefined classes are excluded from group means."""
    ious = per_class_iou(cm)
    group_means: dict[str, float | None] = {}
    for name, classes in groups.items():
        for c in classes:
            if not 0 <= c < cm.num_labels:
                raise ValueError(f"group {name!r} references unknown class {c}")
        defined = [ious[c] for c in sorted(classes) if ious[c] is not None]
        group_means[name] = float(np.mean(defined)) if defined else None
    return MetricsReport(per_class_iou=ious, group_miou=group_means)


def task_groups(task: TaskSequence, upto_step: int | None = None) -> dict[str, set[int]]:
    """Standard reporting groups: initial (with background), incremented, all."""
    t = task.num_steps if upto_step is None else upto_step
    initial = {0} | set(task.partitions[0])
    incremented = {c for part in task.partitions[1:t] for c in part}
    return {
        "initial": initial,
        "incremented": incremented,
        "all": initial | incremented,
    }


def predict_labels(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Argmax class map for one (H,W,3) image."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        _, scores = model.forward_single(image_to_tensor(image, dtype))
        return scores.argmax(dim=0).numpy().astype(np.int64)


def evaluate_model(
    model: SegModel,
    items: list[LabeledImage],
    num_classes: int,
    known_classes: set[int] | None = None,
) -> ConfusionMatrix:
    """Confusion matrix of ``model`` over ``items``.

    When ``known_classes`` is given (mid-sequence evaluation), ground-truth
    pixels of classes the model has never seen are excluded as ignore.
    """
    cm = ConfusionMatrix.zeros(num_classes)
    for item in items:
        pred = predict_labels(model, item.image)
        gt = item.mask.astype(np.int64)
        if known_classes is not None:
            exclude = ~np.isin(gt, list(known_classes | {0, IGNORE}))
            gt = gt.copy()
            gt[exclude] = IGNORE
        accumulate(cm, pred, gt)
    return cm


def write_group_csv(path: str | Path, rows: list[dict]) -> None:
    """Rows of {label, initial, incremented, all} as a small results table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
