"""Pseudo-label fusion: refined per-pixel targets at an incremental step.

At step t the ground truth only labels current classes; everything else is
background. The frozen previous-step model relabels background pixels that it
confidently recognizes as old classes, producing a refined target plus the
acceptance ratio beta that scales the pseudo-label loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import SegModel, image_to_tensor, softmax_scores
from .synth import BACKGROUND, IGNORE


@dataclass
class PixelSet:
    """Unique in-bounds pixel locations, stored as (w, h) pairs."""

    coords: np.ndarray  # (N, 2) int64, columns (w, h), row-major order

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def ws(self) -> np.ndarray:
        return self.coords[:, 0]

    @property
    def hs(self) -> np.ndarray:
        return self.coords[:, 1]

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "PixelSet":
        hs, ws = np.nonzero(mask)
        return cls(coords=np.stack([ws, hs], axis=1).astype(np.int64))

    @classmethod
    def empty(cls) -> "PixelSet":
        return cls(coords=np.zeros((0, 2), dtype=np.int64))


@dataclass
class RefinedTarget:
    """Fused step target: gt new classes + accepted old-class pseudo labels.

    ``beta`` is the fraction of old-class candidate pixels (pixels without a
    current-class label that the old model assigns to an old class) whose
    pseudo label was accepted; 0 when there are no candidates.
    """

    labels: np.ndarray  # (H, W) uint8 over C_{0:t} | {255}
    beta: float
    accepted_mask: np.ndarray  # (H, W) bool


def predict_pseudo(old_model: SegModel | None, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Old-model argmax labels over C_{0:t-1} and the matching max probability."""
    if old_model is None:
        raise ValueError("pseudo-labeling needs the previous-step model (t >= 2)")
    dtype = next(old_model.parameters()).dtype
    with torch.no_grad():
        _, scores = old_model.forward_single(image_to_tensor(image, dtype))
        prob = softmax_scores(scores)
        conf, labels = prob.max(dim=0)
    return labels.numpy().astype(np.int64), conf.numpy().astype(np.float64)


def fuse_targets(
    gt: np.ndarray,
    pseudo_labels: np.ndarray,
    confidence: np.ndarray,
    tau: float,
) -> RefinedTarget:
    """Build the refined target for one image.

    Per pixel: current-class gt labels are kept; ignore stays ignore;
    background pixels take the old model's label when it names an old class
    with confidence above ``tau``, are marked ignore when it names an old
    class without enough confidence, and stay background otherwise.
    """
    if gt.shape != pseudo_labels.shape or gt.shape != confidence.shape:
        raise ValueError("gt, pseudo labels and confidence must share a shape")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0,1], got {tau}")
    new_mask = (gt != BACKGROUND) & (gt != IGNORE)
    ignore_mask = gt == IGNORE
    bg_mask = gt == BACKGROUND
    pseudo_old = pseudo_labels != BACKGROUND

    candidates = pseudo_old & ~new_mask
    accepted = pseudo_old & bg_mask & (confidence > tau)

    labels = gt.astype(np.uint8).copy()
    labels[ignore_mask] = IGNORE
    rejected_bg = bg_mask & pseudo_old & ~accepted
    labels[rejected_bg] = IGNORE
    labels[accepted] = pseudo_labels[accepted].astype(np.uint8)

    n_cand = int(candidates.sum())
    beta = float(accepted.sum()) / n_cand if n_cand else 0.0
    return RefinedTarget(labels=labels, beta=beta, accepted_mask=accepted)


def old_pixel_set(rt: RefinedTarget, old_classes) -> PixelSet:
    """Locations whose refined label is an old class."""
    old_classes = list(old_classes)
    if not old_classes:
        return PixelSet.empty()
    return PixelSet.from_mask(np.isin(rt.labels, old_classes))
