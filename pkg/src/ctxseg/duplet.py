"""Context-rectified image duplets: an original image paired with a copy
whose current-class pixels are erased.

The erased copy shows old-class pixels without the co-occurring new-class
content, which is what rectifies the context bias of incremental images.
Batches are composed half-and-half: every original travels with its erased
counterpart so the consistency loss can compare the two in one forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SegModel
from .pseudo import PixelSet, RefinedTarget, fuse_targets, old_pixel_set, predict_pseudo
from .synth import IGNORE, LabeledImage


@dataclass
class Duplet:
    """Original image, its refined target, and the new-class-erased copy."""

    original: LabeledImage  # image + step ground-truth mask
    refined: RefinedTarget
    erased_image: np.ndarray  # (H, W, 3)
    erased_target: np.ndarray  # refined labels with new-class pixels set to ignore
    old_pixels: PixelSet


@dataclass
class DupletItem:
    image: np.ndarray
    target: np.ndarray
    is_erased: bool
    old_pixels: PixelSet
    pair_index: int  # position of the counterpart inside the batch


@dataclass
class DupletBatch:
    """Half originals, half erased copies, counterparts adjacent."""

    items: list[DupletItem]
    duplets: list[Duplet]


def erase_new_pixels(
    image: np.ndarray,
    gt_mask: np.ndarray,
    new_classes,
    fill,
) -> tuple[np.ndarray, np.ndarray]:
    """Replace pixels whose gt label is a current class with ``fill``.

    ``fill`` may be a scalar or a length-3 per-channel value. Returns the
    erased image and the boolean erase mask. Idempotent: erased pixels carry
    no new-class label anymore, so erasing again changes nothing.
    """
    if image.shape[:2] != gt_mask.shape:
        raise ValueError("image and mask must share a spatial extent")
    erase_mask = np.isin(gt_mask, list(new_classes))
    erased = image.copy()
    erased[erase_mask] = np.asarray(fill, dtype=image.dtype)
    return erased, erase_mask


def make_duplet(
    item: LabeledImage,
    old_model: SegModel,
    old_classes,
    new_classes,
    tau: float = 0.8,
    fill=0.5,
) -> Duplet:
    """Pseudo-label, fuse, erase: the full duplet for one incremental image."""
    pseudo, conf = predict_pseudo(old_model, item.image)
    rt = fuse_targets(item.mask, pseudo, conf, tau)
    erased_image, erase_mask = erase_new_pixels(item.image, item.mask, new_classes, fill)
    erased_target = rt.labels.copy()
    erased_target[erase_mask] = IGNORE
    return Duplet(
        original=item,
        refined=rt,
        erased_image=erased_image,
        erased_target=erased_target,
        old_pixels=old_pixel_set(rt, old_classes),
    )


def as_double(duplet: Duplet) -> Duplet:
    """Duplicate the original instead of erasing (sample-count control)."""
    return Duplet(
        original=duplet.original,
        refined=duplet.refined,
        erased_image=duplet.original.image.copy(),
        erased_target=duplet.refined.labels.copy(),
        old_pixels=duplet.old_pixels,
    )


def _batch_from(chosen: list[Duplet]) -> DupletBatch:
    items: list[DupletItem] = []
    for d in chosen:
        i = len(items)
        items.append(
            DupletItem(
                image=d.original.image,
                target=d.refined.labels,
                is_erased=False,
                old_pixels=d.old_pixels,
                pair_index=i + 1,
            )
        )
        items.append(
            DupletItem(
                image=d.erased_image,
                target=d.erased_target,
                is_erased=True,
                old_pixels=d.old_pixels,
                pair_index=i,
            )
        )
    return DupletBatch(items=items, duplets=chosen)


def compose_batch(duplets: list[Duplet], batch_size: int, rng: np.random.Generator) -> DupletBatch:
    """Draw one half-original / half-erased batch; order is rng-deterministic."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    if not duplets:
        raise ValueError("no duplets to batch")
    n_pairs = batch_size // 2
    replace = n_pairs > len(duplets)
    idx = rng.choice(len(duplets), size=n_pairs, replace=replace)
    return _batch_from([duplets[int(i)] for i in idx])


def epoch_batches(duplets: list[Duplet], batch_size: int, rng: np.random.Generator):
    """Shuffle once and yield full batches covering the epoch.

    A trailing remainder smaller than half a batch is dropped; when the whole
    set is smaller than that, one batch padded by resampling is yielded.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    if not duplets:
        raise ValueError("no duplets to batch")
    n_pairs = batch_size // 2
    order = rng.permutation(len(duplets))
    if len(duplets) < n_pairs:
        pad = rng.choice(len(duplets), size=n_pairs - len(duplets), replace=True)
        chosen = [duplets[int(i)] for i in order] + [duplets[int(i)] for i in pad]
        yield _batch_from(chosen)
        return
    for start in range(0, len(order) - n_pairs + 1, n_pairs):
        yield _batch_from([duplets[int(i)] for i in order[start : start + n_pairs]])
