"""Synthetic multi-class shape scenes and continual-step dataset materialization.

Scenes are textured shapes (disc / square / triangle, one texture per class)
on a noisy gray background. Which classes appear together in an image is
driven by a pairwise co-occurrence matrix, so datasets with a deliberately
skewed class context can be generated on demand.

Label conventions (stable across the whole package):
- background pixels are 0
- foreground classes are 1..K
- ignore pixels are 255 and are excluded from every loss and metric
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

BACKGROUND = 0
IGNORE = 255

SHAPE_KINDS = ("disc", "square", "triangle")


def default_shape_kinds(num_classes: int) -> tuple[str, ...]:
    """Cycle disc/square/triangle so neighbouring classes differ in geometry."""
    return tuple(SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)] for c in range(1, num_classes + 1))


def uniform_cooccurrence(num_classes: int, p: float) -> np.ndarray:
    """(K+1)x(K+1) symmetric matrix with every off-diagonal pair set to ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"co-occurrence probability must be in [0,1], got {p}")
    m = np.full((num_classes + 1, num_classes + 1), p, dtype=np.float64)
    np.fill_diagonal(m, 1.0)
    m[0, :] = 0.0
    m[:, 0] = 0.0
    return m


@dataclass
class SceneSpec:
    """Parameters of the synthetic scene generator.

    ``cooccurrence[a][b]`` is the probability that class ``b`` is added to an
    image whose anchor class is ``a`` (and vice versa; the matrix must be
    symmetric). Row/column 0 belong to the background and are ignored.
    """

    image_size: tuple[int, int] = (64, 64)  # (H, W)
    num_fg_classes: int = 4
    cooccurrence: np.ndarray | None = None
    shapes_per_image: tuple[int, int] = (1, 3)
    shape_kinds: tuple[str, ...] | None = None
    shape_scale: tuple[float, float] = (0.14, 0.26)  # radius as fraction of min(H, W)
    rng_seed: int = 0

    def __post_init__(self):
        if self.cooccurrence is None:
            self.cooccurrence = uniform_cooccurrence(self.num_fg_classes, 0.3)
        else:
            self.cooccurrence = np.asarray(self.cooccurrence, dtype=np.float64)
        if self.shape_kinds is None:
            self.shape_kinds = default_shape_kinds(self.num_fg_classes)

    def validate(self) -> None:
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.num_fg_classes < 1:
            raise ValueError("need at least one foreground class")
        k = self.num_fg_classes
        if self.cooccurrence.shape != (k + 1, k + 1):
            raise ValueError(
                f"cooccurrence must be ({k + 1},{k + 1}), got {self.cooccurrence.shape}"
            )
        if np.any(self.cooccurrence < 0) or np.any(self.cooccurrence > 1):
            raise ValueError("cooccurrence entries must lie in [0,1]")
        if not np.allclose(self.cooccurrence, self.cooccurrence.T):
            raise ValueError("cooccurrence matrix must be symmetric")
        lo, hi = self.shapes_per_image
        if not (1 <= lo <= hi):
            raise ValueError(f"bad shapes_per_image range: {self.shapes_per_image}")
        if len(self.shape_kinds) != k:
            raise ValueError("shape_kinds must list one kind per foreground class")
        for kind in self.shape_kinds:
            if kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {kind!r}")


@dataclass
class LabeledImage:
    """An RGB image in [0,1] with an index-valued segmentation mask."""

    image: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray  # (H, W) uint8, values in {0..K} | {255}
    id: str

    def present_classes(self) -> set[int]:
        """Foreground classes with at least one pixel in the mask."""
        vals = np.unique(self.mask)
        return {int(v) for v in vals if v != BACKGROUND and v != IGNORE}


# distinct base colors per class, generated from evenly spaced hues
def _class_color(c: int, num_classes: int) -> np.ndarray:
    hue = (c - 1) / max(num_classes, 1)
    i = int(hue * 6.0) % 6
    f = hue * 6.0 - int(hue * 6.0)
    s, v = 0.85, 0.9
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    if kind == "disc":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(ys - cy) <= r) & (np.abs(xs - cx) <= r)
    if kind == "triangle":
        # upward triangle: inside three half-planes
        top = ys >= cy - r
        left = (xs - cx) >= -(ys - (cy + r)) * 0.6 - r
        right = (xs - cx) <= (ys - (cy + r)) * 0.6 + r
        return top & left & right & (ys <= cy + r)
    raise ValueError(f"unknown shape kind {kind!r}")


def _paint_class(img: np.ndarray, region: np.ndarray, c: int, k: int, rng: np.random.Generator):
    """Fill ``region`` with the striped texture of class ``c``."""
    h, w, _ = img.shape
    base = _class_color(c, k)
    theta = (c - 1) * math.pi / max(k, 1) + math.pi / 7
    period = 3.0 + (c % 4)
    ys, xs = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * math.pi)
    stripes = 0.5 + 0.5 * np.sin(
        2 * math.pi * (math.cos(theta) * xs + math.sin(theta) * ys) / period + phase
    )
    tex = base[None, None, :] * (0.7 + 0.3 * stripes[..., None])
    tex = tex + rng.normal(0, 0.02, size=tex.shape)
    img[region] = np.clip(tex, 0.0, 1.0)[region].astype(np.float32)


def _sample_present(spec: SceneSpec, rng: np.random.Generator) -> list[int]:
    """Anchor class plus co-occurring classes drawn from the matrix."""
    k = spec.num_fg_classes
    anchor = int(rng.integers(1, k + 1))
    present = [anchor]
    for other in range(1, k + 1):
        if other == anchor:
            continue
        if rng.random() < spec.cooccurrence[anchor, other]:
            present.append(other)
    return present


def _generate_one(spec: SceneSpec, index: int) -> LabeledImage:
    # per-image stream: reproducible independently of generation order
    rng = np.random.default_rng([spec.rng_seed, index])
    h, w = spec.image_size
    base_gray = rng.uniform(0.40, 0.60)
    img = np.clip(
        base_gray + rng.normal(0, 0.04, size=(h, w, 1)) + rng.normal(0, 0.015, size=(h, w, 3)),
        0.0,
        1.0,
    ).astype(np.float32)
    mask = np.full((h, w), BACKGROUND, dtype=np.uint8)

    present = _sample_present(spec, rng)
    lo, hi = spec.shapes_per_image
    n_shapes = max(int(rng.integers(lo, hi + 1)), len(present))
    # one shape per present class first, extras drawn among present classes
    classes = list(present)
    classes += [int(rng.choice(present)) for _ in range(n_shapes - len(present))]
    rng.shuffle(classes)

    rmin = spec.shape_scale[0] * min(h, w)
    rmax = spec.shape_scale[1] * min(h, w)
    for c in classes:
        r = rng.uniform(rmin, rmax)
        cy = rng.uniform(r * 0.6, h - r * 0.6)
        cx = rng.uniform(r * 0.6, w - r * 0.6)
        region = _shape_mask(spec.shape_kinds[c - 1], h, w, cy, cx, r)
        if not region.any():
            continue
        _paint_class(img, region, c, spec.num_fg_classes, rng)
        mask[region] = c

    # overlap can bury a class completely; repaint a small patch to keep the
    # sampled class inventory honest
    for c in present:
        if not np.any(mask == c):
            r = max(rmin * 0.6, 2.0)
            cy = rng.uniform(r, h - r)
            cx = rng.uniform(r, w - r)
            region = _shape_mask("disc", h, w, cy, cx, r)
            _paint_class(img, region, c, spec.num_fg_classes, rng)
            mask[region] = c

    return LabeledImage(image=img, mask=mask, id=f"img{index:05d}")


def generate_dataset(spec: SceneSpec, count: int) -> list[LabeledImage]:
    """Generate ``count`` scenes; deterministic for a fixed ``spec.rng_seed``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    spec.validate()
    return [_generate_one(spec, i) for i in range(count)]


@dataclass
class TaskSequence:
    """Ordered disjoint class partition C_1..C_T plus the step protocol mode."""

    partitions: list[tuple[int, ...]]
    mode: str  # "disjoint" | "overlapped"
    background_label: int = BACKGROUND
    ignore_label: int = IGNORE

    def __post_init__(self):
        if self.mode not in ("disjoint", "overlapped"):
            raise ValueError(f"mode must be 'disjoint' or 'overlapped', got {self.mode!r}")
        if len(self.partitions) < 1:
            raise ValueError("need at least one step")
        seen: set[int] = set()
        for part in self.partitions:
            if not part:
                raise ValueError("empty class partition")
            if seen & set(part):
                raise ValueError("partitions must be pairwise disjoint")
            seen |= set(part)

    @property
    def num_steps(self) -> int:
        return len(self.partitions)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for part in self.partitions for c in part)

    def new_classes(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return self.partitions[t - 1]

    def old_classes(self, t: int) -> tuple[int, ...]:
        """Classes of steps 1..t-1 (empty at t=1)."""
        self._check_step(t)
        return tuple(c for part in self.partitions[: t - 1] for c in part)

    def seen_classes(self, t: int) -> tuple[int, ...]:
        """Classes of steps 1..t."""
        self._check_step(t)
        return tuple(c for part in self.partitions[:t] for c in part)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} out of range 1..{self.num_steps}")


def build_task_sequence(total_fg_classes: int, protocol: str, mode: str) -> TaskSequence:
    """Split classes 1..N into steps per an ``a-b`` protocol string.

    ``a`` classes are learnt first, then ``b`` per additional step until all
    classes are used ("15-1" over 20 classes: [15,1,1,1,1,1]). ``a-0`` is the
    single-step (joint) degenerate case.
    """
    parts = protocol.split("-")
    if len(parts) != 2:
        raise ValueError(f"protocol must look like 'a-b', got {protocol!r}")
    try:
        a, b = int(parts[0]), int(parts[1])
    except ValueError as e:
        raise ValueError(f"protocol must look like 'a-b', got {protocol!r}") from e
    if a < 1 or b < 0:
        raise ValueError(f"bad protocol {protocol!r}")
    if b == 0:
        if a != total_fg_classes:
            raise ValueError(
                f"protocol {protocol!r} needs exactly {a} classes, dataset has {total_fg_classes}"
            )
        sizes = [a]
    else:
        if total_fg_classes < a or (total_fg_classes - a) % b != 0:
            raise ValueError(
                f"protocol {protocol!r} does not partition {total_fg_classes} classes"
            )
        sizes = [a] + [b] * ((total_fg_classes - a) // b)
    partitions = []
    nxt = 1
    for size in sizes:
        partitions.append(tuple(range(nxt, nxt + size)))
        nxt += size
    return TaskSequence(partitions=partitions, mode=mode)


@dataclass
class StepDataset:
    """Images visible at one continual step, masks relabeled to C_t ∪ {0, 255}."""

    step_index: int
    items: list[LabeledImage]
    visible_classes: tuple[int, ...]


def relabel_for_step(mask: np.ndarray, visible: set[int]) -> np.ndarray:
    """Collapse every label outside ``visible`` to background; ignore is kept."""
    out = mask.copy()
    keep = np.isin(out, list(visible) + [IGNORE])
    out[~keep] = BACKGROUND
    return out


def materialize_step(dataset: list[LabeledImage], task: TaskSequence, t: int) -> StepDataset:
    """Select and relabel images for step ``t``.

    Disjoint: images whose foreground is within C_{1:t} and that contain at
    least one current-class pixel. Overlapped: any image with a current-class
    pixel, future classes allowed (they are collapsed to background).
    """
    task._check_step(t)
    current = set(task.new_classes(t))
    allowed = set(task.seen_classes(t))
    items = []
    for item in dataset:
        present = item.present_classes()
        if not present & current:
            continue
        if task.mode == "disjoint" and not present <= allowed:
            continue
        items.append(
            LabeledImage(
                image=item.image,
                mask=relabel_for_step(item.mask, current),
                id=item.id,
            )
        )
    return StepDataset(step_index=t, items=items, visible_classes=task.new_classes(t))


def save_dataset(items: list[LabeledImage], out_dir: str | Path) -> Path:
    """Write images/masks as 8-bit PNG plus a JSON-lines manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with manifest.open("w") as fh:
        for item in items:
            img_rel = f"images/{item.id}.png"
            mask_rel = f"masks/{item.id}.png"
            img8 = np.clip(np.rint(item.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(img8, mode="RGB").save(out / img_rel)
            Image.fromarray(item.mask, mode="L").save(out / mask_rel)
            fh.write(
                json.dumps(
                    {
                        "id": item.id,
                        "image": img_rel,
                        "mask": mask_rel,
                        "classes": sorted(item.present_classes()),
                    }
                )
                + "\n"
            )
    return manifest


def load_dataset(in_dir: str | Path) -> list[LabeledImage]:
    """Inverse of :func:`save_dataset` (images come back quantized to 1/255)."""
    root = Path(in_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    items = []
    with manifest.open() as fh:
        for line in fh:
            rec = json.loads(line)
            img = np.asarray(Image.open(root / rec["image"]).convert("RGB"), dtype=np.float32)
            mask = np.asarray(Image.open(root / rec["mask"]), dtype=np.uint8)
            items.append(LabeledImage(image=img / 255.0, mask=mask, id=rec["id"]))
    return items
