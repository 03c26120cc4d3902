"""Continual training loop: plain cross-entropy at step 1, duplet objectives
with a frozen predecessor at later steps.

Ablation values select which parts of the incremental objective run:

- ``ft``          plain cross-entropy on the step's ground truth (lower bound)
- ``baseline``    pseudo-label CE + distillation on originals only
- ``double``      originals duplicated instead of erased (sample-count control)
- ``duplet``      originals + erased copies
- ``duplet_ctx``  duplet + consistency term
- ``balance``     baseline with class-balance weights
- ``full``        duplet + consistency + balance

Determinism contract: model init, shuffling and flips are all seeded; data
and gradient application are single-process, so a fixed seed reproduces a
step bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .duplet import Duplet, DupletBatch, as_double, epoch_batches, make_duplet
from .evaluate import MetricsReport, evaluate_model, miou, task_groups
from .losses import LossBreakdown, LossHyper, single_total_loss, total_loss
from .model import (
    ArchConfig,
    SegModel,
    extend_head,
    freeze,
    image_to_tensor,
    load_checkpoint,
    save_checkpoint,
)
from .pseudo import PixelSet, RefinedTarget
from .synth import IGNORE, LabeledImage, StepDataset, TaskSequence, build_task_sequence, materialize_step

ABLATIONS = ("ft", "baseline", "double", "duplet", "duplet_ctx", "balance", "full")


@dataclass
class TrainConfig:
    protocol: str = "15-1"
    mode: str = "overlapped"
    epochs_per_step: int = 10
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 1.0
    gamma: float = 0.01
    tau: float = 0.8
    seed: int = 0
    ablation: str = "full"
    fill: str = "mean"  # "mean" | "zero" | one float | "r,g,b"
    flip: bool = False
    ratio_cap: float = 20.0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0,1]")
        if self.epochs_per_step < 0:
            raise ValueError("epochs_per_step must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.mode not in ("disjoint", "overlapped"):
            raise ValueError(f"mode must be 'disjoint' or 'overlapped', got {self.mode!r}")

    @property
    def uses_duplets(self) -> bool:
        return self.ablation in ("double", "duplet", "duplet_ctx", "full")

    @property
    def uses_pseudo(self) -> bool:
        return self.ablation != "ft"

    def hyper(self) -> LossHyper:
        return LossHyper(
            alpha=self.alpha,
            gamma=self.gamma,
            tau=self.tau,
            ratio_cap=self.ratio_cap,
            balance=self.ablation in ("balance", "full"),
            use_ctx=self.ablation in ("duplet_ctx", "full"),
        )


@dataclass
class StepArtifacts:
    step_index: int
    model: SegModel
    frozen_prev: SegModel | None
    epoch_log: list[dict]
    metrics: MetricsReport | None = None
    checkpoint_path: Path | None = None


def resolve_fill(fill: str, items: list[LabeledImage]) -> np.ndarray:
    """Erase fill value: per-channel dataset mean, zero, or explicit floats."""
    if fill == "mean":
        if not items:
            return np.full(3, 0.5, dtype=np.float32)
        return np.mean([it.image.mean(axis=(0, 1)) for it in items], axis=0).astype(np.float32)
    if fill == "zero":
        return np.zeros(3, dtype=np.float32)
    vals = [float(v) for v in fill.split(",")]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ValueError(f"fill must be 'mean', 'zero', one float or 'r,g,b', got {fill!r}")
    return np.asarray(vals, dtype=np.float32)


def _stack_images(images: list[np.ndarray]) -> torch.Tensor:
    return torch.stack([image_to_tensor(img) for img in images])


def _stack_targets(targets: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([t.astype(np.int64) for t in targets]))


def _mean_breakdown(brs: list[LossBreakdown]) -> LossBreakdown:
    def mean_of(name: str) -> float | None:
        vals = [getattr(b, name) for b in brs if getattr(b, name) is not None]
        return float(np.mean(vals)) if vals else None

    first = brs[0]
    return LossBreakdown(
        total=float(np.mean([b.total for b in brs])),
        l_ps=mean_of("l_ps"),
        l_bps=mean_of("l_bps"),
        l_kd=mean_of("l_kd"),
        l_ctx=mean_of("l_ctx"),
        l_dup=mean_of("l_dup"),
        alpha=first.alpha,
        gamma=first.gamma,
        tau=first.tau,
        beta=float(np.mean([b.beta for b in brs])),
        eta_old=mean_of("eta_old"),
        clamp_events=sum(b.clamp_events for b in brs),
    )


class _StepLog:
    """JSON-lines writer plus per-epoch aggregation."""

    def __init__(self, path: Path | None):
        self.path = path
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = path.open("w")
        self.epoch_log: list[dict] = []
        self._epoch_brs: list[LossBreakdown] = []
        self._epoch = 0

    def batch(self, epoch: int, batch_idx: int, br: LossBreakdown) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps({"epoch": epoch, "batch": batch_idx, **br.to_json()}) + "\n")
        self._epoch_brs.append(br)
        self._epoch = epoch

    def end_epoch(self) -> None:
        if self._epoch_brs:
            agg = _mean_breakdown(self._epoch_brs)
            self.epoch_log.append({"epoch": self._epoch, **agg.to_json()})
            self._epoch_brs = []

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _hflip_item(item: LabeledImage) -> LabeledImage:
    return LabeledImage(
        image=np.ascontiguousarray(item.image[:, ::-1]),
        mask=np.ascontiguousarray(item.mask[:, ::-1]),
        id=item.id,
    )


def _hflip_duplet(d: Duplet) -> Duplet:
    w = d.original.mask.shape[1]
    coords = d.old_pixels.coords.copy()
    coords[:, 0] = w - 1 - coords[:, 0]
    return Duplet(
        original=_hflip_item(d.original),
        refined=RefinedTarget(
            labels=np.ascontiguousarray(d.refined.labels[:, ::-1]),
            beta=d.refined.beta,
            accepted_mask=np.ascontiguousarray(d.refined.accepted_mask[:, ::-1]),
        ),
        erased_image=np.ascontiguousarray(d.erased_image[:, ::-1]),
        erased_target=np.ascontiguousarray(d.erased_target[:, ::-1]),
        old_pixels=PixelSet(coords=coords),
    )


def _index_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    if n <= batch_size:
        yield order
        return
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def _ce_breakdown(value: float, config: TrainConfig) -> LossBreakdown:
    return LossBreakdown(
        total=value, alpha=config.alpha, gamma=config.gamma, tau=config.tau, beta=0.0
    )


def train_first_step(
    config: TrainConfig,
    step_dataset: StepDataset,
    log_dir: Path | None = None,
) -> StepArtifacts:
    """Train from scratch with per-pixel cross-entropy on C_0 ∪ C_1."""
    config.validate()
    if not step_dataset.items:
        raise ValueError("step dataset is empty")
    num_fg = max(step_dataset.visible_classes)
    model = SegModel(config.arch, num_fg_classes=num_fg, seed=config.seed)
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng([config.seed, 1])
    log = _StepLog(log_dir / "step01.jsonl" if log_dir else None)

    items = step_dataset.items
    model.train()
    for epoch in range(config.epochs_per_step):
        for b, idx in enumerate(_index_batches(len(items), config.batch_size, rng)):
            batch = [items[int(i)] for i in idx]
            if config.flip:
                batch = [_hflip_item(it) if rng.random() < 0.5 else it for it in batch]
            images = _stack_images([it.image for it in batch])
            targets = _stack_targets([it.mask for it in batch])
            _, scores = model(images)
            loss = F.cross_entropy(scores, targets, ignore_index=IGNORE)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.batch(epoch, b, _ce_breakdown(float(loss.detach()), config))
        log.end_epoch()
    log.close()
    return StepArtifacts(step_index=1, model=model, frozen_prev=None, epoch_log=log.epoch_log)


def _duplet_batch_loss(
    model: SegModel,
    frozen: SegModel,
    batch: DupletBatch,
    old_classes,
    new_classes,
    hyper: LossHyper,
) -> tuple[torch.Tensor, LossBreakdown]:
    n = len(batch.duplets)
    images = _stack_images(
        [d.original.image for d in batch.duplets] + [d.erased_image for d in batch.duplets]
    )
    feats, scores = model(images)
    with torch.no_grad():
        pfeats, _ = frozen(images)
    totals = []
    brs = []
    for i, d in enumerate(batch.duplets):
        t, br = total_loss(
            d,
            (feats[i], scores[i]),
            (feats[n + i], scores[n + i]),
            pfeats[i],
            pfeats[n + i],
            old_classes,
            new_classes,
            hyper,
        )
        totals.append(t)
        brs.append(br)
    return torch.stack(totals).sum() / (2 * n), _mean_breakdown(brs)


def _single_batch_loss(
    model: SegModel,
    frozen: SegModel,
    duplets: list[Duplet],
    new_classes,
    hyper: LossHyper,
    balanced: bool,
) -> tuple[torch.Tensor, LossBreakdown]:
    images = _stack_images([d.original.image for d in duplets])
    feats, scores = model(images)
    with torch.no_grad():
        pfeats, _ = frozen(images)
    totals = []
    brs = []
    for i, d in enumerate(duplets):
        t, br = single_total_loss(
            d.refined, d.old_pixels, (feats[i], scores[i]), pfeats[i], new_classes, hyper, balanced
        )
        totals.append(t)
        brs.append(br)
    return torch.stack(totals).mean(), _mean_breakdown(brs)


def train_increment_step(
    config: TrainConfig,
    step_dataset: StepDataset,
    prev_model: SegModel,
    task: TaskSequence,
    t: int,
    log_dir: Path | None = None,
) -> StepArtifacts:
    """One incremental step: extend the head, freeze the predecessor, train."""
    config.validate()
    if prev_model is None:
        raise ValueError("incremental step needs the previous-step model")
    if t < 2:
        raise ValueError("incremental steps start at t=2")
    if not step_dataset.items:
        raise ValueError(f"step {t} dataset is empty")

    old_classes = task.old_classes(t)
    new_classes = task.new_classes(t)
    frozen = freeze(prev_model)
    model = extend_head(prev_model, len(new_classes))
    model.train()
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng([config.seed, t])
    log = _StepLog(log_dir / f"step{t:02d}.jsonl" if log_dir else None)
    hyper = config.hyper()
    items = step_dataset.items

    duplets: list[Duplet] = []
    if config.uses_pseudo:
        fill = resolve_fill(config.fill, items)
        duplets = [
            make_duplet(it, frozen, old_classes, new_classes, tau=config.tau, fill=fill)
            for it in items
        ]
        if config.ablation == "double":
            duplets = [as_double(d) for d in duplets]

    for epoch in range(config.epochs_per_step):
        if config.ablation == "ft":
            for b, idx in enumerate(_index_batches(len(items), config.batch_size, rng)):
                batch = [items[int(i)] for i in idx]
                if config.flip:
                    batch = [_hflip_item(it) if rng.random() < 0.5 else it for it in batch]
                images = _stack_images([it.image for it in batch])
                targets = _stack_targets([it.mask for it in batch])
                _, scores = model(images)
                loss = F.cross_entropy(scores, targets, ignore_index=IGNORE)
                opt.zero_grad()
                loss.backward()
                opt.step()
                log.batch(epoch, b, _ce_breakdown(float(loss.detach()), config))
        elif config.uses_duplets:
            for b, batch in enumerate(epoch_batches(duplets, config.batch_size, rng)):
                if config.flip:
                    chosen = [
                        _hflip_duplet(d) if rng.random() < 0.5 else d for d in batch.duplets
                    ]
                    batch = DupletBatch(items=batch.items, duplets=chosen)
                loss, br = _duplet_batch_loss(
                    model, frozen, batch, old_classes, new_classes, hyper
                )
                opt.zero_grad()
                loss.backward()
                opt.step()
                log.batch(epoch, b, br)
        else:  # baseline / balance: originals only
            for b, idx in enumerate(_index_batches(len(duplets), config.batch_size, rng)):
                chosen = [duplets[int(i)] for i in idx]
                if config.flip:
                    chosen = [_hflip_duplet(d) if rng.random() < 0.5 else d for d in chosen]
                loss, br = _single_batch_loss(
                    model, frozen, chosen, new_classes, hyper, balanced=hyper.balance
                )
                opt.zero_grad()
                loss.backward()
                opt.step()
                log.batch(epoch, b, br)
        log.end_epoch()
    log.close()
    return StepArtifacts(
        step_index=t, model=model, frozen_prev=prev_model, epoch_log=log.epoch_log
    )


def run_continual(
    config: TrainConfig,
    dataset: list[LabeledImage],
    test_set: list[LabeledImage],
    num_fg_classes: int,
    out_dir: Path | None = None,
    run_tag: str = "",
    resume: bool = False,
) -> tuple[list[StepArtifacts], MetricsReport]:
    """Train the whole task sequence and evaluate after every step.

    With ``out_dir``, checkpoints / logs / metrics for this run land under
    ``out_dir/checkpoints/<tag>`` etc.; with ``resume`` completed steps are
    reloaded instead of retrained.
    """
    config.validate()
    task = build_task_sequence(num_fg_classes, config.protocol, config.mode)
    ckpt_dir = out_dir / "checkpoints" / run_tag if out_dir else None
    log_dir = out_dir / "logs" / run_tag if out_dir else None
    met_dir = out_dir / "metrics" / run_tag if out_dir else None
    artifacts: list[StepArtifacts] = []
    history: list[dict] = []
    prev_model: SegModel | None = None
    report: MetricsReport | None = None

    for t in range(1, task.num_steps + 1):
        ckpt = ckpt_dir / f"step{t:02d}.pt" if ckpt_dir else None
        step_metrics_path = met_dir / f"step{t:02d}.json" if met_dir else None
        if (
            resume
            and ckpt is not None
            and ckpt.exists()
            and step_metrics_path is not None
            and step_metrics_path.exists()
        ):
            model, _ = load_checkpoint(ckpt)
            art = StepArtifacts(
                step_index=t,
                model=model,
                frozen_prev=prev_model,
                epoch_log=[],
                checkpoint_path=ckpt,
            )
            step_report = MetricsReport.load(step_metrics_path)
        else:
            step_ds = materialize_step(dataset, task, t)
            if t == 1:
                art = train_first_step(config, step_ds, log_dir)
            else:
                art = train_increment_step(config, step_ds, prev_model, task, t, log_dir)
            model = art.model
            cm = evaluate_model(
                model, test_set, num_fg_classes, known_classes=set(task.seen_classes(t))
            )
            step_report = miou(cm, task_groups(task, t))
            if ckpt is not None:
                ckpt.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, ckpt, [list(p) for p in task.partitions[:t]])
                art.checkpoint_path = ckpt
            if step_metrics_path is not None:
                step_metrics_path.parent.mkdir(parents=True, exist_ok=True)
                step_report.save(step_metrics_path)
        art.metrics = step_report
        artifacts.append(art)
        history.append(
            {
                "step": t,
                "per_class_iou": step_report.per_class_iou,
                "group_miou": step_report.group_miou,
            }
        )
        prev_model = model
        report = step_report

    final = MetricsReport(
        per_class_iou=report.per_class_iou,
        group_miou=report.group_miou,
        per_step_history=history,
    )
    if met_dir is not None:
        met_dir.mkdir(parents=True, exist_ok=True)
        final.save(met_dir / "final.json")
    return artifacts, final
