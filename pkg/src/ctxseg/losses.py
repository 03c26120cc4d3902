"""Loss terms for duplet training.

All losses are plain functions of torch tensors and return scalar tensors,
so parameter gradients come straight from autograd. Reductions follow fixed
row-major summation order and are exactly as defined, without hidden
normalization: the distillation and consistency terms are unnormalized sums
(an optional mean-reduction flag exists, default off) because the default
consistency weight gamma=0.01 is calibrated against the unnormalized form.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .duplet import Duplet
from .model import phi_pool, softmax_scores
from .pseudo import PixelSet, RefinedTarget
from .synth import IGNORE

LOG_EPS = 1e-12  # clamp for log(prob); triggering is recorded in the breakdown


def _ce_terms(
    prob: torch.Tensor, labels: np.ndarray, eps: float
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Per-pixel -log p(label): (H,W) terms, valid mask, clamp count."""
    if prob.dim() != 3:
        raise ValueError(f"expected (C,H,W) probabilities, got {tuple(prob.shape)}")
    if prob.shape[1:] != labels.shape:
        raise ValueError("probability map and labels must share a spatial extent")
    labels_t = torch.from_numpy(np.ascontiguousarray(labels.astype(np.int64)))
    valid = labels_t != IGNORE
    safe = torch.where(valid, labels_t, torch.zeros_like(labels_t))
    gathered = prob.gather(0, safe.unsqueeze(0)).squeeze(0)
    clamped = int((valid & (gathered < eps)).sum())
    terms = -torch.log(gathered.clamp_min(eps))
    return terms, valid, clamped


def _weighted_ce(
    prob: torch.Tensor,
    labels: np.ndarray,
    beta: float,
    eta: np.ndarray | None,
    eps: float,
) -> tuple[torch.Tensor, int]:
    terms, valid, clamped = _ce_terms(prob, labels, eps)
    if eta is not None:
        terms = terms * torch.as_tensor(eta, dtype=terms.dtype)
    h, w = labels.shape
    return (beta / (w * h)) * (terms * valid).sum(), clamped


def pseudo_ce(
    prob: torch.Tensor,
    labels: np.ndarray,
    beta: float,
    eta: np.ndarray | None = None,
    eps: float = LOG_EPS,
) -> torch.Tensor:
    """beta-scaled cross-entropy against a refined label map.

    Sums -log p over non-ignore pixels, optionally weighted per pixel by
    ``eta``, and divides by the total pixel count W*H (not the valid count).
    """
    loss, _ = _weighted_ce(prob, labels, beta, eta, eps)
    return loss


def ps_loss(prob: torch.Tensor, rt: RefinedTarget, eps: float = LOG_EPS) -> torch.Tensor:
    """Pseudo-labeling cross-entropy of a refined target."""
    return pseudo_ce(prob, rt.labels, rt.beta, eta=None, eps=eps)


def bps_loss(
    prob: torch.Tensor, rt: RefinedTarget, eta: np.ndarray, eps: float = LOG_EPS
) -> torch.Tensor:
    """ps_loss with each pixel's term scaled by its class-balance weight."""
    return pseudo_ce(prob, rt.labels, rt.beta, eta=eta, eps=eps)


def weight_map(
    rt: RefinedTarget,
    old_pixels: PixelSet,
    new_classes: Sequence[int],
    ratio_cap: float = 20.0,
) -> np.ndarray:
    """Per-pixel loss weights: 0.5 + sigmoid(N_old / N_new) on old-class pixels.

    Everywhere else the weight is 1. When the image has old pixels but no
    new-class pixels the ratio is replaced by ``ratio_cap`` (weight ~1.5).
    """
    eta = np.ones(rt.labels.shape, dtype=np.float64)
    n_old = len(old_pixels)
    if n_old == 0:
        return eta
    n_new = int(np.isin(rt.labels, list(new_classes)).sum())
    ratio = n_old / n_new if n_new > 0 else ratio_cap
    eta[old_pixels.hs, old_pixels.ws] = 0.5 + 1.0 / (1.0 + math.exp(-ratio))
    return eta


def kd_loss(
    feat_t: torch.Tensor, feat_prev: torch.Tensor, normalize: bool = False
) -> torch.Tensor:
    """Squared distance between the pooled descriptors of two feature maps."""
    if feat_t.shape != feat_prev.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(feat_t.shape)} vs {tuple(feat_prev.shape)}"
        )
    diff = phi_pool(feat_t) - phi_pool(feat_prev)
    sq = diff * diff
    return sq.mean() if normalize else sq.sum()


def ctx_loss(
    score_x: torch.Tensor,
    score_xbar: torch.Tensor,
    old_pixels: PixelSet,
    old_classes: Sequence[int],
    normalize: bool = False,
) -> torch.Tensor:
    """Consistency of old-class scores between an image and its erased copy.

    Sums squared score differences over old-pixel locations and old-class
    channels; computed on pre-softmax scores. Symmetric in its two maps.
    """
    if score_x.shape != score_xbar.shape:
        raise ValueError("score maps must share a shape")
    old_classes = list(old_classes)
    if len(old_pixels) == 0 or not old_classes:
        return torch.zeros((), dtype=score_x.dtype)
    ch = torch.as_tensor(old_classes, dtype=torch.int64)
    hs = torch.from_numpy(old_pixels.hs)
    ws = torch.from_numpy(old_pixels.ws)
    diff = score_xbar[ch][:, hs, ws] - score_x[ch][:, hs, ws]
    sq = diff * diff
    return sq.mean() if normalize else sq.sum()


@dataclass
class LossHyper:
    """Scalar knobs of the incremental objective."""

    alpha: float = 1.0  # distillation weight
    gamma: float = 0.01  # consistency weight
    tau: float = 0.8  # pseudo-label acceptance threshold
    eps: float = LOG_EPS
    ratio_cap: float = 20.0
    balance: bool = True  # class-balance weights on the original member
    use_ctx: bool = True  # consistency term on/off
    normalize_kd: bool = False
    normalize_ctx: bool = False


@dataclass
class LossBreakdown:
    """Per-image loss components as logged to the training log.

    Fields that a configuration never computes stay None, so the log doubles
    as an assertion that disabled terms were not touched. ``total`` always
    equals the combination of the non-None components.
    """

    total: float
    l_ps: float | None = None  # CE on the erased member (or the only member)
    l_bps: float | None = None  # CE on the original member, weighted when balancing
    l_kd: float | None = None  # distillation, summed over both members
    l_ctx: float | None = None
    l_dup: float | None = None  # l_bps + l_ps + alpha * l_kd
    alpha: float = 0.0
    gamma: float = 0.0
    tau: float = 0.0
    beta: float = 0.0
    eta_old: float | None = None  # weight applied on old pixels, None if unused
    clamp_events: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def total_loss(
    duplet: Duplet,
    cur_x: tuple[torch.Tensor, torch.Tensor],
    cur_xbar: tuple[torch.Tensor, torch.Tensor],
    prev_x_features: torch.Tensor | None,
    prev_xbar_features: torch.Tensor | None,
    old_classes: Sequence[int],
    new_classes: Sequence[int],
    hyper: LossHyper,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Full duplet objective for one image pair.

    total = [bps(x) + alpha*kd(x)] + [ps(xbar) + alpha*kd(xbar)] + gamma*ctx.
    Gradient flows through the current model only; the frozen features are
    detached here regardless of how they were produced.
    """
    if prev_x_features is None or prev_xbar_features is None:
        raise ValueError("incremental loss needs frozen previous-step features")
    feat_x, score_x = cur_x
    feat_xbar, score_xbar = cur_xbar
    rt = duplet.refined

    eta = None
    eta_old = None
    if hyper.balance:
        eta = weight_map(rt, duplet.old_pixels, new_classes, hyper.ratio_cap)
        if len(duplet.old_pixels):
            eta_old = float(eta[duplet.old_pixels.hs[0], duplet.old_pixels.ws[0]])

    prob_x = softmax_scores(score_x)
    prob_xbar = softmax_scores(score_xbar)
    l_bps, clamp_x = _weighted_ce(prob_x, rt.labels, rt.beta, eta, hyper.eps)
    l_ps, clamp_xbar = _weighted_ce(prob_xbar, duplet.erased_target, rt.beta, None, hyper.eps)
    l_kd = kd_loss(feat_x, prev_x_features.detach(), hyper.normalize_kd) + kd_loss(
        feat_xbar, prev_xbar_features.detach(), hyper.normalize_kd
    )
    l_dup = l_bps + l_ps + hyper.alpha * l_kd

    if hyper.use_ctx:
        l_ctx = ctx_loss(score_x, score_xbar, duplet.old_pixels, old_classes, hyper.normalize_ctx)
        total = l_dup + hyper.gamma * l_ctx
    else:
        l_ctx = None
        total = l_dup

    breakdown = LossBreakdown(
        total=float(total.detach()),
        l_ps=float(l_ps.detach()),
        l_bps=float(l_bps.detach()),
        l_kd=float(l_kd.detach()),
        l_ctx=None if l_ctx is None else float(l_ctx.detach()),
        l_dup=float(l_dup.detach()),
        alpha=hyper.alpha,
        gamma=hyper.gamma,
        tau=hyper.tau,
        beta=rt.beta,
        eta_old=eta_old,
        clamp_events=clamp_x + clamp_xbar,
    )
    return total, breakdown


def single_total_loss(
    refined: RefinedTarget,
    old_pixels: PixelSet,
    cur: tuple[torch.Tensor, torch.Tensor],
    prev_features: torch.Tensor | None,
    new_classes: Sequence[int],
    hyper: LossHyper,
    balanced: bool,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Single-image objective ps/bps + alpha*kd (no duplet, no consistency)."""
    if prev_features is None:
        raise ValueError("incremental loss needs frozen previous-step features")
    feat, score = cur
    prob = softmax_scores(score)

    eta = None
    eta_old = None
    if balanced:
        eta = weight_map(refined, old_pixels, new_classes, hyper.ratio_cap)
        if len(old_pixels):
            eta_old = float(eta[old_pixels.hs[0], old_pixels.ws[0]])
    l_ce, clamped = _weighted_ce(prob, refined.labels, refined.beta, eta, hyper.eps)
    l_kd = kd_loss(feat, prev_features.detach(), hyper.normalize_kd)
    total = l_ce + hyper.alpha * l_kd

    breakdown = LossBreakdown(
        total=float(total.detach()),
        l_ps=None if balanced else float(l_ce.detach()),
        l_bps=float(l_ce.detach()) if balanced else None,
        l_kd=float(l_kd.detach()),
        l_ctx=None,
        l_dup=None,
        alpha=hyper.alpha,
        gamma=hyper.gamma,
        tau=hyper.tau,
        beta=refined.beta,
        eta_old=eta_old,
        clamp_events=clamped,
    )
    return total, breakdown
