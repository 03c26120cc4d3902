"""Analytic parameter gradients of every loss term versus central finite
differences, on a 4x4 image and a 3-channel toy model at float64."""

import numpy as np
import pytest
import torch

from ctxseg.duplet import Duplet
from ctxseg.losses import LossHyper, bps_loss, ctx_loss, kd_loss, ps_loss, total_loss, weight_map
from ctxseg.model import ArchConfig, SegModel, softmax_scores
from ctxseg.pseudo import PixelSet, RefinedTarget, old_pixel_set
from ctxseg.synth import LabeledImage

TINY = ArchConfig(widths=(4,), feature_channels=4, gn_groups=2)
REL_TOL = 1e-4
FD_H = 1e-6


def fd_grads(model: torch.nn.Module, loss_fn) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + FD_H
                up = float(loss_fn())
                flat[i] = orig - FD_H
                dn = float(loss_fn())
                flat[i] = orig
                out.append((up - dn) / (2 * FD_H))
    return torch.tensor(out, dtype=torch.float64)


def analytic_grads(model: torch.nn.Module, loss_fn) -> torch.Tensor:
    model.zero_grad()
    loss_fn().backward()
    return torch.cat(
        [
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
            for p in model.parameters()
        ]
    )


def assert_grad_match(model, loss_fn):
    a = analytic_grads(model, loss_fn)
    f = fd_grads(model, loss_fn)
    denom = max(float(torch.linalg.norm(f)), 1e-12)
    rel = float(torch.linalg.norm(a - f)) / denom
    assert rel < REL_TOL, f"relative gradient error {rel:.3e}"


@pytest.fixture()
def setup():
    torch.manual_seed(0)
    model = SegModel(TINY, num_fg_classes=2, seed=0).double()
    prev = SegModel(TINY, num_fg_classes=2, seed=1).double()
    g = torch.Generator().manual_seed(2)
    x = torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
    xbar = torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
    labels = np.array(
        [[0, 1, 2, 0], [1, 1, 2, 255], [0, 2, 2, 0], [255, 1, 0, 2]], dtype=np.uint8
    )
    rt = RefinedTarget(labels=labels, beta=0.7, accepted_mask=labels == 1)
    old_pixels = old_pixel_set(rt, [1])
    return model, prev, x, xbar, rt, old_pixels


def test_ps_loss_gradients(setup):
    model, _, x, _, rt, _ = setup

    def loss_fn():
        _, s = model.forward_single(x)
        return ps_loss(softmax_scores(s), rt)

    assert_grad_match(model, loss_fn)


def test_bps_loss_gradients(setup):
    model, _, x, _, rt, old_pixels = setup
    eta = weight_map(rt, old_pixels, new_classes=[2])
    assert (eta > 1.0).any()

    def loss_fn():
        _, s = model.forward_single(x)
        return bps_loss(softmax_scores(s), rt, eta)

    assert_grad_match(model, loss_fn)


def test_kd_loss_gradients(setup):
    model, prev, x, _, _, _ = setup
    with torch.no_grad():
        prev_feat, _ = prev.forward_single(x)

    def loss_fn():
        f, _ = model.forward_single(x)
        return kd_loss(f, prev_feat)

    assert_grad_match(model, loss_fn)


def test_ctx_loss_gradients(setup):
    model, _, x, xbar, _, old_pixels = setup
    assert len(old_pixels) > 0

    def loss_fn():
        _, sx = model.forward_single(x)
        _, sxb = model.forward_single(xbar)
        return ctx_loss(sx, sxb, old_pixels, old_classes=[1])

    assert_grad_match(model, loss_fn)


def test_total_loss_gradients(setup):
    model, prev, x, xbar, rt, old_pixels = setup
    img = x.permute(1, 2, 0).numpy().astype(np.float32)
    erased_target = rt.labels.copy()
    erased_target[rt.labels == 2] = 255
    duplet = Duplet(
        original=LabeledImage(image=img, mask=rt.labels.copy(), id="g"),
        refined=rt,
        erased_image=xbar.permute(1, 2, 0).numpy().astype(np.float32),
        erased_target=erased_target,
        old_pixels=old_pixels,
    )
    with torch.no_grad():
        pfx, _ = prev.forward_single(x)
        pfxb, _ = prev.forward_single(xbar)
    hyper = LossHyper(alpha=1.0, gamma=0.01, balance=True, use_ctx=True)

    def loss_fn():
        fx, sx = model.forward_single(x)
        fxb, sxb = model.forward_single(xbar)
        total, _ = total_loss(duplet, (fx, sx), (fxb, sxb), pfx, pfxb, [1], [2], hyper)
        return total

    assert_grad_match(model, loss_fn)


def test_no_gradient_reaches_frozen_model(setup):
    model, prev, x, _, _, _ = setup
    for p in prev.parameters():
        p.requires_grad_(True)
    prev_feat, _ = prev.forward_single(x)

    f, _ = model.forward_single(x)
    kd_loss(f, prev_feat.detach()).backward()
    assert all(p.grad is None for p in prev.parameters())
