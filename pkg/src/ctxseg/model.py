"""Small encoder-decoder segmentation network with an expandable 1x1 head.

The backbone downsamples by stride-2 convolutions and mirrors back up with
nearest-neighbour upsampling, so score maps always match the input size.
GroupNorm keeps the net free of cross-step batch statistics. The head has one
output channel per known class (background + all classes seen so far) and can
be widened in place when a continual step introduces new classes.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, ...] = (24, 32, 48)  # encoder stage widths, one stride-2 stage each
    feature_channels: int = 24  # decoder output width (input to the head)
    gn_groups: int = 4

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.widths)


def _gn(channels: int, max_groups: int) -> nn.GroupNorm:
    groups = max_groups
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class SegModel(nn.Module):
    """Encoder-decoder backbone F plus 1x1 convolution head G.

    ``forward`` returns the full-resolution feature map F(x) and the score
    map S(x) = G(F(x)); probabilities are obtained via :func:`softmax_scores`.
    """

    def __init__(self, arch: ArchConfig, num_fg_classes: int, seed: int = 0):
        super().__init__()
        if num_fg_classes < 1:
            raise ValueError("model needs at least one foreground class")
        self.arch = arch
        self.num_fg_classes = num_fg_classes
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            enc = []
            prev = 3
            for w in arch.widths:
                enc.append(
                    nn.Sequential(
                        nn.Conv2d(prev, w, 3, stride=2, padding=1),
                        _gn(w, arch.gn_groups),
                        nn.ReLU(inplace=True),
                    )
                )
                prev = w
            self.encoder = nn.ModuleList(enc)
            dec = []
            dec_widths = list(arch.widths[:-1][::-1]) + [arch.feature_channels]
            for w in dec_widths:
                dec.append(
                    nn.Sequential(
                        nn.Conv2d(prev, w, 3, padding=1),
                        _gn(w, arch.gn_groups),
                        nn.ReLU(inplace=True),
                    )
                )
                prev = w
            self.decoder = nn.ModuleList(dec)
            self.head = nn.Conv2d(arch.feature_channels, 1 + num_fg_classes, 1)

    @property
    def num_channels(self) -> int:
        """Head output channels: background + known foreground classes."""
        return 1 + self.num_fg_classes

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B,3,H,W) -> features (B,F,H,W), scores (B,1+K,H,W)."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B,3,H,W) input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        ds = self.arch.downsampling
        if h % ds or w % ds:
            raise ValueError(f"input size {h}x{w} not divisible by downsampling {ds}")
        for stage in self.encoder:
            x = stage(x)
        for stage in self.decoder:
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = stage(x)
        features = x
        scores = self.head(features)
        return features, scores

    def forward_single(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(3,H,W) -> features (F,H,W), scores (1+K,H,W)."""
        f, s = self.forward(image.unsqueeze(0))
        return f.squeeze(0), s.squeeze(0)


def softmax_scores(scores: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities; channel axis is 0 (3D) or 1 (4D)."""
    dim = 0 if scores.dim() == 3 else 1
    return torch.softmax(scores, dim=dim)


def phi_pool(features: torch.Tensor) -> torch.Tensor:
    """Pool a (C,H,W) feature map into an (H+W, C) descriptor.

    The first H rows average the map over the width axis, the next W rows
    average it over the height axis. Batched (B,C,H,W) input gives
    (B, H+W, C). The pooling is linear in the features.
    """
    if features.dim() == 3:
        row = features.mean(dim=2).transpose(0, 1)  # (H, C)
        col = features.mean(dim=1).transpose(0, 1)  # (W, C)
        return torch.cat([row, col], dim=0)
    if features.dim() == 4:
        row = features.mean(dim=3).transpose(1, 2)
        col = features.mean(dim=2).transpose(1, 2)
        return torch.cat([row, col], dim=1)
    raise ValueError(f"expected 3D or 4D features, got {features.dim()}D")


def extend_head(model: SegModel, new_classes: int) -> SegModel:
    """Return a copy of ``model`` whose head covers ``new_classes`` more classes.

    Existing channels are preserved bit-exactly; new channels start with zero
    weights and the background channel's bias, so scores of known classes are
    unchanged and new classes do not dominate the softmax at initialization.
    """
    if new_classes < 0:
        raise ValueError("new_classes must be >= 0")
    out = copy.deepcopy(model)
    if new_classes == 0:
        return out
    old_head = model.head
    old_out = old_head.out_channels
    new_head = nn.Conv2d(old_head.in_channels, old_out + new_classes, 1)
    new_head = new_head.to(old_head.weight.dtype)
    with torch.no_grad():
        new_head.weight.zero_()
        new_head.weight[:old_out] = old_head.weight
        new_head.bias[:old_out] = old_head.bias
        new_head.bias[old_out:] = old_head.bias[0]
    out.head = new_head
    out.num_fg_classes = model.num_fg_classes + new_classes
    return out


def freeze(model: SegModel) -> SegModel:
    """Deep-copied snapshot with gradients disabled, for use as the old model."""
    snap = copy.deepcopy(model)
    snap.eval()
    for p in snap.parameters():
        p.requires_grad_(False)
    return snap


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H,W,3) float array in [0,1] -> (3,H,W) tensor."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)


def save_checkpoint(model: SegModel, path, class_inventory: list[list[int]]) -> None:
    """Self-describing checkpoint: architecture, class history, parameters."""
    payload = {
        "arch": asdict(model.arch),
        "num_fg_classes": model.num_fg_classes,
        "class_inventory": [list(map(int, step)) for step in class_inventory],
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SegModel, list[list[int]]]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    arch_d = dict(payload["arch"])
    arch_d["widths"] = tuple(arch_d["widths"])
    arch = ArchConfig(**arch_d)
    model = SegModel(arch, payload["num_fg_classes"])
    model.load_state_dict(payload["state_dict"])
    return model, payload["class_inventory"]
