"""Rotation-invariant segmentation head: per-branch decoding, consistency
supervision and complementary fusion of the orientation branches.

Logit tensors are ``(..., 2, H, W)`` with channel 0 the background score and
channel 1 the foreground score, so label 1 indexes the foreground channel.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import IGNORE_LABEL, check_angle
from .data import inverse_angle, rotate_exact

DEFAULT_MU = 0.25
ASPP_RATES = (1, 6, 12, 18)


@dataclass
class BranchLogits:
    logits: torch.Tensor
    orientation: object = 0  # 0/90/180/270 or "fused"

    @property
    def foreground(self) -> torch.Tensor:
        return self.logits[..., 1, :, :]

    @property
    def background(self) -> torch.Tensor:
        return self.logits[..., 0, :, :]

    @classmethod
    def from_maps(cls, foreground, background, orientation=0) -> "BranchLogits":
        if foreground.shape != background.shape:
            raise ValueError("foreground and background maps differ in shape")
        return cls(torch.stack([background, foreground], dim=-3), orientation)


def _logits(x) -> torch.Tensor:
    return x.logits if isinstance(x, BranchLogits) else x


class ASPP(nn.Module):
    """Parallel atrous 3x3 convolutions plus an image-pooling branch, projected."""

    def __init__(self, in_channels: int, out_channels: int, rates=ASPP_RATES, groups: int = 4):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, padding=r, dilation=r, bias=False),
                          nn.GroupNorm(groups, out_channels), nn.ReLU())
            for r in self.rates
        ])
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_channels, out_channels, 1), nn.ReLU())
        self.project = nn.Sequential(
            nn.Conv2d(out_channels * (len(self.rates) + 1), out_channels, 1, bias=False),
            nn.GroupNorm(groups, out_channels), nn.ReLU(),
        )

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, h, w))
        return self.project(torch.cat(outs, dim=1))


class SegmentationHead(nn.Module):
    """conv block -> ASPP -> 1x1 conv to two channels -> bilinear upsampling."""

    def __init__(self, channels: int, hidden: int = 32, rates=ASPP_RATES, groups: int = 4):
        super().__init__()
        self.pre = nn.Sequential(nn.Conv2d(channels, hidden, 3, padding=1, bias=False),
                                 nn.GroupNorm(groups, hidden), nn.ReLU())
        self.aspp = ASPP(hidden, hidden, rates, groups)
        self.classifier = nn.Conv2d(hidden, 2, 1)

    def forward(self, x, out_size):
        y = self.classifier(self.aspp(self.pre(x)))
        return F.interpolate(y, size=tuple(out_size), mode="bilinear", align_corners=False)


def decode_branch(activated: torch.Tensor, head: SegmentationHead, out_size, orientation=0) -> BranchLogits:
    single = activated.ndim == 3
    x = activated[None] if single else activated
    expected = head.pre[0].in_channels
    if x.ndim != 4 or x.shape[1] != expected:
        raise ValueError(f"head expects (B, {expected}, h, w) features, got {tuple(activated.shape)}")
    y = head(x, out_size)
    return BranchLogits(y[0] if single else y, orientation)


def unrotate_logits(logits: BranchLogits) -> BranchLogits:
    """Rotate a branch back into the unrotated query frame."""
    if logits.orientation == "fused":
        return logits
    a = check_angle(logits.orientation)
    return BranchLogits(rotate_exact(logits.logits, inverse_angle(a)), 0)


class FusionHead(nn.Module):
    """Separate 3x3 convs fuse the n foreground maps and the n background maps."""

    def __init__(self, n_branches: int = 4, average_init: bool = True):
        super().__init__()
        self.n_branches = n_branches
        self.fg = nn.Conv2d(n_branches, 1, 3, padding=1)
        self.bg = nn.Conv2d(n_branches, 1, 3, padding=1)
        if average_init:
            self.reset_to_average()

    def reset_to_average(self):
        with torch.no_grad():
            for conv in (self.fg, self.bg):
                conv.weight.zero_()
                conv.weight[:, :, 1, 1] = 1.0 / self.n_branches
                conv.bias.zero_()

    def forward(self, stacked):
        # stacked: (B, n, 2, H, W)
        fg = self.fg(stacked[:, :, 1])
        bg = self.bg(stacked[:, :, 0])
        return torch.cat([bg, fg], dim=1)


def fuse_branches(branches, fusion: FusionHead) -> BranchLogits:
    """Fuse unrotated branch logits into one result tagged ``"fused"``."""
    items = list(branches.values()) if isinstance(branches, Mapping) else list(branches)
    tensors = [_logits(b) for b in items]
    if len(tensors) != fusion.n_branches:
        raise ValueError(f"fusion built for {fusion.n_branches} branches, got {len(tensors)}")
    if any(t.shape != tensors[0].shape for t in tensors):
        raise ValueError(f"inconsistent branch shapes: {[tuple(t.shape) for t in tensors]}")
    single = tensors[0].ndim == 3
    stacked = torch.stack(tensors, dim=-4)
    if single:
        stacked = stacked[None]
    out = fusion(stacked)
    return BranchLogits(out[0] if single else out, "fused")


def _check_gt(gt: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    gt = gt.long()
    if gt.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ValueError(f"mask shape {tuple(gt.shape)} does not match logits {tuple(logits.shape)}")
    valid = (gt != IGNORE_LABEL).flatten(-2).sum(-1)
    if bool((valid == 0).any()):
        raise ValueError("ground-truth mask is entirely ignore; the episode is invalid")
    return gt


def cross_entropy_2class(logits, gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-ignore pixels.

    With a batch axis the per-episode means are averaged.
    """
    logits = _logits(logits)
    gt = _check_gt(gt, logits)
    if logits.ndim == 3:
        return F.cross_entropy(logits[None], gt[None], ignore_index=IGNORE_LABEL)
    per_pixel = F.cross_entropy(logits, gt, ignore_index=IGNORE_LABEL, reduction="none")
    valid = (gt != IGNORE_LABEL).to(per_pixel.dtype)
    per_episode = per_pixel.flatten(1).sum(1) / valid.flatten(1).sum(1)
    return per_episode.mean()


def rotation_loss(branches, gt_mask) -> torch.Tensor:
    """Sum over all branches (0 degrees included) of the branch cross-entropy."""
    items = branches.values() if isinstance(branches, Mapping) else branches
    losses = [cross_entropy_2class(b, gt_mask) for b in items]
    return torch.stack(losses).sum()


def main_loss(fused, gt_mask) -> torch.Tensor:
    return cross_entropy_2class(fused, gt_mask)


@dataclass
class LossBundle:
    loss_main: torch.Tensor
    loss_rotation: torch.Tensor
    loss_all: torch.Tensor
    mu: float


def total_loss(main, rotation, mu: float | None = None) -> LossBundle:
    mu = DEFAULT_MU if mu is None else float(mu)
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    return LossBundle(main, rotation, main + mu * rotation, mu)


def predict_mask(fused) -> torch.Tensor:
    """Foreground wherever the foreground logit is at least the background logit."""
    logits = _logits(fused)
    return (logits[..., 1, :, :] >= logits[..., 0, :, :]).long()

