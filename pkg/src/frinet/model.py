"""The full few-shot network: frozen extractor, matcher, head and fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from ._validation import ANGLES, check_finite, check_orientations
from .data import OrientationSet, inverse_angle, rotate_exact
from .head import ASPP_RATES, FusionHead, SegmentationHead
from .matching import QueryActivation, masked_average_pool, rotation_adaptive_match


@dataclass
class ForwardOutput:
    fused: torch.Tensor  # (B, 2, H, W)
    branches: OrientationSet  # unrotated (B, 2, H, W) per orientation
    prototypes: torch.Tensor  # (B, n, C), shots merged
    scores: OrientationSet = field(default_factory=dict)
    relations: OrientationSet = field(default_factory=dict)


class FRINet(nn.Module):
    """Learnable matcher, head and fusion around a frozen backbone.

    The backbone is held by reference and is not a registered submodule, so
    ``parameters()`` and ``state_dict()`` cover the learnable part only.
    """

    def __init__(self, backbone: nn.Module, orientations=ANGLES, hidden: int = 32,
                 head_hidden: int = 32, rates=ASPP_RATES):
        super().__init__()
        self.orientations = check_orientations(orientations)
        channels = backbone.channels
        self.activation = QueryActivation(channels, hidden)
        self.head = SegmentationHead(channels, head_hidden, rates)
        self.fusion = FusionHead(len(self.orientations))
        object.__setattr__(self, "backbone", backbone)
        self.feature_cache = None

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        cache = self.feature_cache
        if cache is not None:
            if cache.backbone is not self.backbone:
                raise ValueError("feature cache belongs to a different backbone")
            return check_finite(cache(images), "feature extraction")
        self.backbone.eval()
        with torch.no_grad():
            return check_finite(self.backbone(images), "feature extraction")

    def _features(self, flat_support, query):
        """Backbone features of every rotated support and query image."""
        rotated = [rotate_exact(flat_support, a) for a in self.orientations]
        rotated += [rotate_exact(query, a) for a in self.orientations]
        n = len(self.orientations)
        if all(r.shape[-2:] == rotated[0].shape[-2:] for r in rotated):
            sizes = [r.shape[0] for r in rotated]
            feats = list(torch.split(self.extract(torch.cat(rotated)), sizes))
        else:
            feats = [self.extract(r) for r in rotated]
        return feats[:n], feats[n:]

    def forward(self, support_images, support_masks, query) -> ForwardOutput:
        b, k = support_images.shape[:2]
        out_size = query.shape[-2:]
        flat_support = support_images.flatten(0, 1)
        flat_masks = support_masks.flatten(0, 1)
        support_feats, query_feats = self._features(flat_support, query)

        protos = []
        for a, f in zip(self.orientations, support_feats):
            per_shot = masked_average_pool(f, rotate_exact(flat_masks, a))
            protos.append(per_shot.reshape(b, k, -1).mean(dim=1))
        protos = check_finite(torch.stack(protos, dim=1), "prototypes")

        activated, scores, relations = [], {}, {}
        for a, q in zip(self.orientations, query_feats):
            m = rotation_adaptive_match(q, protos, self.activation)
            activated.append(check_finite(m.activated, f"activation[{a}]"))
            scores[a], relations[a] = m.scores, m.relations

        # the head is shared, so same-shaped branches go through it as one batch
        if all(x.shape == activated[0].shape for x in activated) and out_size[0] == out_size[1]:
            decoded = torch.split(self.head(torch.cat(activated), out_size), b)
        else:
            decoded = [self.head(x, out_size if a in (0, 180) else out_size[::-1])
                       for a, x in zip(self.orientations, activated)]
        branches = {}
        for a, logits in zip(self.orientations, decoded):
            branches[a] = check_finite(rotate_exact(logits, inverse_angle(a)), f"head[{a}]")

        stacked = torch.stack([branches[a] for a in self.orientations], dim=1)
        fused = check_finite(self.fusion(stacked), "fusion")
        return ForwardOutput(fused, OrientationSet(branches), protos,
                             OrientationSet(scores), OrientationSet(relations))
