"""Rotation-adaptive matching of query features against orientation prototypes.

Shapes: prototypes are ``(..., C)``, stacked orientation prototypes
``(..., n, C)``, feature maps ``(..., C, h, w)`` and score or relation maps
``(..., n, h, w)``; a leading batch axis is optional everywhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import check_same_shape
from .data import OrientationSet

logger = logging.getLogger(__name__)

EPS_POOL = 1e-6
EPS_NORM = 1e-8


def downsample_mask(mask: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resize of a label grid (pixel-centre sampling).

    ``nearest-exact`` samples the source pixel under each target pixel centre.
    For odd integer factors that pixel is unique and the resize commutes with
    right-angle rotations; for even factors ties break towards the lower index.
    """
    m = mask.float()
    lead = m.shape[:-2]
    m = m.reshape(-1, 1, *m.shape[-2:])
    out = F.interpolate(m, size=tuple(size), mode="nearest-exact")
    return out.reshape(*lead, *out.shape[-2:]).long()


def masked_average_pool(features, mask) -> torch.Tensor:
    """Mean feature vector over the foreground (label 1) pixels of ``mask``.

    ``features`` is ``(..., C, h, w)`` and ``mask`` a label grid ``(..., H, W)``
    at image resolution. A mask that is empty at feature resolution falls back
    to global average pooling.
    """
    feats = features if isinstance(features, torch.Tensor) else features.data
    m = downsample_mask(mask, feats.shape[-2:])
    fg = (m == 1).to(feats.dtype).unsqueeze(-3)
    area = fg.sum(dim=(-2, -1))
    proto = (feats * fg).sum(dim=(-2, -1)) / (area + EPS_POOL)
    empty = area == 0
    if bool(empty.any()):
        logger.warning("support mask empty at feature resolution; using global average pooling")
        proto = torch.where(empty, feats.mean(dim=(-2, -1)), proto)
    return proto


def orientation_prototypes(support_features: OrientationSet, support_masks: OrientationSet) -> OrientationSet:
    """Masked average pooling applied to each orientation separately."""
    return OrientationSet({a: masked_average_pool(support_features[a], support_masks[a])
                           for a in support_features})


def merge_shots(prototypes: torch.Tensor) -> torch.Tensor:
    """Average per-shot prototypes ``(..., K, C)`` into one ``(..., C)``."""
    return prototypes.mean(dim=-2)


def stack_prototypes(prototypes) -> torch.Tensor:
    if isinstance(prototypes, OrientationSet):
        return torch.stack([prototypes[a] for a in prototypes], dim=-2)
    return prototypes


def relation_scores(query, prototypes) -> torch.Tensor:
    """Cosine similarity of every query pixel with every prototype.

    Norms are clamped below by 1e-8, so a zero query vector scores 0.
    """
    protos = stack_prototypes(prototypes)
    q = query.data if not isinstance(query, torch.Tensor) else query
    if q.shape[-3] != protos.shape[-1]:
        raise ValueError(f"channel mismatch: query {q.shape[-3]} vs prototypes {protos.shape[-1]}")
    dots = torch.einsum("...nc,...chw->...nhw", protos, q)
    pn = protos.norm(dim=-1).clamp_min(EPS_NORM)
    qn = q.norm(dim=-3).clamp_min(EPS_NORM)
    return dots / (pn[..., :, None, None] * qn.unsqueeze(-3))


def relation_softmax(scores: torch.Tensor) -> torch.Tensor:
    return torch.softmax(scores, dim=-3)


def aggregate_matching_features(prototypes, relations: torch.Tensor) -> torch.Tensor:
    """Per-pixel convex combination of prototypes, as a (C x n)(n x hw) product."""
    protos = stack_prototypes(prototypes)
    n, h, w = relations.shape[-3:]
    if protos.shape[-2] != n:
        raise ValueError(f"{protos.shape[-2]} prototypes but {n} relation channels")
    flat = relations.reshape(*relations.shape[:-2], h * w)
    out = torch.matmul(protos.transpose(-1, -2), flat)
    return out.reshape(*out.shape[:-1], h, w)


class QueryActivation(nn.Module):
    """conv3x3 -> GroupNorm -> ReLU -> conv3x3 over [matching, query] channels."""

    def __init__(self, channels: int, hidden: int = 32, groups: int = 4):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(2 * channels, hidden, 3, padding=1, bias=False)
        self.norm = nn.GroupNorm(groups, hidden)
        self.conv2 = nn.Conv2d(hidden, channels, 3, padding=1)

    def hidden(self, x):
        return F.relu(self.norm(self.conv1(x)))

    def forward(self, matching, query):
        return self.conv2(self.hidden(torch.cat([matching, query], dim=-3)))


def activate_query(matching: torch.Tensor, query: torch.Tensor, activation: QueryActivation) -> torch.Tensor:
    check_same_shape(matching, query, "activate_query")
    if query.shape[-3] != activation.channels:
        raise ValueError(f"activation expects {activation.channels} channels, got {query.shape[-3]}")
    if query.ndim == 3:
        return activation(matching[None], query[None])[0]
    return activation(matching, query)


@dataclass
class MatchResult:
    activated: torch.Tensor
    scores: torch.Tensor
    relations: torch.Tensor


def rotation_adaptive_match(query: torch.Tensor, prototypes, activation: QueryActivation) -> MatchResult:
    """Score, weight, aggregate and activate one query-orientation branch."""
    scores = relation_scores(query, prototypes)
    relations = relation_softmax(scores)
    matching = aggregate_matching_features(prototypes, relations)
    return MatchResult(activate_query(matching, query, activation), scores, relations)
