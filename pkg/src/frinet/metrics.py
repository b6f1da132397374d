"""Class-mean IoU accumulation and deterministic evaluation reports."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch

from ._validation import IGNORE_LABEL

logger = logging.getLogger(__name__)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass
class ConfusionAccumulator:
    """Per-class intersection and union pixel tallies pooled over episodes.

    Also keeps per-episode IoUs for the episode-mean variant. Accumulators
    combine with ``+``.
    """

    intersection: dict = field(default_factory=dict)
    union: dict = field(default_factory=dict)
    episode_ious: dict = field(default_factory=dict)

    def accumulate(self, predicted, gt, class_id: int) -> "ConfusionAccumulator":
        pred = _np(predicted)
        gt = _np(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        valid = gt != IGNORE_LABEL
        p = (pred == 1) & valid
        g = (gt == 1) & valid
        inter = int(np.count_nonzero(p & g))
        union = int(np.count_nonzero(p | g))
        c = int(class_id)
        self.intersection[c] = self.intersection.get(c, 0) + inter
        self.union[c] = self.union.get(c, 0) + union
        if union > 0:
            self.episode_ious.setdefault(c, []).append(inter / union)
        return self

    def __add__(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(dict(self.intersection), dict(self.union),
                                   {k: list(v) for k, v in self.episode_ious.items()})
        for c in other.union:
            out.intersection[c] = out.intersection.get(c, 0) + other.intersection[c]
            out.union[c] = out.union.get(c, 0) + other.union[c]
            out.episode_ious.setdefault(c, []).extend(other.episode_ious.get(c, []))
        return out

    def class_iou(self, mode: str = "pooled") -> dict:
        out = {}
        for c in sorted(self.union):
            if self.union[c] == 0:
                logger.warning("class %d has an empty union and is excluded from the mean", c)
                continue
            if mode == "pooled":
                out[c] = self.intersection[c] / self.union[c]
            elif mode == "episode_mean":
                out[c] = float(np.mean(self.episode_ious[c]))
            else:
                raise ValueError(f"mode must be 'pooled' or 'episode_mean', got {mode!r}")
        return out


def mean_iou(per_class: dict) -> float:
    # exact rational mean, rounded once; {0.2, 0.4, 0.6} -> 0.4 rather than 0.39999999999999997
    vals = [Fraction(v) for v in per_class.values()]
    return float(sum(vals, Fraction(0)) / len(vals))


@dataclass
class EvalReport:
    per_class_iou: dict
    miou: float
    fold: int
    shots: int
    num_episodes: int
    config_digest: str = ""
    status: str = "ok"
    episode_digest: str = ""
    iou_mode: str = "pooled"

    def to_dict(self) -> dict:
        return {
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "miou": self.miou,
            "fold": self.fold,
            "shots": self.shots,
            "num_episodes": self.num_episodes,
            "config_digest": self.config_digest,
            "status": self.status,
            "episode_digest": self.episode_digest,
            "iou_mode": self.iou_mode,
        }

    def to_json(self) -> str:
        return dumps_fixed(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_class_iou"] = {int(k): float(v) for k, v in d["per_class_iou"].items()}
        d["miou"] = float(d["miou"]) if d["miou"] is not None else float("nan")
        return cls(**d)

    @classmethod
    def empty(cls, fold: int, shots: int, config_digest: str = "") -> "EvalReport":
        return cls({}, float("nan"), fold, shots, 0, config_digest, "no episodes")


def finalize(acc: ConfusionAccumulator, fold: int = 0, shots: int = 1, num_episodes: int = 0,
             config_digest: str = "", episode_digest: str = "", mode: str = "pooled") -> EvalReport:
    per_class = acc.class_iou(mode)
    if not per_class:
        raise ValueError("no class has a non-empty union; nothing to report")
    return EvalReport(per_class, mean_iou(per_class), fold, shots, num_episodes,
                      config_digest, "ok", episode_digest, mode)


def _fixed(obj, indent=0):
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_fixed(obj[k], indent + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + _fixed(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return "null" if not math.isfinite(obj) else f"{obj:.6f}"
    return json.dumps(obj)


def dumps_fixed(obj) -> str:
    """JSON with sorted keys and every float written with six decimals."""
    return _fixed(obj) + "\n"
