"""Frozen feature extractor, base-class pretraining and weight persistence."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import IGNORE_LABEL, check_finite, check_image
from .data import SegmentationDataset, SplitConfig, augment_flip

logger = logging.getLogger(__name__)


@dataclass
class FeatureMap:
    data: torch.Tensor  # C x H' x W'
    stride: int

    @property
    def channels(self) -> int:
        return self.data.shape[-3]


@dataclass
class BackboneSpec:
    name: str
    channels: int
    stride: int
    frozen: bool = True
    weights_uri: str = ""
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**{k: d[k] for k in ("name", "channels", "stride", "frozen", "weights_uri", "metadata") if k in d})

    @classmethod
    def from_file(cls, path) -> "BackboneSpec":
        """Read the sidecar JSON written next to a weight file."""
        path = Path(path)
        sidecar = path if path.suffix == ".json" else path.with_suffix(".json")
        meta = json.loads(sidecar.read_text())
        return cls(meta["name"], meta["channels"], meta["stride"], True,
                   str(sidecar.with_suffix(".pt")), meta)


class ToyBackbone(nn.Module):
    """Four conv blocks (3x3 conv, batch norm, ReLU); blocks 2 and 3 downsample.

    Output stride is 4. ``padding=0`` gives a padding-free stack, which is
    what the equivariance checks use.
    """

    name = "toy"
    stride = 4

    def __init__(self, channels: int = 64, width: int = 32, padding: int = 1):
        super().__init__()
        self.channels = channels
        self.width = width
        self.padding = padding
        plan = [(3, width, 1), (width, width, 2), (width, channels, 2), (channels, channels, 1)]
        self.blocks = nn.Sequential(*[
            nn.Sequential(nn.Conv2d(i, o, 3, stride=s, padding=padding, bias=False),
                          nn.BatchNorm2d(o), nn.ReLU(inplace=True))
            for i, o, s in plan
        ])
        self.weights_loaded = False

    def forward(self, x):
        return self.blocks(x)

    def mark_initialized(self) -> "ToyBackbone":
        """Declare the current (possibly random) weights intentional."""
        self.weights_loaded = True
        return self

    def freeze(self) -> "ToyBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


BACKBONES = {"toy": ToyBackbone}


def symmetrize_kernels_(module: nn.Module) -> nn.Module:
    """Average every conv kernel over its four right-angle rotations, in place.

    With padding-free convolutions and odd-sized square inputs, such a stack
    commutes with 90-degree rotations of the input.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                w = m.weight
                m.weight.copy_(sum(torch.rot90(w, k, dims=(-2, -1)) for k in range(4)) / 4)
    return module


def weight_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, t in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def probe_image(size: int = 64) -> torch.Tensor:
    return torch.from_numpy(np.random.default_rng(1234).random((3, size, size))).float()


def feature_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().numpy().tobytes()).hexdigest()


def extract_features(backbone: nn.Module, image) -> FeatureMap:
    """Features of one 3xHxW image; pure function of (weights, image)."""
    if not getattr(backbone, "weights_loaded", False):
        raise RuntimeError(
            "backbone weights are not loaded; use load_backbone() or mark_initialized() "
            "for an intentional random initialisation"
        )
    image = check_image(image)
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        out = backbone(image[None].to(next(backbone.parameters()).dtype))[0]
    backbone.train(was_training)
    return FeatureMap(check_finite(out, "feature extraction"), backbone.stride)


# ---------------------------------------------------------------------------
# persistence


def save_backbone(backbone: ToyBackbone, path, extra: dict | None = None) -> BackboneSpec:
    path = Path(path).with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(backbone.state_dict(), path)
    probe = extract_features(backbone, probe_image())
    meta = {
        "name": backbone.name,
        "channels": backbone.channels,
        "stride": backbone.stride,
        "width": backbone.width,
        "padding": backbone.padding,
        "weight_checksum": weight_checksum(backbone),
        "golden_feature_hash": feature_hash(probe.data),
        "pretrain_fold": None,
        "pixel_accuracy": None,
    }
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return BackboneSpec(meta["name"], meta["channels"], meta["stride"], True, str(path), meta)


def load_backbone(spec: BackboneSpec) -> ToyBackbone:
    """Rebuild and freeze the extractor described by ``spec``."""
    path = Path(spec.weights_uri)
    if not path.exists():
        raise FileNotFoundError(f"backbone weights not found: {path}")
    if spec.name not in BACKBONES:
        raise ValueError(f"unknown backbone architecture {spec.name!r}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    meta = spec.metadata or {}
    found_channels = state["blocks.3.0.weight"].shape[0]
    found_width = state["blocks.0.0.weight"].shape[0]
    found_sum = hashlib.sha256(b"".join(
        k.encode() + v.contiguous().numpy().tobytes() for k, v in sorted(state.items())
    )).hexdigest()
    expected_sum = meta.get("weight_checksum", "<unrecorded>")
    if found_channels != spec.channels:
        raise ValueError(
            f"backbone channel mismatch: expected {spec.channels}, found {found_channels} "
            f"(expected checksum {expected_sum}, found {found_sum})"
        )
    if meta.get("weight_checksum") and found_sum != expected_sum:
        raise ValueError(f"weight checksum mismatch: expected {expected_sum}, found {found_sum}")
    net = BACKBONES[spec.name](channels=found_channels, width=found_width,
                               padding=int(meta.get("padding", 1)))
    net.load_state_dict(state)
    net.mark_initialized().freeze()
    logger.info("loaded backbone %s (checksum %s)", path, found_sum[:12])
    return net


def random_backbone(seed: int = 0, **kwargs) -> ToyBackbone:
    """A deliberately untrained extractor (the no-pretraining control)."""
    torch.manual_seed(seed)
    return ToyBackbone(**kwargs).mark_initialized().freeze()


# ---------------------------------------------------------------------------
# base-class pretraining


class PyramidPoolingHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, bins=(1, 2, 3, 6), hidden: int = 32):
        super().__init__()
        self.bins = tuple(bins)
        self.stages = nn.ModuleList([
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(in_channels, hidden, 1), nn.ReLU(inplace=True))
            for b in self.bins
        ])
        self.fuse = nn.Sequential(
            nn.Conv2d(in_channels + hidden * len(self.bins), hidden * 2, 3, padding=1, bias=False),
            nn.BatchNorm2d(hidden * 2), nn.ReLU(inplace=True),
            nn.Conv2d(hidden * 2, num_classes, 1),
        )

    def forward(self, x):
        size = x.shape[-2:]
        pooled = [F.interpolate(s(x), size=size, mode="bilinear", align_corners=False) for s in self.stages]
        return self.fuse(torch.cat([x, *pooled], dim=1))


@dataclass
class PretrainConfig:
    epochs: int = 8
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    flip: bool = True
    novel_policy: str = "ignore"  # or "background"


def base_class_targets(mask: torch.Tensor, split: SplitConfig, policy: str = "ignore") -> torch.Tensor:
    """Relabel a raw mask for (|base| + 1)-way training; novel pixels never become foreground."""
    if policy not in ("ignore", "background"):
        raise ValueError(f"novel_policy must be 'ignore' or 'background', got {policy!r}")
    out = torch.full_like(mask, IGNORE_LABEL)
    out[mask == 0] = 0
    for i, c in enumerate(split.base_classes, start=1):
        out[mask == c] = i
    fill = IGNORE_LABEL if policy == "ignore" else 0
    for c in split.novel_classes:
        out[mask == c] = fill
    return out


class FoldLeakageError(RuntimeError):
    pass


def audit_batch(raw: torch.Tensor, target: torch.Tensor, split: SplitConfig) -> None:
    """Fail if any novel-class pixel carries a foreground label."""
    novel = torch.zeros_like(raw, dtype=torch.bool)
    for c in split.novel_classes:
        novel |= raw == c
    leaked = novel & (target != 0) & (target != IGNORE_LABEL)
    if bool(leaked.any()):
        raise FoldLeakageError(
            f"{int(leaked.sum())} novel-class pixels of fold {split.fold} are labelled as foreground"
        )


def pretrain_on_base(backbone: ToyBackbone, dataset: SegmentationDataset, split: SplitConfig,
                     config: PretrainConfig | None = None, out_path=None, targets_fn=base_class_targets):
    """Train ``backbone`` with a pyramid-pooling head on base-class pixel labels.

    Returns ``(spec, losses)`` where ``losses`` holds the mean loss of every
    epoch. The head is discarded; the backbone comes back frozen. Every batch
    passes the leakage audit before it is used.
    """
    cfg = config or PretrainConfig()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    base = set(split.base_classes)
    keep = [i for i in range(len(dataset))
            if base & set(np.unique(dataset.masks[i]).tolist())]
    if not keep:
        raise RuntimeError(f"no image of fold {split.fold} contains a base class")
    head = PyramidPoolingHead(backbone.channels, len(split.base_classes) + 1)
    params = list(backbone.parameters()) + list(head.parameters())
    for p in backbone.parameters():
        p.requires_grad_(True)
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    steps = max(1, len(keep) // cfg.batch_size)
    total = steps * cfg.epochs
    backbone.train()
    head.train()
    losses, it, correct, counted = [], 0, 0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(keep)
        epoch_loss, correct, counted = 0.0, 0, 0
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            samples = [dataset.sample(int(i)) for i in idx]
            if cfg.flip:
                samples = [augment_flip(x, rng) for x in samples]
            images = torch.stack([x.image for x in samples])
            raw = torch.stack([x.mask for x in samples])
            target = targets_fn(raw, split, cfg.novel_policy)
            audit_batch(raw, target, split)
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate * (1 - it / total) ** 0.9
            logits = head(backbone(images))
            logits = F.interpolate(logits, size=images.shape[-2:], mode="bilinear", align_corners=False)
            loss = F.cross_entropy(logits, target, ignore_index=IGNORE_LABEL)
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            epoch_loss += loss.item()
            valid = target != IGNORE_LABEL
            correct += int(((logits.argmax(1) == target) & valid).sum())
            counted += int(valid.sum())
        losses.append(epoch_loss / steps)
        logger.info("pretrain fold %d epoch %d loss %.4f", split.fold, epoch + 1, losses[-1])
    backbone.mark_initialized().freeze()
    accuracy = correct / max(counted, 1)
    meta = {"pretrain_fold": split.fold, "pixel_accuracy": accuracy, "pretrain_losses": losses,
            "pretrain_config": asdict(cfg)}
    if out_path is not None:
        spec = save_backbone(backbone, out_path, meta)
    else:
        spec = BackboneSpec(backbone.name, backbone.channels, backbone.stride, True, "",
                            {**meta, "weight_checksum": weight_checksum(backbone)})
    return spec, losses
