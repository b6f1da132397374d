"""Episodic meta-training, inference and checkpointing."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import ANGLES, check_orientations
from .backbone import BackboneSpec, load_backbone, weight_checksum
from .data import (Episode, OrientationSet, SegmentationDataset, SplitConfig, augment_flip,
                   augment_rotation, sample_episode)
from .head import BranchLogits, main_loss, predict_mask, rotation_loss, total_loss
from .metrics import ConfusionAccumulator, EvalReport, finalize
from .model import FRINet, ForwardOutput

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 4
    epochs_1shot: int = 100
    epochs_5shot: int = 50
    mu: float = 0.25
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_power: float = 0.9
    seed: int = 0
    orientations: tuple = ANGLES
    input_size: int = 256
    shots: int = 1
    fold: int = 0
    epochs: int | None = None  # overrides the per-shot defaults when set
    steps_per_epoch: int | None = None  # default: len(dataset) // batch_size
    flip: bool = True
    rotation_aug: bool = False
    hidden: int = 32
    head_hidden: int = 32
    divergence_threshold: float = 1e3

    def __post_init__(self):
        self.orientations = check_orientations(self.orientations)
        if self.optimizer != "sgd":
            raise ValueError(f"only the sgd optimizer is supported, got {self.optimizer!r}")
        if self.mu < 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")
        if self.shots < 1 or self.batch_size < 1:
            raise ValueError("shots and batch_size must be positive")

    @property
    def num_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return self.epochs_1shot if self.shots == 1 else self.epochs_5shot

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["orientations"] = list(self.orientations)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # flat key=value text files

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {n}: unknown config key {key!r}")
            values[key] = _parse_value(types[key], val)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_value(kind: str, val: str):
    if "tuple" in kind:
        return tuple(int(x) for x in val.split(",") if x.strip())
    if val == "" and "None" in kind:
        return None
    if kind.startswith("bool"):
        if val.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {val!r}")
        return val.lower() in ("true", "1")
    if kind.startswith("int"):
        return int(val)
    if kind.startswith("float"):
        return float(val)
    return val


# ---------------------------------------------------------------------------
# feature caching


class FeatureCache:
    """Memoises frozen-backbone features keyed by the exact input bytes.

    Valid only because the backbone is frozen and deterministic; one cache
    must never be shared between different backbones.
    """

    def __init__(self, backbone):
        self.backbone = backbone
        self.checksum = weight_checksum(backbone)
        self._store = {}

    def __len__(self):
        return len(self._store)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        keys = [hashlib.blake2b(x.contiguous().numpy().tobytes(), digest_size=16).digest() for x in images]
        missing = [i for i, k in enumerate(keys) if k not in self._store]
        if missing:
            self.backbone.eval()
            with torch.no_grad():
                feats = self.backbone(images[missing])
            for i, f in zip(missing, feats):
                self._store[keys[i]] = f.clone()
        return torch.stack([self._store[k] for k in keys])


# ---------------------------------------------------------------------------
# episodes -> tensors


@dataclass
class EpisodeBatch:
    support_images: torch.Tensor  # (B, K, 3, H, W)
    support_masks: torch.Tensor  # (B, K, H, W)
    query_images: torch.Tensor  # (B, 3, H, W)
    query_masks: torch.Tensor  # (B, H, W)
    target_classes: list = field(default_factory=list)


def collate(episodes: list) -> EpisodeBatch:
    if len({e.shot_count for e in episodes}) != 1:
        raise ValueError("all episodes of a batch need the same shot count")
    return EpisodeBatch(
        torch.stack([torch.stack([s.image for s in e.supports]) for e in episodes]),
        torch.stack([torch.stack([s.mask for s in e.supports]) for e in episodes]),
        torch.stack([e.query.image for e in episodes]),
        torch.stack([e.query.mask for e in episodes]),
        [e.target_class for e in episodes],
    )


def augment_episode(episode: Episode, rng, flip: bool, rotation: bool) -> Episode:
    def aug(s):
        if flip:
            s = augment_flip(s, rng)
        if rotation:
            s = augment_rotation(s, rng)
        return s
    return Episode([aug(s) for s in episode.supports], aug(episode.query),
                   episode.target_class, episode.fold, episode.phase)


def run_model(model: FRINet, batch: EpisodeBatch) -> ForwardOutput:
    return model(batch.support_images, batch.support_masks, batch.query_images)


def forward_episode(episode: Episode, model: FRINet, mode: str = "eval"):
    """Run one episode; returns ``(fused, branches)`` as BranchLogits."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    with torch.set_grad_enabled(mode == "train"):
        out = run_model(model, collate([episode]))
    fused = BranchLogits(out.fused[0], "fused")
    branches = OrientationSet({a: BranchLogits(t[0], 0) for a, t in out.branches.items()})
    return fused, branches


def episode_losses(out: ForwardOutput, gt: torch.Tensor, mu: float):
    return total_loss(main_loss(out.fused, gt), rotation_loss(out.branches, gt), mu)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    learnable_params: dict
    backbone_ref: BackboneSpec
    config: TrainConfig
    epoch: int
    rng_state: dict
    metric_log: list

    def save(self, path) -> Path:
        path = Path(path).with_suffix(".pt")
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"learnable_params": self.learnable_params, "rng_state": self.rng_state}, path)
        meta = {
            "config": self.config.to_dict(),
            "backbone_ref": self.backbone_ref.to_dict(),
            "epoch": self.epoch,
            "metric_log": self.metric_log,
            "params_checksum": state_checksum(self.learnable_params),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path).with_suffix(".pt")
        meta = json.loads(path.with_suffix(".json").read_text())
        blob = torch.load(path, map_location="cpu", weights_only=False)
        cfg = meta["config"]
        cfg["orientations"] = tuple(cfg["orientations"])
        ckpt = cls(blob["learnable_params"], BackboneSpec.from_dict(meta["backbone_ref"]),
                   TrainConfig(**cfg), meta["epoch"], blob["rng_state"], meta["metric_log"])
        if state_checksum(ckpt.learnable_params) != meta["params_checksum"]:
            raise ValueError(f"checkpoint {path} is corrupt: parameter checksum mismatch")
        return ckpt


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for k, t in sorted(state.items()):
        h.update(k.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(config: TrainConfig, backbone) -> FRINet:
    torch.manual_seed(config.seed)
    return FRINet(backbone, config.orientations, config.hidden, config.head_hidden)


def model_from_checkpoint(ckpt: Checkpoint, backbone=None, feature_cache=None) -> FRINet:
    backbone = backbone if backbone is not None else load_backbone(ckpt.backbone_ref)
    model = build_model(ckpt.config, backbone)
    model.load_state_dict(ckpt.learnable_params)
    model.feature_cache = feature_cache
    model.eval()
    return model


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": copy.deepcopy(rng.bit_generator.state), "torch": torch.get_rng_state()}


def train(dataset: SegmentationDataset, split: SplitConfig, config: TrainConfig,
          backbone_spec: BackboneSpec | None = None, backbone=None, out_dir=None,
          feature_cache: FeatureCache | None = None) -> Checkpoint:
    """Episodic SGD on ``loss_main + mu * loss_rotation`` over base classes.

    The backbone stays frozen: its checksum is verified after training.
    """
    if backbone is None:
        if backbone_spec is None:
            raise ValueError("train() needs a backbone or a backbone_spec")
        backbone = load_backbone(backbone_spec)
    if backbone_spec is None:
        backbone_spec = BackboneSpec(backbone.name, backbone.channels, backbone.stride, True, "",
                                     {"weight_checksum": weight_checksum(backbone)})
    before = weight_checksum(backbone)
    cfg = config
    model = build_model(cfg, backbone)
    model.feature_cache = feature_cache
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    steps = cfg.steps_per_epoch or max(1, len(dataset) // cfg.batch_size)
    total = steps * cfg.num_epochs
    size = cfg.input_size
    log, last_good, it = [], None, 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, cfg.num_epochs + 1):
        model.train()
        running = 0.0
        for _ in range(steps):
            episodes = [augment_episode(sample_episode(dataset, split, "train", cfg.shots, rng, size),
                                        rng, cfg.flip, cfg.rotation_aug)
                        for _ in range(cfg.batch_size)]
            batch = collate(episodes)
            lr = cfg.learning_rate * (1 - it / total) ** cfg.lr_power
            for g in opt.param_groups:
                g["lr"] = lr
            out = run_model(model, batch)
            losses = episode_losses(out, batch.query_masks, cfg.mu)
            value = losses.loss_all.item()
            if not np.isfinite(value) or value > cfg.divergence_threshold:
                raise TrainingDiverged(f"loss {value} at epoch {epoch}, iteration {it}", last_good)
            opt.zero_grad()
            losses.loss_all.backward()
            opt.step()
            running += value
            it += 1
        log.append({"epoch": epoch, "loss": running / steps})
        logger.info("fold %d epoch %d loss %.4f", split.fold, epoch, running / steps)
        last_good = Checkpoint(copy.deepcopy(model.state_dict()), backbone_spec, cfg, epoch,
                               _rng_state(rng), list(log))
        if out_dir is not None:
            last_good.save(out_dir / f"epoch_{epoch:03d}.pt")
    if weight_checksum(backbone) != before:
        raise RuntimeError("backbone weights changed during meta-training")
    if out_dir is not None:
        last_good.save(out_dir / "final.pt")
    return last_good


# ---------------------------------------------------------------------------
# evaluation


def sample_test_episodes(dataset, split, shots, num_episodes, seed, input_size=None) -> list:
    for c in split.novel_classes:
        if len(dataset.class_index.get(c, ())) < shots + 1:
            logger.warning("novel class %d has fewer than %d images and is omitted", c, shots + 1)
    rng = np.random.default_rng(seed)
    return [sample_episode(dataset, split, "test", shots, rng, input_size) for _ in range(num_episodes)]


def episode_digest(episodes) -> str:
    h = hashlib.sha256()
    for e in episodes:
        h.update(repr((e.target_class, e.image_ids)).encode())
    return h.hexdigest()[:16]


def evaluate(dataset: SegmentationDataset, split: SplitConfig, config: TrainConfig, checkpoint,
             num_episodes: int, seed: int = 0, batch_size: int = 16, iou_mode: str = "pooled",
             feature_cache: FeatureCache | None = None, dump_relations=None, dump_branches=None,
             backbone=None) -> EvalReport:
    """Segment ``num_episodes`` novel-class episodes and report class-mean IoU.

    ``checkpoint`` is a Checkpoint or an already built FRINet.
    """
    model = checkpoint if isinstance(checkpoint, FRINet) else model_from_checkpoint(
        checkpoint, backbone, feature_cache)
    if feature_cache is not None:
        model.feature_cache = feature_cache
    digest = hashlib.sha256(
        (config.digest() + state_checksum(model.state_dict()) + f"{num_episodes}:{seed}:{iou_mode}").encode()
    ).hexdigest()[:16]
    if num_episodes <= 0:
        return EvalReport.empty(split.fold, config.shots, digest)
    episodes = sample_test_episodes(dataset, split, config.shots, num_episodes, seed, config.input_size)
    acc = ConfusionAccumulator()
    model.eval()
    with torch.no_grad():
        for start in range(0, len(episodes), batch_size):
            chunk = episodes[start:start + batch_size]
            batch = collate(chunk)
            out = run_model(model, batch)
            pred = predict_mask(out.fused)
            for i, e in enumerate(chunk):
                acc.accumulate(pred[i], batch.query_masks[i], e.target_class)
            if dump_relations is not None or dump_branches is not None:
                from .dumps import dump_episode_outputs

                dump_episode_outputs(chunk, out, start, dump_relations, dump_branches)
    return finalize(acc, split.fold, config.shots, len(episodes), digest,
                    episode_digest(episodes), iou_mode)
