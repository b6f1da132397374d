"""Desk-scale synthetic benchmark: folds x seeds x comparison arms.

Meta-training and pretraining images hold near-upright objects, while the
evaluation images show every orientation. A model therefore meets test-time
orientations it never saw during training, which is the setting where
rotation augmentation and orientation-adaptive matching are expected to pay
off. One backbone is pretrained per fold and shared by all seeds and arms;
the seed drives meta-training and the evaluation episode draw.

Arm results are memoised by (fold, backbone kind, config digest), so an arm
requested by two studies (the full-orientation arm appears in both the method
comparison and the orientation sweep) is trained once. With ``cache_dir``
results also persist as JSON between processes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import PretrainConfig, ToyBackbone, pretrain_on_base, random_backbone, weight_checksum
from .engine import FeatureCache, TrainConfig
from .harness import SWEEP, SharedConfig, arm_configs, check_shared, run_arm
from .metrics import dumps_fixed
from .synthetic import SyntheticConfig, generate_synthetic_dataset

logger = logging.getLogger(__name__)

METHOD_ARMS = ("baseline", "rotation_aug", "frinet")


def _default_train() -> TrainConfig:
    return TrainConfig(input_size=64, epochs=10, learning_rate=0.03, batch_size=4)


@dataclass
class BenchmarkConfig:
    train_images: int = 600
    eval_images: int = 300
    image_size: int = 64
    train_orientations: tuple = (-25.0, 25.0)
    eval_orientations: tuple = (0.0, 360.0)
    length_range: tuple = (0.35, 0.55)
    texture_wave: str = "square"
    texture_contrast: float = 0.35
    train_data_seed: int = 0
    eval_data_seed: int = 1
    folds: tuple = (0, 1, 2)
    seeds: tuple = (0, 1, 2)
    num_episodes: int = 300
    eval_seed_base: int = 1000
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=_default_train)

    def data_config(self, split: str) -> SyntheticConfig:
        train = split == "train"
        return SyntheticConfig(
            num_images=self.train_images if train else self.eval_images,
            image_size=self.image_size,
            orientation_range=self.train_orientations if train else self.eval_orientations,
            rng_seed=self.train_data_seed if train else self.eval_data_seed,
            length_range=self.length_range,
            texture_wave=self.texture_wave,
            texture_contrast=self.texture_contrast,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def setup_digest(self) -> str:
        """Hash of everything an arm result depends on besides its TrainConfig."""
        d = self.to_dict()
        for k in ("train", "folds", "seeds"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class ArmRecord:
    fold: int
    seed: int
    label: str
    backbone: str  # "pretrained" or "random"
    miou: float
    per_class_iou: dict
    episode_digest: str
    seconds: float
    losses: list
    config_digest: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


class Benchmark:
    def __init__(self, config: BenchmarkConfig | None = None, cache_dir=None):
        self.config = config or BenchmarkConfig()
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._data = None
        self._backbones = {}
        self._caches = {}
        self._results = {}
        self.pretrain_seconds = {}
        self._tag = self.config.setup_digest()

    # -- shared resources

    @property
    def datasets(self):
        if self._data is None:
            self._data = (generate_synthetic_dataset(self.config.data_config("train")),
                          generate_synthetic_dataset(self.config.data_config("eval")))
        return self._data

    def backbone(self, fold: int, kind: str = "pretrained"):
        key = (fold, kind)
        if key not in self._backbones:
            if kind == "random":
                net = random_backbone(fold)
            elif kind == "pretrained":
                train_ds = self.datasets[0]
                torch.manual_seed(self.config.pretrain.seed)
                net = ToyBackbone()
                t0 = time.perf_counter()
                pretrain_on_base(net, train_ds, train_ds.split(fold), self.config.pretrain)
                self.pretrain_seconds[fold] = time.perf_counter() - t0
                net.freeze()
                if self.cache_dir is not None:
                    self.cache_dir.mkdir(parents=True, exist_ok=True)
                    (self.cache_dir / f"{self._tag}_pretrain_fold{fold}.json").write_text(
                        json.dumps({"seconds": self.pretrain_seconds[fold]}))
            else:
                raise ValueError(f"backbone kind must be 'pretrained' or 'random', got {kind!r}")
            self._backbones[key] = net
            self._caches[key] = FeatureCache(net)
        return self._backbones[key]

    def shared(self, fold: int, seed: int, kind: str = "pretrained") -> SharedConfig:
        train_ds, eval_ds = self.datasets
        bb = self.backbone(fold, kind)
        return SharedConfig(train_ds, eval_ds, fold, bb, self.config.train.replace(fold=fold, seed=seed),
                            self.config.num_episodes, self.config.eval_seed_base + seed,
                            self._caches[(fold, kind)])

    # -- arms

    def _cache_file(self, fold, kind, cfg: TrainConfig) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{self._tag}_fold{fold}_{kind}_{cfg.digest()}.json"

    def arm(self, fold: int, seed: int, label: str, cfg: TrainConfig, kind: str = "pretrained") -> ArmRecord:
        key = (fold, kind, cfg.digest())
        path = self._cache_file(fold, kind, cfg)
        if key in self._results:
            rec = self._results[key]
        elif path is not None and path.exists():
            rec = ArmRecord(**json.loads(path.read_text()))
            rec.per_class_iou = {int(k): v for k, v in rec.per_class_iou.items()}
            rec.config_digest = cfg.digest()
        else:
            shared = self.shared(fold, seed, kind)
            check_shared([(label, cfg)], shared)
            res = run_arm(label, cfg, shared)
            rec = ArmRecord(fold, seed, label, kind, res.miou, res.report.per_class_iou,
                            res.report.episode_digest, res.seconds, [m["loss"] for m in res.loss_log],
                            cfg.digest())
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(rec.to_dict(), sort_keys=True))
        self._results[key] = rec
        return ArmRecord(**{**rec.to_dict(), "label": label})

    def run_mode(self, mode: str, fold: int, seed: int, kind: str = "pretrained") -> list:
        base = self.config.train.replace(fold=fold, seed=seed)
        return [self.arm(fold, seed, label, cfg, kind) for label, cfg in arm_configs(mode, base)]

    # -- studies

    def method_effect(self) -> dict:
        """mIoU per arm label (baseline, rotation_aug, frinet) over folds x seeds."""
        out = {label: [] for label in METHOD_ARMS}
        for fold in self.config.folds:
            for seed in self.config.seeds:
                for mode in METHOD_ARMS:
                    for rec in self.run_mode(mode, fold, seed):
                        out[rec.label].append(rec)
        return out

    def orientation_sweep(self, folds=None) -> dict:
        folds = self.config.folds if folds is None else folds
        labels = ["[" + ",".join(str(a) for a in o) + "]" for o in SWEEP]
        out = {label: [] for label in labels}
        for fold in folds:
            for seed in self.config.seeds:
                for rec in self.run_mode("orientation_sweep", fold, seed):
                    out[rec.label].append(rec)
        return out

    def pretraining_effect(self, mode: str = "baseline") -> dict:
        out = {"pretrained": [], "random": []}
        for fold in self.config.folds:
            for seed in self.config.seeds:
                for kind in out:
                    out[kind].extend(self.run_mode(mode, fold, seed, kind))
        return out

    def pretrain_time(self, fold: int) -> float | None:
        """Seconds spent pretraining the fold's backbone, also when it ran in an earlier process."""
        if fold in self.pretrain_seconds:
            return self.pretrain_seconds[fold]
        path = self.cache_dir / f"{self._tag}_pretrain_fold{fold}.json" if self.cache_dir is not None else None
        if path is not None and path.exists():
            return json.loads(path.read_text())["seconds"]
        return None

    def runtime(self, study: dict) -> float:
        """CPU seconds behind a study: its distinct arms plus backbone pretraining."""
        arms = {(r.fold, r.backbone, r.config_digest): r.seconds for recs in study.values() for r in recs}
        folds = {(r.fold, r.backbone) for recs in study.values() for r in recs}
        pre = sum(self.pretrain_time(f) or 0.0 for f, kind in folds if kind == "pretrained")
        return pre + sum(arms.values())

    def backbone_checksums(self) -> dict:
        return {f"{f}/{k}": weight_checksum(b) for (f, k), b in self._backbones.items()}


def mean_miou(records: list) -> float:
    """Mean mIoU in points over a list of ArmRecords."""
    return 100.0 * float(np.mean([r.miou for r in records]))


def summary_table(study: dict) -> str:
    lines = ["| arm | runs | mean mIoU | std |", "|---|---|---|---|"]
    for label, recs in study.items():
        vals = [100.0 * r.miou for r in recs]
        lines.append(f"| {label} | {len(vals)} | {np.mean(vals):.2f} | {np.std(vals):.2f} |")
    return "\n".join(lines) + "\n"


def study_json(study: dict) -> str:
    return dumps_fixed({label: [r.to_dict() for r in recs] for label, recs in study.items()})
