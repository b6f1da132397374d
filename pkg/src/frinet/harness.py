"""Side-by-side comparison arms on a shared dataset, fold, seed and backbone."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ._validation import ANGLES
from .backbone import weight_checksum
from .data import SegmentationDataset
from .engine import FeatureCache, TrainConfig, evaluate, train
from .metrics import EvalReport, dumps_fixed

logger = logging.getLogger(__name__)

SWEEP = ((0,), (0, 90), (0, 90, 180), (0, 90, 180, 270))
MODES = ("baseline", "rotation_aug", "frinet", "orientation_sweep")


def arm_configs(mode: str, base: TrainConfig) -> list:
    """Expand a harness mode into ``(label, TrainConfig)`` arms."""
    if mode == "baseline":
        return [("baseline", base.replace(orientations=(0,), mu=0.0, rotation_aug=False))]
    if mode == "rotation_aug":
        return [("rotation_aug", base.replace(orientations=(0,), mu=0.0, rotation_aug=True))]
    if mode == "frinet":
        return [("frinet", base.replace(orientations=ANGLES, rotation_aug=False))]
    if mode == "orientation_sweep":
        return [("[" + ",".join(str(a) for a in o) + "]", base.replace(orientations=o, rotation_aug=False))
                for o in SWEEP]
    raise ValueError(f"unknown harness mode {mode!r}; choose from {MODES}")


@dataclass
class SharedConfig:
    train_dataset: SegmentationDataset
    eval_dataset: SegmentationDataset
    fold: int
    backbone: object
    train_config: TrainConfig
    num_episodes: int = 300
    eval_seed: int = 1000
    feature_cache: FeatureCache | None = None


@dataclass
class ArmResult:
    label: str
    config: TrainConfig
    report: EvalReport
    loss_log: list
    seconds: float

    @property
    def miou(self) -> float:
        return self.report.miou


@dataclass
class ComparisonReport:
    fold: int
    seed: int
    backbone_checksum: str
    rows: list = field(default_factory=list)

    @property
    def episode_digests(self) -> set:
        return {r.report.episode_digest for r in self.rows}

    def miou(self, label: str) -> float:
        for r in self.rows:
            if r.label == label:
                return r.miou
        raise KeyError(label)

    def to_records(self) -> list:
        return [{
            "arm": r.label,
            "orientations": ",".join(str(a) for a in r.config.orientations),
            "mu": r.config.mu,
            "rotation_aug": r.config.rotation_aug,
            "miou": 100.0 * r.miou,
            "fold": self.fold,
            "seed": self.seed,
        } for r in self.rows]

    def to_markdown(self) -> str:
        lines = ["| arm | orientations | mu | rotation aug | mIoU |", "|---|---|---|---|---|"]
        for rec in self.to_records():
            lines.append(f"| {rec['arm']} | {rec['orientations']} | {rec['mu']:g} | "
                         f"{'yes' if rec['rotation_aug'] else 'no'} | {rec['miou']:.2f} |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.to_records()[0]) if self.rows else ["arm"])
        w.writeheader()
        for rec in self.to_records():
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in rec.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return dumps_fixed({"fold": self.fold, "seed": self.seed, "backbone_checksum": self.backbone_checksum,
                            "rows": [{**rec, "report": r.report.to_dict()}
                                     for rec, r in zip(self.to_records(), self.rows)]})


def run_arm(label: str, cfg: TrainConfig, shared: SharedConfig) -> ArmResult:
    """Meta-train one arm and evaluate it on the shared episode list."""
    t0 = time.perf_counter()
    split = shared.train_dataset.split(shared.fold)
    ckpt = train(shared.train_dataset, split, cfg, backbone=shared.backbone, feature_cache=shared.feature_cache)
    ev = evaluate(shared.eval_dataset, shared.eval_dataset.split(shared.fold), cfg, ckpt, shared.num_episodes,
                  shared.eval_seed, backbone=shared.backbone, feature_cache=shared.feature_cache)
    logger.info("fold %d seed %d arm %s mIoU %.2f", shared.fold, cfg.seed, label, 100 * ev.miou)
    return ArmResult(label, cfg, ev, ckpt.metric_log, time.perf_counter() - t0)


def check_shared(arms: list, shared: SharedConfig) -> str:
    """Refuse arms that do not share seed, fold, shots and backbone; returns the backbone checksum."""
    seed = shared.train_config.seed
    for label, cfg in arms:
        if cfg.seed != seed:
            raise ValueError(f"arm {label!r} uses seed {cfg.seed}, expected shared seed {seed}")
        if cfg.fold != shared.fold or cfg.shots != shared.train_config.shots:
            raise ValueError(f"arm {label!r} does not share the fold/shot setting")
    checksum = weight_checksum(shared.backbone)
    cache = shared.feature_cache
    if cache is not None and cache.checksum != checksum:
        raise ValueError("feature cache was built for a different backbone")
    return checksum


def run_arms(arms: list, shared: SharedConfig) -> ComparisonReport:
    """Train and evaluate every arm; all arms must agree on seed, fold and shots."""
    checksum = check_shared(arms, shared)
    report = ComparisonReport(shared.fold, shared.train_config.seed, checksum)
    for label, cfg in arms:
        report.rows.append(run_arm(label, cfg, shared))
        if weight_checksum(shared.backbone) != checksum:
            raise RuntimeError(f"arm {label!r} modified the shared backbone")
    if len(report.episode_digests) > 1:
        raise RuntimeError("arms were evaluated on different episode lists")
    return report


def compare_harness(mode, shared: SharedConfig) -> ComparisonReport:
    """Run one mode, or several given as a list, against ``shared``."""
    modes = [mode] if isinstance(mode, str) else list(mode)
    arms = [arm for m in modes for arm in arm_configs(m, shared.train_config)]
    return run_arms(arms, shared)


def summarize(reports: list) -> dict:
    """Mean and standard deviation of mIoU (in points) per arm label."""
    by_arm = {}
    for rep in reports:
        for r in rep.rows:
            by_arm.setdefault(r.label, []).append(100.0 * r.miou)
    return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "runs": len(v)} for k, v in by_arm.items()}
