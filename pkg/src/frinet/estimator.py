"""scikit-learn style wrappers around pretraining and meta-training.

``BaseClassPretrainer`` is a transformer: ``fit`` pretrains the extractor on
the base classes of a fold, ``transform`` maps images to frozen features.
``FRINetSegmenter`` is an estimator: ``fit`` meta-trains on a dataset,
``predict`` segments episodes and ``score`` returns novel-class mIoU.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ANGLES, as_tensor
from .backbone import (BackboneSpec, PretrainConfig, ToyBackbone, load_backbone, pretrain_on_base,
                       save_backbone)
from .data import Episode, SegmentationDataset
from .engine import (FeatureCache, TrainConfig, collate, evaluate, model_from_checkpoint, run_model,
                     train)
from .head import predict_mask


def _check_dataset(X) -> SegmentationDataset:
    if isinstance(X, (str, Path)):
        return SegmentationDataset.load(X)
    if not isinstance(X, SegmentationDataset):
        raise TypeError(f"expected a SegmentationDataset or a dataset directory, got {type(X).__name__}")
    return X


def _check_episodes(X) -> list:
    episodes = [X] if isinstance(X, Episode) else list(X)
    if not episodes or not all(isinstance(e, Episode) for e in episodes):
        raise TypeError("expected an Episode or a sequence of Episodes")
    return episodes


def _resolve_backbone(backbone):
    if isinstance(backbone, ToyBackbone):
        if not backbone.weights_loaded:
            raise ValueError("backbone has no loaded weights")
        return backbone.freeze(), None
    if isinstance(backbone, BaseClassPretrainer):
        check_is_fitted(backbone, "backbone_")
        return backbone.backbone_, backbone.spec_
    if isinstance(backbone, (str, Path)):
        backbone = BackboneSpec.from_file(backbone)
    if isinstance(backbone, BackboneSpec):
        return load_backbone(backbone), backbone
    raise TypeError("backbone must be a ToyBackbone, BaseClassPretrainer, BackboneSpec or weight path")


class BaseClassPretrainer(TransformerMixin, BaseEstimator):
    def __init__(self, fold=0, channels=64, width=32, epochs=8, learning_rate=0.02, momentum=0.9,
                 weight_decay=1e-4, batch_size=8, flip=True, novel_policy="ignore", random_state=0):
        self.fold = fold
        self.channels = channels
        self.width = width
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.flip = flip
        self.novel_policy = novel_policy
        self.random_state = random_state

    def fit(self, X, y=None, out_path=None):
        dataset = _check_dataset(X)
        split = dataset.split(self.fold)
        torch.manual_seed(self.random_state)
        backbone = ToyBackbone(self.channels, self.width)
        cfg = PretrainConfig(self.epochs, self.learning_rate, self.momentum, self.weight_decay,
                             self.batch_size, self.random_state, self.flip, self.novel_policy)
        self.spec_, self.losses_ = pretrain_on_base(backbone, dataset, split, cfg, out_path)
        self.backbone_ = backbone
        self.pixel_accuracy_ = self.spec_.metadata["pixel_accuracy"]
        return self

    def transform(self, X):
        """Images ``(N, 3, H, W)`` in [0, 1] -> features ``(N, C, H/4, W/4)``."""
        check_is_fitted(self, "backbone_")
        images = as_tensor(X, torch.float32)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images of shape (N, 3, H, W), got {tuple(images.shape)}")
        with torch.no_grad():
            return self.backbone_(images).numpy()

    def save(self, path) -> BackboneSpec:
        check_is_fitted(self, "backbone_")
        meta = {k: v for k, v in self.spec_.metadata.items() if k != "weight_checksum"}
        self.spec_ = save_backbone(self.backbone_, path, meta)
        return self.spec_


class FRINetSegmenter(BaseEstimator):
    def __init__(self, backbone=None, fold=0, shots=1, orientations=ANGLES, mu=0.25,
                 learning_rate=5e-3, batch_size=4, epochs=None, steps_per_epoch=None, momentum=0.9,
                 weight_decay=0.0, input_size=256, flip=True, rotation_aug=False, hidden=32,
                 head_hidden=32, random_state=0, cache_features=True):
        self.backbone = backbone
        self.fold = fold
        self.shots = shots
        self.orientations = orientations
        self.mu = mu
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.input_size = input_size
        self.flip = flip
        self.rotation_aug = rotation_aug
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.random_state = random_state
        self.cache_features = cache_features

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, mu=self.mu,
            momentum=self.momentum, weight_decay=self.weight_decay, seed=self.random_state,
            orientations=tuple(self.orientations), input_size=self.input_size, shots=self.shots,
            fold=self.fold, epochs=self.epochs, steps_per_epoch=self.steps_per_epoch, flip=self.flip,
            rotation_aug=self.rotation_aug, hidden=self.hidden, head_hidden=self.head_hidden,
        )

    def fit(self, X, y=None, out_dir=None):
        dataset = _check_dataset(X)
        if self.backbone is None:
            raise ValueError("FRINetSegmenter needs a pretrained backbone")
        backbone, spec = _resolve_backbone(self.backbone)
        cfg = self.train_config()
        self.split_ = dataset.split(self.fold)
        self.feature_cache_ = FeatureCache(backbone) if self.cache_features else None
        self.checkpoint_ = train(dataset, self.split_, cfg, spec, backbone, out_dir, self.feature_cache_)
        self.model_ = model_from_checkpoint(self.checkpoint_, backbone, self.feature_cache_)
        self.loss_curve_ = [m["loss"] for m in self.checkpoint_.metric_log]
        return self

    def decision_function(self, X) -> np.ndarray:
        """Fused foreground-minus-background logits, shape ``(N, H, W)``."""
        check_is_fitted(self, "model_")
        episodes = _check_episodes(X)
        self.model_.eval()
        with torch.no_grad():
            out = run_model(self.model_, collate(episodes))
        return (out.fused[:, 1] - out.fused[:, 0]).numpy()

    def predict(self, X) -> np.ndarray:
        """Binary query masks, shape ``(N, H, W)``; ties go to foreground."""
        check_is_fitted(self, "model_")
        episodes = _check_episodes(X)
        self.model_.eval()
        with torch.no_grad():
            out = run_model(self.model_, collate(episodes))
        return predict_mask(out.fused).numpy()

    def evaluate(self, X, num_episodes=1000, seed=0, iou_mode="pooled"):
        check_is_fitted(self, "model_")
        dataset = _check_dataset(X)
        return evaluate(dataset, dataset.split(self.fold), self.checkpoint_.config, self.model_,
                        num_episodes, seed, iou_mode=iou_mode)

    def score(self, X, y=None, num_episodes=300, seed=0) -> float:
        """Novel-class mIoU in [0, 1] over ``num_episodes`` sampled episodes."""
        return self.evaluate(X, num_episodes, seed).miou
