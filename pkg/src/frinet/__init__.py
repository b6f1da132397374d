"""Few-shot segmentation with rotation-adaptive matching and rotation-invariant heads."""

from ._validation import ANGLES, IGNORE_LABEL
from .backbone import BackboneSpec, FeatureMap, PretrainConfig, ToyBackbone, load_backbone, pretrain_on_base
from .data import (Episode, ImageSample, OrientationSet, SegmentationDataset, SplitConfig, isaid_split,
                   make_orientation_set, rotate_exact, sample_episode)
from .engine import Checkpoint, FeatureCache, TrainConfig, evaluate, train
from .estimator import BaseClassPretrainer, FRINetSegmenter
from .head import BranchLogits, FusionHead, SegmentationHead, predict_mask, total_loss
from .matching import QueryActivation, masked_average_pool, relation_scores, rotation_adaptive_match
from .metrics import ConfusionAccumulator, EvalReport, mean_iou
from .model import FRINet
from .synthetic import SyntheticConfig, generate_synthetic_dataset

__version__ = "0.1.0"
