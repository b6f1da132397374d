"""Datasets, class splits, episodic sampling and exact right-angle rotations."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ._validation import ANGLES, IGNORE_LABEL, as_tensor, check_angle, check_image, check_mask

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# rotation


def rotate_exact(grid, angle):
    """Rotate the last two axes of ``grid`` counter-clockwise by ``angle``.

    Only multiples of 90 degrees are accepted. The result is an index
    permutation of the input (no interpolation), so dtype and values are
    preserved and 90/270 swap height and width. Works on numpy arrays and
    torch tensors alike.
    """
    k = check_angle(angle) // 90
    if isinstance(grid, torch.Tensor):
        if grid.ndim < 2:
            raise ValueError("grid needs at least two spatial axes")
        return torch.rot90(grid, k, dims=(-2, -1)) if k else grid.clone()
    grid = np.asarray(grid)
    if grid.ndim < 2:
        raise ValueError("grid needs at least two spatial axes")
    return np.ascontiguousarray(np.rot90(grid, k, axes=(-2, -1)))


def inverse_angle(angle) -> int:
    return (360 - check_angle(angle)) % 360


class OrientationSet(Mapping):
    """Values of one kind keyed by rotation angle, in 0/90/180/270 order.

    A full set holds all four angles; ablation configurations may carry a
    subset, which always contains 0.
    """

    def __init__(self, items):
        items = dict(items)
        keys = [check_angle(a) for a in items]
        if 0 not in keys:
            raise ValueError("an orientation set must contain angle 0")
        self._data = {a: items[a] for a in ANGLES if a in items}

    def __getitem__(self, angle):
        return self._data[check_angle(angle)]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        return f"OrientationSet(angles={list(self._data)})"

    @property
    def angles(self) -> tuple[int, ...]:
        return tuple(self._data)

    at_0 = property(lambda self: self._data[0])
    at_90 = property(lambda self: self._data[90])
    at_180 = property(lambda self: self._data[180])
    at_270 = property(lambda self: self._data[270])

    def map(self, fn) -> "OrientationSet":
        return OrientationSet({a: fn(v) for a, v in self._data.items()})


def make_orientation_set(grid, angles=ANGLES) -> OrientationSet:
    """Rotated copies of ``grid``; entry 0 is the input object itself."""
    return OrientationSet({a: grid if a == 0 else rotate_exact(grid, a) for a in angles})


# ---------------------------------------------------------------------------
# samples, episodes, splits


@dataclass
class ImageSample:
    image: torch.Tensor  # 3xHxW float in [0, 1]
    mask: torch.Tensor  # HxW int64 labels
    class_ids_present: frozenset = frozenset()
    index: int = -1

    def __post_init__(self):
        self.image = check_image(self.image)
        self.mask = check_mask(self.mask, self.image.shape[-2:])
        if not self.class_ids_present:
            ids = torch.unique(self.mask).tolist()
            self.class_ids_present = frozenset(i for i in ids if i not in (0, IGNORE_LABEL))


@dataclass
class Episode:
    supports: list
    query: ImageSample
    target_class: int
    fold: int = 0
    phase: str = "test"

    @property
    def shot_count(self) -> int:
        return len(self.supports)

    @property
    def image_ids(self) -> tuple[int, ...]:
        return tuple(s.index for s in self.supports) + (self.query.index,)


@dataclass
class SplitConfig:
    fold: int
    base_classes: list
    novel_classes: list
    class_names: dict = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise ValueError(f"base and novel classes overlap: {sorted(overlap)}")
        if self.class_names:
            known = set(self.class_names)
            if set(self.base_classes) | set(self.novel_classes) != known:
                raise ValueError("base and novel classes must cover every dataset class")

    def classes_for(self, phase: str) -> list:
        if phase == "train":
            return list(self.base_classes)
        if phase == "test":
            return list(self.novel_classes)
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")


def make_split(fold: int, novel_by_fold: Mapping, class_names: Mapping) -> SplitConfig:
    fold = int(fold)
    key = str(fold) if str(fold) in novel_by_fold else fold
    if key not in novel_by_fold:
        raise KeyError(f"fold {fold} not defined; available: {sorted(novel_by_fold)}")
    novel = sorted(int(c) for c in novel_by_fold[key])
    names = {int(k): v for k, v in class_names.items()}
    base = sorted(c for c in names if c not in novel)
    return SplitConfig(fold=fold, base_classes=base, novel_classes=novel, class_names=names)


def isaid_split(fold: int) -> SplitConfig:
    """Fold preset of the iSAID-5i benchmark (15 classes, 5 novel per fold)."""
    root = resources.files("frinet.presets") / "isaid5i"
    names = json.loads((root / "classes.json").read_text())
    splits = json.loads((root / "splits.json").read_text())
    return make_split(fold, splits, names)


def binarize_mask(mask: torch.Tensor, target_class: int, excluded=()) -> torch.Tensor:
    """Map a label grid to {0: background, 1: target, 255: ignore}.

    Pixels of ``excluded`` classes are turned into ignore.
    """
    out = torch.zeros_like(mask)
    out[mask == target_class] = 1
    for c in excluded:
        out[mask == c] = IGNORE_LABEL
    out[mask == IGNORE_LABEL] = IGNORE_LABEL
    return out


def resize_sample(image: torch.Tensor, mask: torch.Tensor, size: int):
    """Bilinear resize for images, nearest for masks."""
    if tuple(image.shape[-2:]) == (size, size):
        return image, mask
    image = F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    mask = F.interpolate(mask[None, None].float(), size=(size, size), mode="nearest")[0, 0].long()
    return image, mask


# ---------------------------------------------------------------------------
# dataset


class SegmentationDataset:
    """In-memory image/label collection with a per-class image index.

    Images are stored as uint8 ``(N, H, W, 3)``, masks as uint8 ``(N, H, W)``.
    ``novel_by_fold`` maps fold number to the novel class ids of that fold.
    """

    def __init__(self, images, masks, class_names, novel_by_fold, names=None):
        images = np.asarray(images, dtype=np.uint8)
        masks = np.asarray(masks, dtype=np.uint8)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {images.shape}")
        if masks.shape != images.shape[:3]:
            raise ValueError(f"masks {masks.shape} do not match images {images.shape}")
        self.images = images
        self.masks = masks
        self.class_names = {int(k): str(v) for k, v in class_names.items()}
        self.novel_by_fold = {int(k): sorted(int(c) for c in v) for k, v in novel_by_fold.items()}
        self.names = list(names) if names is not None else [f"{i:05d}" for i in range(len(images))]
        valid = set(self.class_names) | {0, IGNORE_LABEL}
        present = set(np.unique(masks).tolist())
        if not present <= valid:
            raise ValueError(f"mask values {sorted(present - valid)} are not dataset classes")
        self.class_index = {
            c: np.flatnonzero((masks == c).reshape(len(masks), -1).any(axis=1)).tolist()
            for c in sorted(self.class_names)
        }

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def split(self, fold: int) -> SplitConfig:
        return make_split(fold, self.novel_by_fold, self.class_names)

    def sample(self, i: int, size: int | None = None) -> ImageSample:
        image = torch.from_numpy(self.images[i]).permute(2, 0, 1).float() / 255.0
        mask = torch.from_numpy(self.masks[i].astype(np.int64))
        if size is not None:
            image, mask = resize_sample(image, mask, size)
        return ImageSample(image, mask, index=int(i))

    def subset(self, indices) -> "SegmentationDataset":
        idx = list(indices)
        return SegmentationDataset(
            self.images[idx], self.masks[idx], self.class_names, self.novel_by_fold,
            [self.names[i] for i in idx],
        )

    # -- on-disk layout: images/*.png, masks/*.png, splits.json, classes.json

    def save(self, root) -> Path:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for name, img, msk in zip(self.names, self.images, self.masks):
            Image.fromarray(img, mode="RGB").save(root / "images" / f"{name}.png")
            Image.fromarray(msk, mode="L").save(root / "masks" / f"{name}.png")
        splits = {str(k): v for k, v in sorted(self.novel_by_fold.items())}
        (root / "splits.json").write_text(json.dumps(splits, indent=2))
        classes = {str(k): v for k, v in sorted(self.class_names.items())}
        (root / "classes.json").write_text(json.dumps(classes, indent=2))
        return root

    @classmethod
    def load(cls, root) -> "SegmentationDataset":
        root = Path(root)
        if not (root / "classes.json").exists():
            raise FileNotFoundError(f"{root} is not a dataset directory (classes.json missing)")
        class_names = json.loads((root / "classes.json").read_text())
        splits = json.loads((root / "splits.json").read_text())
        files = sorted((root / "images").glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no images under {root / 'images'}")
        images, masks, names = [], [], []
        for f in files:
            mask_file = root / "masks" / f.name
            if not mask_file.exists():
                raise FileNotFoundError(f"mask missing for {f.name}")
            images.append(np.asarray(Image.open(f).convert("RGB")))
            masks.append(np.asarray(Image.open(mask_file)))
            names.append(f.stem)
        return cls(np.stack(images), np.stack(masks), class_names, splits, names)


# ---------------------------------------------------------------------------
# sampling and augmentation


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_episode(dataset: SegmentationDataset, split: SplitConfig, phase: str, shots: int,
                   rng_seed=None, input_size: int | None = None) -> Episode:
    """Draw one K-shot episode for a uniformly chosen class of ``phase``.

    Classes with fewer than ``shots + 1`` images are skipped. In the train
    phase pixels of novel classes become ignore, so meta-training never sees
    them labelled.
    """
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    rng = _rng(rng_seed)
    classes = split.classes_for(phase)
    usable = [c for c in classes if len(dataset.class_index.get(c, ())) >= shots + 1]
    if not usable:
        raise RuntimeError(
            f"no {phase} class of fold {split.fold} has {shots + 1} images; "
            "check the dataset and split configuration"
        )
    while True:
        c = classes[int(rng.integers(len(classes)))]
        if c in usable:
            break
        logger.debug("class %d has too few images for %d-shot, resampling", c, shots)
    pool = dataset.class_index[c]
    picks = rng.choice(len(pool), size=shots + 1, replace=False)
    excluded = split.novel_classes if phase == "train" else ()
    samples = []
    for p in picks:
        s = dataset.sample(pool[int(p)], size=input_size)
        s.mask = binarize_mask(s.mask, c, excluded)
        samples.append(s)
    return Episode(samples[:-1], samples[-1], int(c), split.fold, phase)


def augment_flip(sample: ImageSample, rng=None, force: bool | None = None) -> ImageSample:
    """Mirror image and mask about the vertical axis with probability 0.5."""
    flip = bool(_rng(rng).random() < 0.5) if force is None else force
    if not flip:
        return sample
    return ImageSample(
        torch.flip(sample.image, dims=(-1,)), torch.flip(sample.mask, dims=(-1,)),
        sample.class_ids_present, sample.index,
    )


def augment_rotation(sample: ImageSample, rng=None) -> ImageSample:
    """Rotate image and mask jointly by a random multiple of 90 degrees."""
    angle = int(_rng(rng).integers(4)) * 90
    if angle == 0:
        return sample
    return ImageSample(rotate_exact(sample.image, angle), rotate_exact(sample.mask, angle),
                       sample.class_ids_present, sample.index)


