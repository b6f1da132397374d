"""Deterministic oriented-shapes dataset for desk-scale few-shot experiments.

Every class is an anisotropic polygon filled with a two-tone stripe
texture whose period and direction (relative to the object's long axis) are
class-specific. Stripes turn with the object, so rotating an object changes
its local appearance, not only its outline. Object colours are drawn
independently of the class.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import SegmentationDataset


def _ellipse(rx, ry, n=48):
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.stack([rx * np.cos(t), ry * np.sin(t)], axis=1)


# Unit-length outlines, long axis along +x, roughly centred on the origin.
SHAPES = {
    "bar": np.array([[-0.5, -0.13], [0.5, -0.13], [0.5, 0.13], [-0.5, 0.13]]),
    "ell": np.array([[-0.5, -0.35], [-0.22, -0.35], [-0.22, 0.13], [0.5, 0.13],
                     [0.5, 0.35], [-0.5, 0.35]]),
    "tee": np.array([[-0.5, -0.35], [-0.24, -0.35], [-0.24, -0.1], [0.5, -0.1],
                     [0.5, 0.1], [-0.24, 0.1], [-0.24, 0.35], [-0.5, 0.35]]),
    "arrow": np.array([[-0.5, -0.09], [0.12, -0.09], [0.12, -0.3], [0.5, 0.0],
                       [0.12, 0.3], [0.12, 0.09], [-0.5, 0.09]]),
    "ellipse": _ellipse(0.5, 0.2),
    "wedge": np.array([[-0.5, -0.28], [0.5, 0.0], [-0.5, 0.28]]),
    "bracket": np.array([[-0.5, -0.35], [0.5, -0.35], [0.5, -0.14], [-0.28, -0.14],
                         [-0.28, 0.14], [0.5, 0.14], [0.5, 0.35], [-0.5, 0.35]]),
    "step": np.array([[-0.5, -0.3], [0.06, -0.3], [0.06, -0.04], [0.5, -0.04],
                      [0.5, 0.3], [-0.06, 0.3], [-0.06, 0.04], [-0.5, 0.04]]),
    "chevron": np.array([[-0.5, -0.36], [-0.26, -0.36], [0.5, 0.0], [-0.26, 0.36],
                         [-0.5, 0.36], [0.2, 0.0]]),
    "flag": np.array([[-0.5, -0.06], [0.5, -0.06], [0.5, 0.36], [0.1, 0.36],
                      [0.1, 0.06], [-0.5, 0.06]]),
    "kite": np.array([[-0.5, 0.0], [0.1, -0.25], [0.5, 0.0], [0.1, 0.25]]),
    "hook": np.array([[-0.5, -0.1], [0.5, -0.1], [0.5, 0.34], [0.28, 0.34],
                      [0.28, 0.1], [-0.5, 0.1]]),
}
SHAPE_ORDER = list(SHAPES)

# (period in pixels, stripe direction relative to the long axis in degrees)
TEXTURES = [(p, d) for d in (0.0, 90.0, 45.0, 135.0) for p in (3.0, 4.5, 7.0)]


@dataclass
class SyntheticConfig:
    num_images: int = 600
    image_size: int = 64
    shape_classes: int = 9
    orientation_range: tuple = (0.0, 360.0)
    rng_seed: int = 0
    objects_per_image: tuple = (2, 3)
    length_range: tuple = (0.3, 0.5)
    foreground_band: tuple = (0.02, 0.60)
    texture_contrast: float = 0.35
    texture_wave: str = "square"

    def __post_init__(self):
        if not 6 <= self.shape_classes <= len(SHAPES):
            raise ValueError(f"shape_classes must be in [6, {len(SHAPES)}], got {self.shape_classes}")
        if self.image_size < 64:
            raise ValueError(f"image_size must be >= 64, got {self.image_size}")
        if self.texture_wave not in ("square", "sawtooth"):
            raise ValueError(f"texture_wave must be 'square' or 'sawtooth', got {self.texture_wave!r}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi <= self.shape_classes:
            raise ValueError(f"invalid objects_per_image {self.objects_per_image}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def polygon_mask(vertices: np.ndarray, size: int) -> np.ndarray:
    """Rasterise a simple polygon by testing every pixel centre (even-odd rule).

    Pixel (row, col) has its centre at x = col, y = row.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    inside = np.zeros((size, size), dtype=bool)
    x0, y0 = vertices[:, 0], vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > ys) != (by > ys)
        x_at = ax + (ys - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xs < x_at)
    return inside


def place_shape(name: str, center, length: float, angle_deg: float) -> np.ndarray:
    """Outline of ``name`` scaled to ``length`` and turned counter-clockwise on screen."""
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    pts = SHAPES[name] * length
    # y grows downwards, so a visual counter-clockwise turn flips the sign of sin
    x = pts[:, 0] * c + pts[:, 1] * s
    y = -pts[:, 0] * s + pts[:, 1] * c
    return np.stack([x + center[0], y + center[1]], axis=1)


def render_shape(name: str, size: int, angle_deg: float, length: float | None = None,
                 center=None) -> np.ndarray:
    length = 0.4 * size if length is None else length
    center = ((size - 1) / 2.0, (size - 1) / 2.0) if center is None else center
    return polygon_mask(place_shape(name, center, length, angle_deg), size)


def stripe_texture(size: int, center, angle_deg: float, period: float, direction: float,
                   wave: str = "square") -> np.ndarray:
    """Stripe field in [-1, 1] with stripes at ``angle_deg + direction`` (visual CCW).

    ``square`` alternates +1/-1 bands and looks the same after a half turn;
    ``sawtooth`` ramps from -1 to 1 across each period, so a half turn
    reverses the ramp.
    """
    t = np.deg2rad(angle_deg + direction)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    # signed distance across the stripes: projection on the stripe normal
    u = (xs - center[0]) * np.sin(t) + (ys - center[1]) * np.cos(t)
    if wave == "square":
        return np.where(np.floor(u / period * 2.0) % 2 == 0, 1.0, -1.0)
    if wave == "sawtooth":
        return 2.0 * (u / period - np.floor(u / period)) - 1.0
    raise ValueError(f"wave must be 'square' or 'sawtooth', got {wave!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = torch.from_numpy(rng.random((1, 3, 5, 5)))
    smooth = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=True)[0]
    base = rng.random(3)[:, None, None]
    img = 0.5 * base + 0.3 * smooth.numpy() + rng.normal(0.0, 0.04, (3, size, size))
    return img


def _render_image(rng: np.random.Generator, cfg: SyntheticConfig):
    size = cfg.image_size
    names = SHAPE_ORDER[: cfg.shape_classes]
    lo, hi = cfg.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    classes = rng.choice(cfg.shape_classes, size=n_obj, replace=False) + 1
    img = _background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    placed = []
    for c in classes:
        for _ in range(50):
            length = rng.uniform(*cfg.length_range) * size
            r = length / 2.0
            center = rng.uniform(r * 0.8, size - 1 - r * 0.8, size=2)
            if all(np.hypot(*(center - pc)) > r + pr + 1.0 for pc, pr in placed):
                break
        else:
            return None
        angle = rng.uniform(*cfg.orientation_range)
        obj = polygon_mask(place_shape(names[c - 1], center, length, angle), size)
        if obj.sum() < 4:
            return None
        placed.append((center, r))
        color = 0.2 + 0.6 * rng.random(3)
        period, direction = TEXTURES[c - 1]
        stripes = stripe_texture(size, center, angle, period, direction, cfg.texture_wave)[obj]
        img[:, obj] = (color[:, None] * (1.0 + cfg.texture_contrast * stripes)
                       + rng.normal(0.0, 0.04, (3, int(obj.sum()))))
        mask[obj] = c
    frac = float((mask > 0).mean())
    if not cfg.foreground_band[0] <= frac <= cfg.foreground_band[1]:
        return None
    if set(np.unique(mask).tolist()) - {0} != set(classes.tolist()):
        return None
    img = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    return img, mask


def generate_synthetic_dataset(config: SyntheticConfig | None = None, **overrides) -> SegmentationDataset:
    """Render ``num_images`` image/mask pairs; a pure function of the config.

    Image ``i`` draws from its own generator seeded with ``(rng_seed, i)``, so
    output does not depend on generation order. Draws that produce degenerate
    or out-of-band masks are discarded and redrawn.
    """
    cfg = config if config is not None else SyntheticConfig()
    if overrides:
        cfg = SyntheticConfig(**{**asdict(cfg), **overrides})
    images, masks = [], []
    for i in range(cfg.num_images):
        rng = np.random.default_rng([cfg.rng_seed, i])
        out = None
        while out is None:
            out = _render_image(rng, cfg)
        images.append(out[0])
        masks.append(out[1])
    n = cfg.shape_classes
    class_names = {i + 1: SHAPE_ORDER[i] for i in range(n)}
    per_fold = n // 3
    novel_by_fold = {f: list(range(f * per_fold + 1, (f + 1) * per_fold + 1)) for f in range(3)}
    return SegmentationDataset(np.stack(images), np.stack(masks), class_names, novel_by_fold)
