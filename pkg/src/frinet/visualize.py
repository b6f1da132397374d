"""Static PNG renderings of an evaluated episode.

``render_visuals`` writes five files into the output directory:

- ``support.png``: first support image, target contour in green
- ``query.png``: the query image
- ``ground_truth.png``: query with the target blended in green
- ``prediction.png``: query with the predicted foreground blended in red
- ``relations.png``: relation weights of the unrotated query branch, one
  panel per orientation left to right, through the viridis colormap

Overlays blend ``round(0.5 * pixel + 0.5 * colour)``; heatmap pixels are
``VIRIDIS[round(weight * 255)]``, each feature cell drawn as a
``scale x scale`` block.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

VIRIDIS = (colormaps["viridis"](np.linspace(0.0, 1.0, 256))[:, :3] * 255 + 0.5).astype(np.uint8)
PRED_COLOR = (255, 0, 0)
GT_COLOR = (0, 255, 0)
FILES = ("support.png", "query.png", "ground_truth.png", "prediction.png", "relations.png")


def to_uint8(image) -> np.ndarray:
    """3xHxW float in [0, 1] -> HxWx3 uint8."""
    a = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    return (np.clip(a, 0.0, 1.0) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def overlay(image, mask, color=PRED_COLOR) -> np.ndarray:
    rgb = to_uint8(image)
    m = (mask.cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)) == 1
    out = rgb.copy()
    blended = np.floor(0.5 * rgb[m].astype(np.float64) + 0.5 * np.asarray(color, dtype=np.float64) + 0.5)
    out[m] = blended.astype(np.uint8)
    return out


def contour(image, mask, color=GT_COLOR) -> np.ndarray:
    rgb = to_uint8(image)
    m = (mask.cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)) == 1
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    rgb[m & ~interior] = color
    return rgb


def heatmap(weights, scale: int = 4) -> np.ndarray:
    """(n, h, w) weights in [0, 1] -> RGB strip of n panels."""
    w = weights.detach().cpu().numpy() if isinstance(weights, torch.Tensor) else np.asarray(weights)
    idx = np.clip(np.rint(w * 255), 0, 255).astype(np.intp)
    panels = [VIRIDIS[i].repeat(scale, 0).repeat(scale, 1) for i in idx]
    return np.concatenate(panels, axis=1)


def _write(array: np.ndarray, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array).save(path)
    except OSError as err:
        raise OSError(f"cannot write visual output to {path}: {err}") from err
    return path


def save_overlay(image, mask, path, color=PRED_COLOR) -> Path:
    return _write(overlay(image, mask, color), path)


def save_relation_panels(weights, path, scale: int = 4) -> Path:
    return _write(heatmap(weights, scale), path)


def render_visuals(episode, fused, relations, out_dir, scale: int = 4) -> list:
    """Write the five documented PNGs for one episode and return their paths.

    ``fused`` holds the episode's (2, H, W) fused logits and ``relations``
    the (n, h, w) relation weights of the unrotated query branch.
    """
    from .head import predict_mask

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out_dir}: {err}") from err
    support = episode.supports[0]
    query = episode.query
    fused = fused.logits if hasattr(fused, "logits") else fused
    return [
        _write(contour(support.image, support.mask), out_dir / FILES[0]),
        _write(to_uint8(query.image), out_dir / FILES[1]),
        save_overlay(query.image, (query.mask == 1).long(), out_dir / FILES[2], GT_COLOR),
        save_overlay(query.image, predict_mask(fused), out_dir / FILES[3], PRED_COLOR),
        save_relation_panels(relations, out_dir / FILES[4], scale),
    ]
