"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np
import torch

ANGLES = (0, 90, 180, 270)
IGNORE_LABEL = 255


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


def check_angle(angle) -> int:
    """Return ``angle`` normalised to [0, 360) or raise for non right angles."""
    if isinstance(angle, bool) or not float(angle).is_integer():
        raise ValueError(f"rotation angle must be a multiple of 90, got {angle!r}")
    a = int(angle)
    if a % 90 != 0:
        raise ValueError(f"rotation angle must be a multiple of 90, got {angle!r}")
    return a % 360


def check_orientations(orientations) -> tuple[int, ...]:
    out = tuple(check_angle(a) for a in orientations)
    if 0 not in out:
        raise ValueError("orientations must include 0")
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate orientations in {orientations!r}")
    return out


def check_image(image, size: int | None = None) -> torch.Tensor:
    """Validate a 3xHxW float image in [0, 1]."""
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must have shape 3xHxW, got {tuple(image.shape)}")
    if not torch.is_floating_point(image):
        raise TypeError(f"image must be floating point, got {image.dtype}")
    if size is not None and tuple(image.shape[-2:]) != (size, size):
        raise ValueError(f"image must be {size}x{size}, got {tuple(image.shape[-2:])}")
    return image


def check_mask(mask, shape=None) -> torch.Tensor:
    mask = as_tensor(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be a 2D label grid, got shape {tuple(mask.shape)}")
    if torch.is_floating_point(mask):
        raise TypeError("mask must hold integer labels")
    if shape is not None and tuple(mask.shape) != tuple(shape):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match {tuple(shape)}")
    return mask.long()


def check_binary_mask(mask, shape=None) -> torch.Tensor:
    mask = check_mask(mask, shape)
    bad = (mask != 0) & (mask != 1) & (mask != IGNORE_LABEL)
    if bool(bad.any()):
        raise ValueError("binary mask may only contain 0, 1 and 255")
    return mask


def check_finite(t: torch.Tensor, stage: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise FloatingPointError(f"non-finite values produced at stage {stage!r}")
    return t


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
