"""Flat binary tensor dumps for debugging relation maps and branch logits.

File layout (little-endian)::

    bytes 0-3   magic b"FRD1"
    byte  4     dtype code: 1 float32, 2 float64, 3 uint8, 4 int64
    byte  5     ndim
    bytes 6-7   reserved, zero
    4*ndim      dimensions as uint32
    rest        row-major payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FRD1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
CODES = {v: k for k, v in DTYPES.items()}


def write_dump(path, array) -> Path:
    a = array.detach().cpu().numpy() if isinstance(array, torch.Tensor) else np.asarray(array)
    dt = a.dtype.newbyteorder("<") if a.dtype.itemsize > 1 else a.dtype
    if dt not in CODES:
        raise TypeError(f"unsupported dump dtype {a.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = MAGIC + struct.pack("<BBH", CODES[dt], a.ndim, 0) + struct.pack(f"<{a.ndim}I", *a.shape)
    path.write_bytes(header + np.ascontiguousarray(a, dtype=dt).tobytes())
    return path


def read_dump(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a dump file")
    code, ndim, _ = struct.unpack("<BBH", raw[4:8])
    dims = struct.unpack(f"<{ndim}I", raw[8:8 + 4 * ndim])
    payload = raw[8 + 4 * ndim:]
    return np.frombuffer(payload, dtype=DTYPES[code]).reshape(dims).copy()


def dump_episode_outputs(episodes, out, offset: int, relations_dir=None, branches_dir=None) -> None:
    """Write score, relation and logit dumps for a chunk of evaluated episodes."""
    from .head import predict_mask
    from .visualize import save_overlay, save_relation_panels

    for i, episode in enumerate(episodes):
        stem = f"ep{offset + i:05d}"
        if relations_dir is not None:
            d = Path(relations_dir)
            for a in out.scores:
                write_dump(d / f"{stem}_q{a:03d}_scores.bin", out.scores[a][i])
                write_dump(d / f"{stem}_q{a:03d}_relations.bin", out.relations[a][i])
                save_relation_panels(out.relations[a][i], d / f"{stem}_q{a:03d}_relations.png")
        if branches_dir is not None:
            d = Path(branches_dir)
            for a in out.branches:
                write_dump(d / f"{stem}_branch{a:03d}.bin", out.branches[a][i])
            write_dump(d / f"{stem}_fused.bin", out.fused[i])
            pred = predict_mask(out.fused[i])
            save_overlay(episode.query.image, pred, d / f"{stem}_prediction.png")
            save_overlay(episode.query.image, (episode.query.mask == 1).long(),
                         d / f"{stem}_ground_truth.png", color=(0, 255, 0))
