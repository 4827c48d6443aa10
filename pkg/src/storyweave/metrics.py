"""Cheap consistency metrics for generated toy stories."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import PALETTE, decode
from .storyflow import compute_storyflow
from .tensor import ShapeError

COLOR_TOLERANCE = 0.1
MIN_SPRITE_PIXELS = 4


def dominant_colors(frames, tol: float = COLOR_TOLERANCE, min_pixels: int = MIN_SPRITE_PIXELS) -> np.ndarray:
    """Palette index covering the most pixels of each frame (-1 if no colour reaches ``min_pixels``).

    ``frames`` is (..., 3, H, W) in pixel space; a pixel matches a colour when all channels
    are within ``tol`` of it.
    """
    x = np.asarray(frames, dtype=np.float64)
    pix = np.moveaxis(x, -3, -1)[..., None, :]  # ..., H, W, 1, 3
    hit = np.all(np.abs(pix - PALETTE) <= tol, axis=-1)  # ..., H, W, colours
    counts = hit.sum(axis=(-3, -2))
    best = counts.argmax(axis=-1)
    return np.where(counts.max(axis=-1) >= min_pixels, best, -1)


@dataclass
class ConsistencyMetrics:
    frame_mse: list
    mse: float
    color_accuracy: float
    profile_distance: float

    def lines(self) -> list[str]:
        out = [f"mse={self.mse:.6g}", f"color_accuracy={self.color_accuracy:.4f}",
               f"profile_distance={self.profile_distance:.6g}"]
        out += [f"frame{i + 1}_mse={v:.6g}" for i, v in enumerate(self.frame_mse)]
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def eval_consistency(generated, reference) -> ConsistencyMetrics:
    """Compare two latent stories (..., n, c, h, w) frame by frame."""
    gen = np.asarray(generated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if gen.shape != ref.shape:
        raise ShapeError(f"generated {gen.shape} and reference {ref.shape} differ")
    if gen.ndim < 4:
        raise ShapeError(f"expected (..., n, c, h, w) latents, got {gen.shape}")
    err = (gen - ref) ** 2
    frame_mse = err.reshape(-1, gen.shape[-4], int(np.prod(gen.shape[-3:]))).mean(axis=(0, 2))
    acc = float(np.mean(dominant_colors(decode(gen)) == dominant_colors(decode(ref))))
    if gen.shape[-4] > 1:
        dist = float(np.linalg.norm(compute_storyflow(gen) - compute_storyflow(ref)))
    else:
        dist = 0.0
    return ConsistencyMetrics(frame_mse=[float(v) for v in frame_mse], mse=float(err.mean()),
                              color_accuracy=acc, profile_distance=dist)
