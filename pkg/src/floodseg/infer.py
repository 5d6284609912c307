"""Sliding-window prediction with probability averaging over overlapping patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PatchGrid, make_grid
from .errors import ShapeError
from .model import ModelParams, forward

PATCH_BATCH = 64


@dataclass
class ProbabilityMap:
    probs: np.ndarray  # [K, H, W]
    image_id: str = ""
    model_name: str = ""

    @property
    def flood(self) -> np.ndarray:
        return self.probs[1]


def coverage_counts(grid: PatchGrid) -> np.ndarray:
    counts = np.zeros((grid.height, grid.width), dtype=np.int64)
    s = grid.patch_size
    for r, c in grid.offsets:
        counts[r:r + s, c:c + s] += 1
    return counts


def stitch_average(patch_probs, grid: PatchGrid, h: int, w: int, image_id: str = "", model_name: str = "") -> ProbabilityMap:
    """Average per-pixel probabilities of every patch covering the pixel.

    Patches are folded into a per-pixel running mean in sorted-offset order,
    so the result does not depend on the order they were produced in and a
    constant input stays exactly constant.
    """
    if (h, w) != (grid.height, grid.width):
        raise ShapeError(f"grid is for {grid.height}x{grid.width}, asked to stitch {h}x{w}")
    if len(patch_probs) != len(grid.offsets):
        raise ShapeError(f"{len(patch_probs)} patches for {len(grid.offsets)} grid offsets")
    s = grid.patch_size
    k = patch_probs[0].shape[0]
    acc = np.zeros((k, h, w))
    seen = np.zeros((h, w))
    for idx in sorted(range(len(grid.offsets)), key=lambda i: grid.offsets[i]):
        p = patch_probs[idx]
        if p.shape != (k, s, s):
            raise ShapeError(f"patch {idx} has shape {p.shape}, expected {(k, s, s)}")
        r, c = grid.offsets[idx]
        seen[r:r + s, c:c + s] += 1
        region = acc[:, r:r + s, c:c + s]
        region += (p - region) / seen[r:r + s, c:c + s]
    acc /= acc.sum(axis=0, keepdims=True)
    return ProbabilityMap(acc, image_id, model_name)


def predict_image(params: ModelParams, image: np.ndarray, patch_size: int, image_id: str = "") -> ProbabilityMap:
    """Dense prediction of a normalized ``[C, H, W]`` image."""
    h, w = image.shape[1:]
    grid = make_grid((h, w), patch_size)
    dtype = params.weights[0].dtype
    s = patch_size
    outs = []
    for start in range(0, len(grid.offsets), PATCH_BATCH):
        chunk = grid.offsets[start:start + PATCH_BATCH]
        batch = np.stack([image[:, r:r + s, c:c + s] for r, c in chunk]).astype(dtype)
        outs.extend(forward(params, batch).astype(np.float64))
    return stitch_average(outs, grid, h, w, image_id, params.config.name)


def threshold(pmap: ProbabilityMap | np.ndarray, t: float = 0.5) -> np.ndarray:
    """Binary 0/1 map: flooded where P(flood) >= t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    flood = pmap.flood if isinstance(pmap, ProbabilityMap) else np.asarray(pmap)
    return (flood >= t).astype(np.uint8)
