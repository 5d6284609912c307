"""Patch-based training of a single network."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .core import Rng
from .data import DatasetManifest, load_split, make_grid, mask_to_labels
from .errors import DataError
from .infer import predict_image, threshold
from .metrics import ConfusionCounts, accumulate, iou
from .model import ArchitectureConfig, ModelParams, backward_step, init_params, validate_config
from .optim import OptimConfig, OptimState, lr_at, sgd_step

log = logging.getLogger(__name__)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    @property
    def lr_drops(self) -> int:
        lrs = [e["lr"] for e in self.epochs]
        return sum(1 for a, b in zip(lrs, lrs[1:]) if b < a)


class PatchSet:
    """All grid patches of a list of images, addressed as (image, row, col)."""

    def __init__(self, images: list[np.ndarray], labels: list[np.ndarray], patch_size: int, dtype=np.float32):
        self.images = [im.astype(dtype) for im in images]
        self.labels = labels
        self.patch_size = patch_size
        index = []
        for k, im in enumerate(images):
            grid = make_grid(im.shape[1:], patch_size)
            index.extend((k, r, c) for r, c in grid.offsets)
        self.index = np.array(index, dtype=np.int64).reshape(-1, 3)

    def __len__(self):
        return len(self.index)

    def batch(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = self.patch_size
        xs = [self.images[k][:, r:r + s, c:c + s] for k, r, c in self.index[rows]]
        ys = [self.labels[k][r:r + s, c:c + s] for k, r, c in self.index[rows]]
        return np.stack(xs), np.stack(ys)


def train_on_patches(
    cfg: ArchitectureConfig,
    patches: PatchSet,
    optim: OptimConfig,
    seed: int,
    dtype=np.float32,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    validate_config(cfg, patches.patch_size)
    params = init_params(cfg, seed).astype(dtype)
    params.meta = {"patch_size": patches.patch_size, "optim": optim.to_dict()}
    tensors = params.tensors()
    state = OptimState.zeros_like(tensors)
    rng = Rng(seed).child(0x5EED)
    history = TrainLog()
    n = len(patches)
    for epoch in range(optim.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, optim)
        order = rng.child(epoch).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, optim.batch_size):
            rows = order[start:start + optim.batch_size]
            x, y = patches.batch(rows)
            loss, grads = backward_step(params, x, y)
            sgd_step(tensors, grads, state, lr, optim)
            total += loss * len(rows)
            seen += len(rows)
        state.epoch = epoch + 1
        rec = {"epoch": epoch, "lr": lr, "loss": total / seen, "seconds": round(time.perf_counter() - t0, 3)}
        history.epochs.append(rec)
        log.info("%s epoch %d lr %.0e loss %.5f", cfg.name, epoch, lr, rec["loss"])
        if on_epoch:
            on_epoch(rec)
    return params, history


def train_model(
    cfg: ArchitectureConfig,
    manifest: DatasetManifest,
    patch_size: int,
    optim: OptimConfig,
    seed: int,
    locations: Iterable | None = None,
    dtype=np.float32,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train on 50%-overlap patches of the train split (optionally a subset of locations)."""
    data = load_split(manifest, "train", locations)
    if not data:
        raise DataError(f"no training images for locations {locations if locations is not None else 'all'}")
    patches = PatchSet([d[0] for d in data], [mask_to_labels(d[1]) for d in data], patch_size, dtype)
    params, history = train_on_patches(cfg, patches, optim, seed, dtype, on_epoch)
    if locations is not None:
        params.meta["locations"] = sorted(locations, key=str)
    return params, history


def evaluate(params: ModelParams, manifest: DatasetManifest, split: str, patch_size: int,
             locations: Iterable | None = None, t: float = 0.5) -> tuple[float, ConfusionCounts]:
    counts = ConfusionCounts()
    for img, mask, e in load_split(manifest, split, locations):
        pred = threshold(predict_image(params, img, patch_size, e.stem), t)
        counts = accumulate(counts, pred, mask)
    return iou(counts), counts
