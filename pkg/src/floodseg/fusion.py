"""Combining several networks: per-pixel linear-SVM stacking, majority voting,
and routing between per-location specialists."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import Rng
from .data import LOCATIONS, DatasetManifest
from .errors import DataError, FormatError, RoutingError, ShapeError
from .infer import ProbabilityMap, predict_image, threshold
from .model import ArchitectureConfig, ModelParams, load_config
from .optim import OptimConfig
from .train import train_model

MAX_SVM_PIXELS = 200_000
DEFAULT_C = 10.0


@dataclass
class FusionModel:
    weights: list[float]
    bias: float
    C: float = DEFAULT_C
    trained_on: list[str] = field(default_factory=list)
    seed: int = 0
    objective: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FusionModel":
        try:
            d = json.loads(text)
            m = cls(
                weights=[float(w) for w in d["weights"]],
                bias=float(d["bias"]),
                C=float(d.get("C", DEFAULT_C)),
                trained_on=list(d.get("trained_on", [])),
                seed=int(d.get("seed", 0)),
                objective=d.get("objective"),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed fusion model: {e}") from None
        if not np.all(np.isfinite(m.weights)) or not np.isfinite(m.bias):
            raise FormatError("fusion model has non-finite weights")
        return m

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FusionModel":
        with open(path) as f:
            return cls.from_json(f.read())


@dataclass
class VoteConfig:
    constituents: list[str]
    tie_break: str = "background"

    def __post_init__(self):
        if len(self.constituents) < 2:
            raise ValueError("majority voting needs at least 2 constituents")
        if self.tie_break not in ("background", "flooded"):
            raise ValueError(f"tie_break must be 'background' or 'flooded', got {self.tie_break!r}")


def _flood_channel(m) -> np.ndarray:
    if isinstance(m, ProbabilityMap):
        return m.flood
    m = np.asarray(m)
    return m[1] if m.ndim == 3 else m


def concat_features(maps: Sequence) -> np.ndarray:
    """Per-pixel feature matrix ``[H*W, K]`` of flood probabilities, one
    column per map in the given order."""
    if not maps:
        raise ShapeError("no probability maps to concatenate")
    chans = [_flood_channel(m) for m in maps]
    shape = chans[0].shape
    for k, c in enumerate(chans):
        if c.shape != shape:
            raise ShapeError(f"map {k} is {c.shape}, map 0 is {shape}")
    return np.stack([c.ravel() for c in chans], axis=1)


def class_weights(y: np.ndarray, mode: str | None) -> np.ndarray:
    """Per-sample hinge weights; ``"balanced"`` gives each class equal total
    weight, mean weight 1."""
    if mode is None:
        return np.ones_like(y)
    if mode != "balanced":
        raise ValueError(f"class_weight must be 'balanced' or None, got {mode!r}")
    n_pos = np.count_nonzero(y > 0)
    n_neg = y.size - n_pos
    return np.where(y > 0, y.size / (2.0 * n_pos), y.size / (2.0 * n_neg))


def svm_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, C: float,
                  sample_weight: np.ndarray | None = None) -> float:
    margins = y * (x @ w + b)
    hinge = np.maximum(0.0, 1.0 - margins)
    if sample_weight is not None:
        hinge = hinge * sample_weight
    return float(0.5 * w @ w + C * hinge.mean())


def svm_train(
    features: np.ndarray,
    labels: np.ndarray,
    C: float = DEFAULT_C,
    seed: int = 0,
    epochs: int = 20,
    batch_size: int = 256,
    max_samples: int = MAX_SVM_PIXELS,
    trained_on: Sequence[str] = (),
    class_weight: str | None = "balanced",
) -> FusionModel:
    """Linear SVM by mini-batch Pegasos on ``0.5|w|^2 + C * mean(s_i * hinge_i)``.

    ``s_i`` are the class weights (flood pixels are a minority, so by default
    both classes carry equal total weight). The bias is unregularized. The
    returned point is whichever of the last iterate, the tail-averaged iterate
    and the origin has the lowest objective.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ShapeError(f"features {x.shape} and labels {y.shape} disagree")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be -1 or +1")
    if (y > 0).all() or (y < 0).all():
        raise DataError("SVM training needs examples of both classes")
    if C <= 0:
        raise ValueError("C must be positive")
    rng = Rng(seed)
    if x.shape[0] > max_samples:
        keep = np.sort(rng.permutation(x.shape[0])[:max_samples])
        x, y = x[keep], y[keep]
    n, k = x.shape
    sw = class_weights(y, class_weight)
    lam = 1.0 / C
    w = np.zeros(k)
    b = 0.0
    w_avg, b_avg, n_avg = np.zeros(k), 0.0, 0
    steps_per_epoch = max(1, -(-n // batch_size))
    total = epochs * steps_per_epoch
    t = 0
    for epoch in range(epochs):
        order = rng.child(epoch).permutation(n)
        for s in range(steps_per_epoch):
            t += 1
            idx = order[s * batch_size:(s + 1) * batch_size]
            xb, yb, sb = x[idx], y[idx], sw[idx]
            eta = 1.0 / (lam * t)
            viol = yb * (xb @ w + b) < 1.0
            ys = yb[viol] * sb[viol]
            gw = lam * w - (ys[:, None] * xb[viol]).sum(axis=0) / len(idx)
            gb = -ys.sum() / len(idx)
            w = w - eta * gw
            b = b - eta * gb
            if t > total // 2:
                w_avg += w
                b_avg += b
                n_avg += 1
    candidates = [(w, b), (w_avg / max(n_avg, 1), b_avg / max(n_avg, 1)), (np.zeros(k), 0.0)]
    objs = [svm_objective(cw, cb, x, y, C, sw) for cw, cb in candidates]
    best = int(np.argmin(objs))
    bw, bb = candidates[best]
    return FusionModel([float(v) for v in bw], float(bb), float(C), list(trained_on), int(seed), objs[best])


def svm_decision(model: FusionModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(model.weights):
        raise ShapeError(f"features {x.shape} do not match a {len(model.weights)}-input fusion model")
    return x @ np.asarray(model.weights) + model.bias


def svm_predict(model: FusionModel, features: np.ndarray, h: int, w: int,
                order: Sequence[str] | None = None) -> np.ndarray:
    """Binary 0/1 map: flooded where ``w.x + b >= 0``."""
    if order is not None and model.trained_on and list(order) != list(model.trained_on):
        raise ShapeError(f"feature order {list(order)} differs from trained order {model.trained_on}")
    scores = svm_decision(model, features)
    if scores.size != h * w:
        raise ShapeError(f"{scores.size} feature rows cannot form a {h}x{w} map")
    return (scores >= 0).astype(np.uint8).reshape(h, w)


def majority_vote(maps: Sequence[np.ndarray], cfg: VoteConfig | None = None) -> np.ndarray:
    """Per-pixel vote over binary maps; flooded iff strictly more than half agree,
    exact ties follow ``cfg.tie_break``."""
    if len(maps) < 2:
        raise ValueError("majority voting needs at least 2 maps")
    shape = np.shape(maps[0])
    for k, m in enumerate(maps):
        if np.shape(m) != shape:
            raise ShapeError(f"map {k} is {np.shape(m)}, map 0 is {shape}")
    votes = sum((np.asarray(m) > 0).astype(np.int64) for m in maps)
    n = len(maps)
    out = 2 * votes > n
    if n % 2 == 0 and cfg is not None and cfg.tie_break == "flooded":
        out |= 2 * votes == n
    return out.astype(np.uint8)


# -- location specialists -----------------------------------------------------------

def specialist_seed(seed: int, location: int) -> int:
    return int(Rng(seed).child(int(location)).raw(1)[0] >> 1)


def train_location_models(
    manifest: DatasetManifest,
    optim: OptimConfig,
    seed: int,
    patch_size: int = 25,
    architecture: ArchitectureConfig | str = "dilated-1",
    locations: Sequence[int] = LOCATIONS,
    dtype=np.float32,
) -> dict[int, ModelParams]:
    """One network per location, each trained only on that location's images."""
    cfg = load_config(architecture) if isinstance(architecture, str) else architecture
    out = {}
    for loc in locations:
        if not manifest.select("train", loc):
            raise DataError(f"location {loc} has no training images")
        params, _ = train_model(cfg, manifest, patch_size, optim, specialist_seed(seed, loc), [loc], dtype)
        out[loc] = params
    return out


def specialist_names(specialists: dict) -> list[str]:
    return [f"location-{loc}" for loc in sorted(specialists)]


def route_prediction(location_id, specialists: dict[int, ModelParams], fusion_model: FusionModel | None,
                     image: np.ndarray, patch_size: int = 25, t: float = 0.5) -> np.ndarray:
    """A known location uses its own specialist; ``"new"`` fuses all of them."""
    if location_id == "new":
        if fusion_model is None:
            raise RoutingError("location 'new' needs a fusion model")
        maps = [predict_image(specialists[loc], image, patch_size) for loc in sorted(specialists)]
        h, w = image.shape[1:]
        return svm_predict(fusion_model, concat_features(maps), h, w, specialist_names(specialists))
    if location_id not in specialists:
        raise RoutingError(f"no specialist for location {location_id!r} (known: {sorted(specialists)}, or 'new')")
    return threshold(predict_image(specialists[location_id], image, patch_size), t)
