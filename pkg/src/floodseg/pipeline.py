"""Run configs and the five experimental protocols.

A protocol differs from another only in patch size, training partition and
combiner, so each is a JSON document rather than a code path::

    {"protocol": "fusion-svm", "architectures": ["dilated-1", "deconv-1"],
     "patch_sizes": [25, 50], "manifest": "data/manifest.json",
     "optim": {"epochs": 20}, "seed": 0, "out_dir": "runs/fusion"}
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import save_ften
from .data import (
    LOCATIONS,
    DatasetManifest,
    labels_to_mask,
    load_split,
    mask_to_labels,
    read_manifest,
    read_pgm,
    write_pgm,
)
from .errors import ConfigError, DataError, ShapeError
from .fusion import (
    DEFAULT_C,
    FusionModel,
    VoteConfig,
    concat_features,
    majority_vote,
    route_prediction,
    specialist_seed,
    svm_predict,
    svm_train,
)
from .infer import ProbabilityMap, predict_image, threshold
from .metrics import ConfusionCounts, accumulate, iou
from .model import ModelParams, load_config, load_params, save_params
from .optim import OptimConfig
from .train import train_model

log = logging.getLogger(__name__)

PROTOCOLS = ("single-25", "single-50", "per-location", "fusion-svm", "fusion-mv")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class RunConfig:
    protocol: str
    manifest: str
    architectures: list[str] = field(default_factory=list)
    patch_sizes: list[int] = field(default_factory=list)
    models: list[str] = field(default_factory=list)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out_dir: str = "runs"
    dtype: str = "float32"
    C: float = DEFAULT_C
    tie_break: str = "background"
    threshold: float = 0.5

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if not self.patch_sizes:
            self.patch_sizes = [50] if self.protocol == "single-50" else [25]
        if self.protocol == "single-25" and self.patch_sizes != [25]:
            raise ConfigError("protocol single-25 trains on 25x25 patches only")
        if self.protocol == "single-50" and self.patch_sizes != [50]:
            raise ConfigError("protocol single-50 trains on 50x50 patches only")
        if self.protocol in ("single-25", "single-50") and not self.architectures:
            raise ConfigError(f"protocol {self.protocol} needs at least one architecture")
        if self.protocol == "per-location":
            if not self.architectures:
                self.architectures = ["dilated-1"]
            if len(self.architectures) != 1:
                raise ConfigError("protocol per-location trains a single architecture per location")
        if self.protocol in ("fusion-svm", "fusion-mv"):
            n = len(self.models) or len(self.architectures) * len(self.patch_sizes)
            if n < 2:
                raise ConfigError(f"protocol {self.protocol} needs at least 2 constituent networks, got {n}")
        if self.tie_break not in ("background", "flooded"):
            raise ConfigError("tie_break must be 'background' or 'flooded'")

    @classmethod
    def from_dict(cls, d: dict, base: str | os.PathLike = ".") -> "RunConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run-config fields: {sorted(unknown)}")
        if "protocol" not in d or "manifest" not in d:
            raise ConfigError("run config needs 'protocol' and 'manifest'")
        base = Path(base)
        d["optim"] = OptimConfig.from_dict(d.get("optim"))
        d["manifest"] = str(base / d["manifest"])
        d["out_dir"] = str(base / d.get("out_dir", "runs"))
        d["models"] = [str(base / m) for m in d.get("models", [])]
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from None
        try:
            return cls.from_dict(d, base=path.parent)
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from None


def preflight(manifest: DatasetManifest, locations: Iterable | None = None) -> None:
    """Fail before training when the train split is unusable."""
    manifest.validate(require_stats=True)
    locs = None if locations is None else set(locations)
    train = [e for e in manifest.select("train") if locs is None or e.location in locs]
    if not train:
        raise DataError("no training images selected")
    for e in train:
        if not e.mask:
            raise DataError(f"{e.image}: train entry has no mask")
        for rel in (e.image, e.mask):
            if not manifest.path(rel).exists():
                raise DataError(f"{manifest.path(rel)}: file listed in manifest does not exist")


def model_id(arch: str, patch_size: int) -> str:
    return f"{Path(arch).stem}-p{patch_size}"


def _train_one(cfg_name, manifest, patch_size, run: RunConfig, seed, out: Path, ident: str, locations=None) -> Path:
    arch = load_config(cfg_name)
    params, history = train_model(arch, manifest, patch_size, run.optim, seed, locations, DTYPES[run.dtype])
    params.meta["id"] = ident
    path = out / f"{ident}.fpar"
    save_params(params, path)
    with open(out / f"{ident}.log.json", "w") as f:
        json.dump({"model": ident, "architecture": arch.name, "seed": seed, "patch_size": patch_size,
                   "lr_drops": history.lr_drops, "epochs": history.epochs}, f, indent=2)
    log.info("saved %s", path)
    return path


def train_protocol(run: RunConfig) -> dict:
    """Train everything the protocol needs; returns the produced file paths."""
    manifest = read_manifest(run.manifest)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    produced: dict = {"models": []}
    if run.protocol == "per-location":
        missing = [loc for loc in LOCATIONS if not manifest.select("train", loc)]
        if missing:
            raise DataError(f"locations {missing} have no training images")
        preflight(manifest)
        arch = run.architectures[0]
        for loc in LOCATIONS:
            ident = f"location-{loc}"
            produced["models"].append(str(_train_one(
                arch, manifest, run.patch_sizes[0], run, specialist_seed(run.seed, loc), out, ident, [loc])))
        fm = fuse_train(manifest, [load_params(p) for p in produced["models"]], run.C, run.seed)
        fm.save(out / "location-fusion.json")
        produced["fusion"] = str(out / "location-fusion.json")
        return produced
    if run.models:
        produced["models"] = list(run.models)
    else:
        preflight(manifest)
        for k, ps in enumerate(run.patch_sizes):
            for j, arch in enumerate(run.architectures):
                produced["models"].append(str(_train_one(
                    arch, manifest, ps, run, run.seed + 1000 * k + j, out, model_id(arch, ps))))
    if run.protocol == "fusion-svm":
        fm = fuse_train(manifest, [load_params(p) for p in produced["models"]], run.C, run.seed)
        fm.save(out / "fusion.json")
        produced["fusion"] = str(out / "fusion.json")
    # paths relative to the run directory, so a moved run stays usable
    record = {k: ([os.path.relpath(p, out) for p in v] if isinstance(v, list) else os.path.relpath(v, out))
              for k, v in produced.items()}
    with open(out / "run.json", "w") as f:
        json.dump(record, f, indent=2)
    return produced


def model_name(params: ModelParams) -> str:
    return params.meta.get("id") or f"{params.config.name}-p{params.meta.get('patch_size', 25)}"


def patch_size_of(params: ModelParams, default: int = 25) -> int:
    return int(params.meta.get("patch_size", default))


def probability_maps(models: list[ModelParams], image: np.ndarray, image_id: str = "") -> list[ProbabilityMap]:
    return [predict_image(p, image, patch_size_of(p), image_id) for p in models]


def fuse_train(manifest: DatasetManifest, models: list[ModelParams], C: float = DEFAULT_C, seed: int = 0,
               split: str = "train") -> FusionModel:
    """Fit the per-pixel SVM on the constituents' flood probabilities."""
    if len(models) < 2:
        raise ConfigError(f"fusion needs at least 2 models, got {len(models)}")
    feats, labels = [], []
    for img, mask, e in load_split(manifest, split):
        feats.append(concat_features(probability_maps(models, img, e.stem)))
        labels.append(np.where(mask_to_labels(mask).ravel() == 1, 1, -1))
    if not feats:
        raise DataError(f"split {split!r} is empty")
    return svm_train(np.concatenate(feats), np.concatenate(labels), C=C, seed=seed,
                     trained_on=[model_name(m) for m in models])


def _write_prediction(out: Path, stem: str, mask01: np.ndarray, pmap: ProbabilityMap | None, png: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / f"{stem}.pgm", labels_to_mask(mask01))
    if pmap is not None:
        save_ften(out / f"{stem}.prob.ften", pmap.probs)
    if png:
        from PIL import Image

        Image.fromarray(labels_to_mask(mask01)).save(out / f"{stem}.png")


def predict_models(manifest: DatasetManifest, split: str, models: list[ModelParams], out: Path,
                   t: float = 0.5, png: bool = False) -> list[Path]:
    """Threshold each model's map; one output directory per model when several."""
    dirs = []
    for p in models:
        d = out / model_name(p) if len(models) > 1 else out
        for img, _, e in load_split(manifest, split):
            pmap = predict_image(p, img, patch_size_of(p), e.stem)
            _write_prediction(d, e.stem, threshold(pmap, t), pmap, png)
        dirs.append(d)
    return dirs


def predict_fused(manifest: DatasetManifest, split: str, models: list[ModelParams], fm: FusionModel,
                  out: Path, png: bool = False) -> None:
    names = [model_name(m) for m in models]
    for img, _, e in load_split(manifest, split):
        h, w = img.shape[1:]
        pred = svm_predict(fm, concat_features(probability_maps(models, img, e.stem)), h, w, names)
        _write_prediction(out, e.stem, pred, None, png)


def predict_routed(manifest: DatasetManifest, split: str, specialists: dict[int, ModelParams],
                   fm: FusionModel | None, out: Path, t: float = 0.5, png: bool = False) -> None:
    for img, _, e in load_split(manifest, split):
        ps = patch_size_of(next(iter(specialists.values())))
        pred = route_prediction(e.location, specialists, fm, img, ps, t)
        _write_prediction(out, e.stem, pred, None, png)


def predict_voted(manifest: DatasetManifest, split: str, models: list[ModelParams], out: Path,
                  tie_break: str = "background", t: float = 0.5, png: bool = False) -> None:
    cfg = VoteConfig([model_name(m) for m in models], tie_break)
    for img, _, e in load_split(manifest, split):
        maps = [threshold(pm, t) for pm in probability_maps(models, img, e.stem)]
        _write_prediction(out, e.stem, majority_vote(maps, cfg), None, png)


def predict_protocol(run: RunConfig, split: str = "test", out: Path | None = None, png: bool = False) -> Path:
    manifest = read_manifest(run.manifest)
    run_dir = Path(run.out_dir)
    out = Path(out) if out is not None else run_dir / f"pred-{split}"
    if run.protocol == "per-location":
        specialists = {loc: load_params(run_dir / f"location-{loc}.fpar") for loc in LOCATIONS}
        fpath = run_dir / "location-fusion.json"
        fm = FusionModel.load(fpath) if fpath.exists() else None
        predict_routed(manifest, split, specialists, fm, out, run.threshold, png)
        return out
    if run.models:
        paths = run.models
    else:
        paths = [str(run_dir / f"{model_id(a, ps)}.fpar") for ps in run.patch_sizes for a in run.architectures]
    models = [load_params(p) for p in paths]
    if run.protocol == "fusion-svm":
        predict_fused(manifest, split, models, FusionModel.load(run_dir / "fusion.json"), out, png)
    elif run.protocol == "fusion-mv":
        predict_voted(manifest, split, models, out, run.tie_break, run.threshold, png)
    else:
        predict_models(manifest, split, models, out, run.threshold, png)
    return out


def evaluate_predictions(manifest: DatasetManifest, split: str, pred_dir: str | os.PathLike) -> dict:
    """Aggregate and per-location IoU of the PGM masks in ``pred_dir``."""
    pred_dir = Path(pred_dir)
    total = ConfusionCounts()
    per_loc: dict[str, ConfusionCounts] = {}
    entries = [e for e in manifest.select(split) if e.mask]
    if not entries:
        raise DataError(f"split {split!r} has no entries with ground truth")
    for e in entries:
        ppath = pred_dir / f"{e.stem}.pgm"
        if not ppath.exists():
            raise DataError(f"{ppath}: missing prediction for {e.image}")
        pred = read_pgm(ppath)
        gt = manifest.load_mask(e)
        if pred.shape != gt.shape:
            raise ShapeError(f"{ppath}: prediction is {pred.shape[1]}x{pred.shape[0]}, "
                             f"ground truth {e.mask} is {gt.shape[1]}x{gt.shape[0]}")
        c = accumulate(ConfusionCounts(), pred, gt)
        total = total + c
        key = str(e.location)
        per_loc[key] = per_loc.get(key, ConfusionCounts()) + c
    return {
        "split": split,
        "images": len(entries),
        "aggregate": {**total.to_dict(), "iou": iou(total)},
        "per_location": {k: {**v.to_dict(), "iou": iou(v)} for k, v in sorted(per_loc.items())},
    }
