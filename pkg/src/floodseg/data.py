"""Dataset manifests, image/mask I/O, patch grids and the synthetic scene generator."""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import Rng, load_ften, save_ften
from .errors import DataError, FormatError, ShapeError

SPLITS = ("train", "val", "test")
LOCATIONS = (1, 2, 3, 4, 5, 6)
STD_FLOOR = 1e-6
MASK_ON = 255


# -- PGM masks ---------------------------------------------------------------------

def write_pgm(path: str | os.PathLike, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype != np.uint8:
        if mask.min() < 0 or mask.max() > 255:
            raise DataError("mask values must fit in 8 bits")
        mask = mask.astype(np.uint8)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(mask.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def mask_to_labels(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) > 127).astype(np.int64)


def labels_to_mask(labels: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(labels) > 0, MASK_ON, 0).astype(np.uint8)


# -- manifest ----------------------------------------------------------------------

@dataclass
class BandStats:
    mean: list[float]
    std: list[float]

    def normalize(self, image: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean)[:, None, None]
        s = np.asarray(self.std)[:, None, None]
        return (image - m) / s

    def denormalize(self, image: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean)[:, None, None]
        s = np.asarray(self.std)[:, None, None]
        return image * s + m


@dataclass
class Entry:
    image: str
    mask: str | None
    location: int | str
    split: str

    @property
    def stem(self) -> str:
        return Path(self.image).stem


@dataclass
class DatasetManifest:
    entries: list[Entry] = field(default_factory=list)
    band_stats: BandStats | None = None
    metadata: dict = field(default_factory=lambda: {"image_size": 320, "gsd_m": 3.7})
    root: Path = field(default=Path("."), repr=False, compare=False)

    def validate(self, require_stats: bool = False) -> None:
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"{e.image}: unknown split {e.split!r}")
            if e.split in ("train", "val"):
                if e.location not in LOCATIONS:
                    raise DataError(f"{e.image}: {e.split} entries must come from locations 1-6, got {e.location!r}")
                if not e.mask:
                    raise DataError(f"{e.image}: {e.split} entry has no mask")
            elif e.location not in LOCATIONS and e.location != "new":
                raise DataError(f"{e.image}: location must be 1-6 or 'new', got {e.location!r}")
        if require_stats and self.band_stats is None:
            raise DataError("manifest has no band_stats; run compute_band_stats first")

    def select(self, split: str | None = None, location=None) -> list[Entry]:
        return [
            e for e in self.entries
            if (split is None or e.split == split) and (location is None or e.location == location)
        ]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def load_image(self, e: Entry) -> np.ndarray:
        img = load_ften(self.path(e.image))
        if img.ndim != 3:
            raise ShapeError(f"{e.image}: expected [C,H,W] image, got shape {img.shape}")
        return img.astype(np.float64)

    def load_mask(self, e: Entry) -> np.ndarray:
        if not e.mask:
            raise DataError(f"{e.image}: no mask")
        return read_pgm(self.path(e.mask))

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"image_path": e.image, "mask_path": e.mask, "location_id": e.location, "split": e.split}
                for e in self.entries
            ],
            "band_stats": None if self.band_stats is None else
            {"mean": self.band_stats.mean, "std": self.band_stats.std},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict, root: str | os.PathLike = ".") -> "DatasetManifest":
        try:
            entries = [Entry(x["image_path"], x.get("mask_path"), x["location_id"], x["split"]) for x in d["entries"]]
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed manifest entry: {e}") from None
        bs = d.get("band_stats")
        stats = BandStats(list(bs["mean"]), list(bs["std"])) if bs else None
        return cls(entries, stats, dict(d.get("metadata", {})), Path(root))


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2)
        f.write("\n")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: cannot read manifest: {e}") from None
    m = DatasetManifest.from_dict(d, root=path.parent)
    m.validate()
    return m


def compute_band_stats(manifest: DatasetManifest) -> BandStats:
    """Per-band mean and std over every pixel of the train split."""
    train = manifest.select("train")
    if not train:
        raise DataError("train split is empty")
    images = [manifest.load_image(e) for e in train]
    c = images[0].shape[0]
    n = sum(im[0].size for im in images)
    mean = sum(im.reshape(c, -1).sum(axis=1) for im in images) / n
    var = sum(((im.reshape(c, -1) - mean[:, None]) ** 2).sum(axis=1) for im in images) / n
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return BandStats([float(v) for v in mean], [float(v) for v in std])


# -- patch grid ----------------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    offsets: tuple[tuple[int, int], ...]
    height: int
    width: int

    def __len__(self):
        return len(self.offsets)


def axis_offsets(extent: int, patch: int, stride: int) -> list[int]:
    offs = list(range(0, extent - patch + 1, stride))
    if offs[-1] != extent - patch:
        offs.append(extent - patch)
    return offs


def make_grid(image_size: int | tuple[int, int], patch_size: int, stride: int | None = None) -> PatchGrid:
    """Top-left offsets of ``patch_size`` windows at 50% overlap.

    The stride is ``patch_size // 2``; a last offset clamped to the border is
    added on each axis when the regular steps leave pixels uncovered.
    """
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    if patch_size < 1 or patch_size > min(h, w):
        raise ShapeError(f"patch size {patch_size} does not fit a {h}x{w} image")
    stride = stride if stride is not None else max(1, patch_size // 2)
    rows = axis_offsets(h, patch_size, stride)
    cols = axis_offsets(w, patch_size, stride)
    return PatchGrid(patch_size, stride, tuple((r, c) for r in rows for c in cols), h, w)


def extract_patch(image: np.ndarray, mask: np.ndarray | None, offset: tuple[int, int], patch_size: int):
    r, c = offset
    h, w = image.shape[-2:]
    if r < 0 or c < 0 or r + patch_size > h or c + patch_size > w:
        raise ShapeError(f"patch at {offset} of size {patch_size} leaves the {h}x{w} image")
    patch = image[:, r:r + patch_size, c:c + patch_size].copy()
    labels = None if mask is None else mask_to_labels(mask[r:r + patch_size, c:c + patch_size])
    return patch, labels


def extract_all(image: np.ndarray, mask: np.ndarray | None, grid: PatchGrid):
    """Stack every grid patch: ``[P, C, S, S]`` and labels ``[P, S, S]``."""
    s = grid.patch_size
    patches = np.stack([image[:, r:r + s, c:c + s] for r, c in grid.offsets])
    if mask is None:
        return patches, None
    labels = mask_to_labels(np.stack([mask[r:r + s, c:c + s] for r, c in grid.offsets]))
    return patches, labels


# -- synthetic scenes ---------------------------------------------------------------

# per-location appearance: background and water reflectance (R, G, B, NIR),
# texture amplitude, texture correlation length in pixels
_STYLES = {
    1: dict(bg=(0.30, 0.42, 0.18, 0.62), water=(0.22, 0.32, 0.34, 0.32), amp=0.05, sigma=3.0),
    2: dict(bg=(0.52, 0.40, 0.26, 0.42), water=(0.40, 0.34, 0.42, 0.12), amp=0.04, sigma=5.0),
    3: dict(bg=(0.18, 0.30, 0.12, 0.82), water=(0.14, 0.24, 0.26, 0.52), amp=0.06, sigma=2.0),
    4: dict(bg=(0.44, 0.46, 0.34, 0.52), water=(0.36, 0.40, 0.50, 0.22), amp=0.05, sigma=4.0),
    5: dict(bg=(0.60, 0.52, 0.44, 0.34), water=(0.50, 0.46, 0.58, 0.06), amp=0.03, sigma=6.0),
    6: dict(bg=(0.24, 0.20, 0.08, 0.72), water=(0.20, 0.16, 0.22, 0.42), amp=0.07, sigma=2.5),
    "new": dict(bg=(0.38, 0.36, 0.22, 0.58), water=(0.30, 0.30, 0.38, 0.26), amp=0.05, sigma=3.5),
}
_WATER_TEXTURE = 0.015
_PIXEL_NOISE = 0.012
MIN_COVER, MAX_COVER = 0.02, 0.60


def _smooth_field(rng: Rng, size: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.normal((size, size)), sigma, mode="wrap")
    return f / max(f.std(), 1e-12)


def _water_mask(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(100):
        n_bodies = int(rng.integers(1, 5, 1)[0])
        wobble = _smooth_field(rng, size, size / 16)
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(n_bodies):
            cy, cx, ra, rb, ang = rng.uniform(5)
            cy, cx = cy * size, cx * size
            a = (0.08 + 0.27 * ra) * size
            b = (0.05 + 0.20 * rb) * size
            t = ang * np.pi
            dy, dx = yy - cy, xx - cx
            u = (dx * np.cos(t) + dy * np.sin(t)) / a
            v = (-dx * np.sin(t) + dy * np.cos(t)) / b
            mask |= (u * u + v * v + 0.25 * wobble) <= 1.0
        cover = mask.mean()
        if MIN_COVER <= cover <= MAX_COVER:
            return mask
    raise RuntimeError("could not draw a water mask within coverage bounds")


def synth_scene(rng: Rng, size: int, location) -> tuple[np.ndarray, np.ndarray]:
    """One 4-band scene ``[4, size, size]`` and its 0/255 mask."""
    if location not in _STYLES:
        raise DataError(f"unknown synthetic location {location!r}")
    style = _STYLES[location]
    water = _water_mask(rng, size)
    tex = _smooth_field(rng, size, style["sigma"])
    tex2 = _smooth_field(rng, size, style["sigma"] * 3)
    wtex = _smooth_field(rng, size, 8.0)
    img = np.empty((4, size, size))
    for band in range(4):
        bg = style["bg"][band] + style["amp"] * (tex + 0.5 * tex2) * (1.0 + 0.3 * band)
        wt = style["water"][band] + _WATER_TEXTURE * wtex
        img[band] = np.where(water, wt, bg)
    img += _PIXEL_NOISE * rng.normal(img.shape)
    return img, np.where(water, MASK_ON, 0).astype(np.uint8)


def synth_generate(seed: int, n_images: int, size: int, location_id, start: int = 0):
    """``n_images`` scenes for one location. Scene ``i`` depends only on
    ``(seed, location, start + i)``."""
    if size < 64:
        raise ShapeError(f"synthetic scenes need size >= 64, got {size}")
    loc_key = 7 if location_id == "new" else int(location_id)
    base = Rng(seed).child(loc_key)
    images, masks = [], []
    for i in range(start, start + n_images):
        img, mask = synth_scene(base.child(i), size, location_id)
        images.append(img)
        masks.append(mask)
    return images, masks


def _split_quota(counts: dict, fraction: float) -> dict:
    """Largest-remainder allocation of ``round(fraction * total)`` held-out items."""
    total = round(fraction * sum(counts.values()))
    exact = {k: fraction * n for k, n in counts.items()}
    quota = {k: int(np.floor(v)) for k, v in exact.items()}
    order = sorted(counts, key=lambda k: (-(exact[k] - quota[k]), str(k)))
    for k in order[: total - sum(quota.values())]:
        quota[k] += 1
    return quota


def write_synthetic_dataset(
    out_dir: str | os.PathLike,
    seed: int,
    count: int,
    size: int = 320,
    locations: Sequence = LOCATIONS,
    val_fraction: float = 0.2,
    test_count: int = 0,
    new_count: int = 0,
) -> DatasetManifest:
    """Generate scenes, write FTEN images and PGM masks, return the manifest
    (also written to ``out_dir/manifest.json``) with train band statistics.

    ``count`` train+val scenes are dealt round-robin over ``locations`` and
    split per location by a seeded shuffle. ``test_count`` extra scenes per
    location and ``new_count`` scenes of an unseen location form the test split.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    locations = list(locations)
    per_loc = {loc: count // len(locations) + (1 if k < count % len(locations) else 0)
               for k, loc in enumerate(locations)}
    val_quota = _split_quota(per_loc, val_fraction)
    manifest = DatasetManifest(metadata={"image_size": size, "gsd_m": 3.7, "synthetic_seed": seed})
    manifest.root = out

    def emit(loc, n, start, splits):
        images, masks = synth_generate(seed, n, size, loc, start)
        for i, (img, mask, split) in enumerate(zip(images, masks, splits)):
            stem = f"loc{loc}_{start + i:04d}"
            save_ften(out / "images" / f"{stem}.ften", img.astype(np.float32))
            write_pgm(out / "masks" / f"{stem}.pgm", mask)
            manifest.entries.append(Entry(f"images/{stem}.ften", f"masks/{stem}.pgm", loc, split))

    split_rng = Rng(seed).child(1000)
    for loc in locations:
        n = per_loc[loc]
        if n == 0:
            continue
        splits = ["train"] * n
        for j in split_rng.child(int(loc)).permutation(n)[: val_quota[loc]]:
            splits[j] = "val"
        emit(loc, n, 0, splits)
        if test_count:
            emit(loc, test_count, n, ["test"] * test_count)
    if new_count:
        emit("new", new_count, 0, ["test"] * new_count)
    manifest.validate()
    manifest.band_stats = compute_band_stats(manifest)
    write_manifest(manifest, out / "manifest.json")
    return manifest


def load_split(manifest: DatasetManifest, split: str, locations: Iterable | None = None):
    """Normalized images, masks and entries of one split."""
    manifest.validate(require_stats=True)
    locs = None if locations is None else set(locations)
    out = []
    for e in manifest.select(split):
        if locs is not None and e.location not in locs:
            continue
        img = manifest.band_stats.normalize(manifest.load_image(e))
        mask = manifest.load_mask(e) if e.mask else None
        if mask is not None and mask.shape != img.shape[1:]:
            raise ShapeError(f"{e.mask}: mask {mask.shape} does not match image {img.shape[1:]}")
        out.append((img, mask, e))
    return out
