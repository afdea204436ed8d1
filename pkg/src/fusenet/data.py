"""Dataset manifests, raster tiles, normalization, patches, augmentation and synthetic data."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fusenet.autograd import IGNORE_INDEX
from fusenet.netpbm import read_pgm, write_pgm

ISPRS_CLASSES = ["impervious_surfaces", "building", "low_vegetation", "tree", "car", "clutter"]


class DatasetError(ValueError):
    pass


@dataclass
class TileEntry:
    id: str
    bands: dict[str, str]
    label: str


@dataclass
class DatasetManifest:
    classes: list[str]
    bands: list[str]
    tiles: list[TileEntry]
    split: dict[str, list[str]]
    ignore_index: int = IGNORE_INDEX
    root: str = "."

    def tile(self, tile_id: str) -> TileEntry:
        for t in self.tiles:
            if t.id == tile_id:
                return t
        raise DatasetError(f"tile {tile_id!r} is not in the manifest")

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "ignore_index": self.ignore_index,
            "bands": self.bands,
            "tiles": [{"id": t.id, "bands": dict(t.bands), "label": t.label} for t in self.tiles],
            "split": {k: list(v) for k, v in self.split.items()},
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


@dataclass
class LabeledTile:
    id: str
    bands: dict[str, np.ndarray]
    label: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape

    def stack(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self.bands[n] for n in names]).astype(np.float64)


@dataclass
class NormalizationStats:
    minimum: dict[str, float]
    maximum: dict[str, float]

    def apply(self, name: str, values: np.ndarray) -> np.ndarray:
        lo, hi = self.minimum[name], self.maximum[name]
        return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"min": self.minimum, "max": self.maximum}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls({k: float(v) for k, v in d["min"].items()}, {k: float(v) for k, v in d["max"].items()})


@dataclass
class PatchSample:
    inputs: list[np.ndarray]  # one [C_g, P, P] float array per group
    label: np.ndarray  # [P, P] class indices / ignore
    tile_id: str = ""
    offset: tuple[int, int] = (0, 0)
    augmentation: dict = field(default_factory=dict)


def load_manifest(path) -> DatasetManifest:
    """Parse and fully validate a manifest; every raster is read once."""
    with open(path) as f:
        raw = json.load(f)
    try:
        manifest = DatasetManifest(
            classes=list(raw["classes"]),
            bands=list(raw["bands"]),
            tiles=[TileEntry(str(t["id"]), dict(t["bands"]), t["label"]) for t in raw["tiles"]],
            split={k: list(v) for k, v in raw.get("split", {}).items()},
            ignore_index=int(raw.get("ignore_index", IGNORE_INDEX)),
            root=os.path.dirname(os.path.abspath(path)),
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc
    if not 1 <= len(manifest.classes) <= 254:
        raise DatasetError(f"class count must be in [1, 254], got {len(manifest.classes)}")
    ids = [t.id for t in manifest.tiles]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate tile ids")
    for name, members in manifest.split.items():
        for tid in members:
            if tid not in ids:
                raise DatasetError(f"split {name!r} references unknown tile {tid!r}")
    for t in manifest.tiles:
        for band in manifest.bands:
            if band not in t.bands:
                raise DatasetError(f"tile {t.id}: band {band!r} is not listed")
            if not os.path.exists(manifest.resolve(t.bands[band])):
                raise DatasetError(f"tile {t.id}: band file {t.bands[band]!r} does not exist")
        if not os.path.exists(manifest.resolve(t.label)):
            raise DatasetError(f"tile {t.id}: label file {t.label!r} does not exist")
        load_tile(manifest, t.id)
    return manifest


def load_tile(manifest: DatasetManifest, tile_id: str) -> LabeledTile:
    entry = manifest.tile(tile_id)
    bands = {name: read_pgm(manifest.resolve(entry.bands[name])) for name in manifest.bands}
    label = read_pgm(manifest.resolve(entry.label))
    if label.dtype != np.uint8:
        raise DatasetError(f"tile {tile_id}: label raster must be 8-bit")
    for name, raster in bands.items():
        if raster.shape != label.shape:
            raise DatasetError(f"tile {tile_id}: band {name!r} is {raster.shape}, label is {label.shape}")
    k = len(manifest.classes)
    bad = (label >= k) & (label != manifest.ignore_index)
    if bad.any():
        raise DatasetError(f"tile {tile_id}: label value {int(label[bad][0])} is outside "
                           f"[0, {k - 1}] and is not the ignore index")
    return LabeledTile(tile_id, bands, label)


def compute_normalization(manifest: DatasetManifest, split: str = "train",
                          tiles: Sequence[LabeledTile] | None = None) -> NormalizationStats:
    if tiles is None:
        tiles = [load_tile(manifest, tid) for tid in manifest.split[split]]
    if not tiles:
        raise DatasetError(f"split {split!r} is empty")
    lo, hi = {}, {}
    for band in manifest.bands:
        lo[band] = float(min(t.bands[band].min() for t in tiles))
        hi[band] = float(max(t.bands[band].max() for t in tiles))
        if hi[band] <= lo[band]:
            raise DatasetError(f"band {band!r} is constant over split {split!r}")
    return NormalizationStats(lo, hi)


def normalized_groups(tile: LabeledTile, groups: Sequence[Sequence[str]],
                      stats: NormalizationStats, dtype=np.float32) -> list[np.ndarray]:
    """Full-tile ``[C_g, H, W]`` stacks, one per group, scaled into [0, 1]."""
    for g in groups:
        for band in g:
            if band not in tile.bands:
                raise DatasetError(f"tile {tile.id}: group band {band!r} is not available")
    return [np.stack([stats.apply(b, tile.bands[b]) for b in g]).astype(dtype) for g in groups]


def patch_offsets(length: int, size: int, stride: int) -> list[int]:
    if size > length:
        raise ValueError(f"patch size {size} exceeds tile dimension {length}")
    offsets = list(range(0, length - size + 1, stride))
    if offsets[-1] != length - size:
        offsets.append(length - size)
    return offsets


def extract_patches(tile_shape: tuple[int, int], size: int, stride: int | None = None,
                    multiple_of: int = 1) -> list[tuple[int, int]]:
    """Row-major ``(row, col)`` offsets; the last row/column is aligned to the tile edge."""
    if size % multiple_of:
        raise ValueError(f"patch size {size} is not divisible by {multiple_of}")
    stride = size if stride is None else stride
    h, w = tile_shape
    return [(r, c) for r in patch_offsets(h, size, stride) for c in patch_offsets(w, size, stride)]


def crop_sample(tile_id: str, group_stacks: Sequence[np.ndarray], label: np.ndarray,
                offset: tuple[int, int], size: int) -> PatchSample:
    r, c = offset
    return PatchSample([g[:, r:r + size, c:c + size] for g in group_stacks],
                       label[r:r + size, c:c + size], tile_id, (r, c))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def draw_augmentation(rng: np.random.Generator, scale_range=(0.75, 1.25)) -> dict:
    return {
        "rot90": int(rng.integers(4)),
        "flip_h": bool(rng.random() < 0.5),
        "flip_v": bool(rng.random() < 0.5),
        "scale": float(rng.uniform(*scale_range)),
    }


def _rescale(arr: np.ndarray, scale: float, fill) -> np.ndarray:
    """Nearest-neighbour resample of the last two axes, then center crop/pad back to size."""
    size = arr.shape[-1]
    new = max(1, int(round(size * scale)))
    if new == size:
        return arr
    src = np.minimum(((np.arange(new) + 0.5) * size / new).astype(int), size - 1)
    resampled = arr[..., src[:, None], src[None, :]]
    if new > size:
        o = (new - size) // 2
        return resampled[..., o:o + size, o:o + size]
    out = np.full(arr.shape, fill, dtype=arr.dtype)
    o = (size - new) // 2
    out[..., o:o + new, o:o + new] = resampled
    return out


def apply_augmentation(arr: np.ndarray, desc: dict, fill=0) -> np.ndarray:
    """Apply one geometric transform to the last two axes of ``arr``."""
    out = _rescale(arr, desc.get("scale", 1.0), fill)
    if desc.get("flip_h"):
        out = out[..., :, ::-1]
    if desc.get("flip_v"):
        out = out[..., ::-1, :]
    k = desc.get("rot90", 0) % 4
    if k:
        out = np.rot90(out, -k, axes=(-2, -1))  # clockwise
    return np.ascontiguousarray(out)


def augment(sample: PatchSample, seed=None, desc: dict | None = None,
            ignore_index: int = IGNORE_INDEX) -> PatchSample:
    """Random 90-degree rotation, flips and scale in [0.75, 1.25], shared by every band and the label."""
    h, w = sample.label.shape
    if h != w:
        raise ValueError(f"augmentation needs a square patch, got {h}x{w}")
    if desc is None:
        desc = draw_augmentation(np.random.default_rng(seed))
    inputs = [apply_augmentation(x, desc, 0) for x in sample.inputs]
    label = apply_augmentation(sample.label, desc, ignore_index)
    return PatchSample(inputs, label, sample.tile_id, sample.offset, dict(desc))


def batch_samples(samples: Sequence[PatchSample]) -> tuple[list[np.ndarray], np.ndarray]:
    n_groups = len(samples[0].inputs)
    inputs = [np.stack([s.inputs[g] for s in samples]) for g in range(n_groups)]
    return inputs, np.stack([s.label for s in samples])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

SYNTH_BANDS = ["B1", "B2", "B3", "B4", "B5"]
# class index for the decision bits (b1, b4, b5) read as a 3-bit number; the
# patterns 100/111 and 101/110 share classes 4 and 5.
SYNTH_CLASS_TABLE = np.array([0, 1, 2, 3, 4, 5, 5, 4], dtype=np.uint8)
_B5_RANGE = (30000.0, 40000.0)


def _bit_layer(rng, size, lo_range, hi_range, jitter, n_rects=(3, 7)):
    """Painted rectangles of constant low/high level with bounded noise; returns (bits, values)."""
    bit = np.full((size, size), rng.random() < 0.5)
    level = np.full((size, size), rng.uniform(*(hi_range if bit[0, 0] else lo_range)))
    for _ in range(int(rng.integers(*n_rects))):
        rh, rw = rng.integers(size // 8, size // 2 + 1, size=2)
        r0, c0 = rng.integers(0, size - rh + 1), rng.integers(0, size - rw + 1)
        on = rng.random() < 0.5
        bit[r0:r0 + rh, c0:c0 + rw] = on
        level[r0:r0 + rh, c0:c0 + rw] = rng.uniform(*(hi_range if on else lo_range))
    values = level + rng.uniform(-jitter, jitter, size=(size, size))
    return bit, values


def synth_tile(rng: np.random.Generator, size: int):
    b1_bit, b1 = _bit_layer(rng, size, (20, 90), (165, 235), 12)
    b4_bit, b4 = _bit_layer(rng, size, (20, 90), (165, 235), 12)
    lo5, hi5 = _B5_RANGE
    b5_bit, b5 = _bit_layer(rng, size, (30300, 33500), (36500, 39700), 300)
    b2 = 0.8 * b1 + 20 + rng.uniform(-10, 10, size=(size, size))
    b3 = 0.9 * b1 + 10 + rng.uniform(-10, 10, size=(size, size))
    bands = {
        "B1": np.clip(np.rint(b1), 0, 255).astype(np.uint8),
        "B2": np.clip(np.rint(b2), 0, 255).astype(np.uint8),
        "B3": np.clip(np.rint(b3), 0, 255).astype(np.uint8),
        "B4": np.clip(np.rint(b4), 0, 255).astype(np.uint8),
        "B5": np.clip(np.rint(b5), lo5, hi5).astype(np.uint16),
    }
    code = 4 * b1_bit.astype(int) + 2 * b4_bit.astype(int) + b5_bit.astype(int)
    label = SYNTH_CLASS_TABLE[code]
    if rng.random() < 0.5:
        side = max(1, size // 8)
        r0, c0 = rng.integers(0, size - side + 1, size=2)
        label[r0:r0 + side, c0:c0 + side] = IGNORE_INDEX
    return bands, label


def synth_bits(bands: dict[str, np.ndarray]) -> np.ndarray:
    """Recover the decision bits from thresholding B1, B4 and B5 at mid-range."""
    return np.stack([bands["B1"] > 127.5, bands["B4"] > 127.5, bands["B5"] > sum(_B5_RANGE) / 2])


def synth_generate(out_dir, n_tiles: int = 8, tile_size: int = 64, seed: int = 0,
                   val_fraction: float = 0.25) -> DatasetManifest:
    """Write a seeded 5-band, 6-class dataset with a manifest; returns the manifest.

    The label depends on B1, B4 and B5; B2/B3 are noisy copies of B1 and B5
    is stored on a 16-bit scale.
    """
    os.makedirs(out_dir, exist_ok=True)
    n_val = int(round(n_tiles * val_fraction)) if n_tiles > 1 else 0
    tiles = []
    for i in range(n_tiles):
        rng = np.random.default_rng([seed, i])
        bands, label = synth_tile(rng, tile_size)
        tid = f"tile{i:03d}"
        entry = TileEntry(tid, {}, f"{tid}_label.pgm")
        for name in SYNTH_BANDS:
            fname = f"{tid}_{name}.pgm"
            write_pgm(os.path.join(out_dir, fname), bands[name], maxval=65535 if name == "B5" else 255)
            entry.bands[name] = fname
        write_pgm(os.path.join(out_dir, entry.label), label, maxval=255)
        tiles.append(entry)
    ids = [t.id for t in tiles]
    manifest = DatasetManifest(
        classes=[f"class{c}" for c in range(6)], bands=list(SYNTH_BANDS), tiles=tiles,
        split={"train": ids[:n_tiles - n_val], "val": ids[n_tiles - n_val:]},
        root=os.path.abspath(out_dir))
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def band_channels(manifest: DatasetManifest, tile_ids: Sequence[str] | None = None):
    """Raw band pixels concatenated over tiles, as grouping inputs."""
    from fusenet.grouping import BandChannel

    tile_ids = [t.id for t in manifest.tiles] if tile_ids is None else list(tile_ids)
    tiles = [load_tile(manifest, tid) for tid in tile_ids]
    return [BandChannel(b, np.concatenate([t.bands[b].reshape(-1) for t in tiles]), tile_ids)
            for b in manifest.bands]
