"""Dataset construction: scene tiling, mask decoding, captions, catalogs, subsampling."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from vlws.core import (
    BACKGROUND,
    CROP,
    PALETTE,
    WEED,
    ClassPalette,
    DatasetManifest,
    SampleRecord,
    read_caption_file,
)

log = logging.getLogger(__name__)


# --- tiling -----------------------------------------------------------------


@dataclass(frozen=True)
class TilingConfig:
    tile_size: int = 512
    overlap_fraction: float = 0.25
    discard_threshold: float = 0.5

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must be in [0, 1)")
        if not 0 <= self.discard_threshold <= 1:
            raise ValueError("discard_threshold must be in [0, 1]")
        if self.stride < 1:
            raise ValueError("tile stride must be >= 1")

    @property
    def stride(self) -> int:
        return int(round(self.tile_size * (1 - self.overlap_fraction)))


@dataclass(frozen=True)
class Tile:
    image: np.ndarray
    mask: Optional[np.ndarray]
    origin: tuple[int, int]


def tile_origins(extent: int, tile_size: int, stride: int) -> list[int]:
    """Regular grid origins along one axis plus an edge-anchored tile for any remainder."""
    if extent < tile_size:
        raise ValueError("scene too small")
    origins = list(range(0, extent - tile_size + 1, stride))
    if origins[-1] + tile_size < extent:
        origins.append(extent - tile_size)
    return origins


def count_noninformative(tile: np.ndarray) -> float:
    """Fraction of pixels whose three channels are all zero (orthomosaic nodata)."""
    tile = np.asarray(tile)
    if tile.size == 0:
        return 0.0
    return float(np.all(tile == 0, axis=-1).mean())


def tile_scene(
    image: np.ndarray, mask: Optional[np.ndarray] = None, cfg: TilingConfig = TilingConfig()
) -> list[Tile]:
    """Cut a scene into overlapping tiles in row-major origin order, dropping nodata-heavy tiles."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h < cfg.tile_size or w < cfg.tile_size:
        raise ValueError("scene too small")
    if mask is not None and np.asarray(mask).shape[:2] != (h, w):
        raise ValueError("mask and scene extents differ")
    ts = cfg.tile_size
    tiles = []
    for r in tile_origins(h, ts, cfg.stride):
        for c in tile_origins(w, ts, cfg.stride):
            img = image[r : r + ts, c : c + ts]
            if count_noninformative(img) > cfg.discard_threshold:
                continue
            m = None if mask is None else np.asarray(mask)[r : r + ts, c : c + ts]
            tiles.append(Tile(img, m, (r, c)))
    return tiles


# --- mask codec -------------------------------------------------------------


def decode_mask(mask_rgb: np.ndarray, palette: ClassPalette = PALETTE) -> np.ndarray:
    """RGB palette mask -> index mask; off-palette colors go to the nearest palette color."""
    rgb = np.asarray(mask_rgb)[..., :3].astype(np.int32)
    colors = palette.colors_array().astype(np.int32)
    d2 = ((rgb[..., None, :] - colors[None, None]) ** 2).sum(-1)
    # argmin picks the lowest index on distance ties
    return d2.argmin(-1).astype(np.uint8)


def encode_mask(mask: np.ndarray, palette: ClassPalette = PALETTE) -> np.ndarray:
    """Index mask -> RGB palette rendering."""
    return palette.colors_array()[np.asarray(mask)]


# PhenoBench semantics: 0 soil, 1 crop, 2 weed, 3 partial crop, 4 partial weed
PHENOBENCH_LUT = np.array([BACKGROUND, CROP, WEED, CROP, WEED], dtype=np.uint8)


def remap_index_mask(mask: np.ndarray, dataset_id: str) -> np.ndarray:
    mask = np.asarray(mask)
    if _dataset_key(dataset_id) == "phenobench" and mask.size:
        if mask.min() < 0 or mask.max() >= len(PHENOBENCH_LUT):
            raise ValueError(f"label {int(mask.max())} outside the PhenoBench label set")
        return PHENOBENCH_LUT[mask]
    return mask.astype(np.uint8)


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_mask(path: str | Path, dataset_id: str = "", palette: ClassPalette = PALETTE) -> np.ndarray:
    """Read a mask raster: RGB images are palette-decoded, single-channel ones hold indices."""
    with Image.open(path) as im:
        if im.mode in ("L", "P", "I", "I;16"):
            return remap_index_mask(np.asarray(im), dataset_id)
        return decode_mask(np.asarray(im.convert("RGB")), palette)


def save_png(array: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


# --- captions ---------------------------------------------------------------

CROP_NAMES = {
    "uavsoybean": "soybean",
    "phenobench": "sugar beet",
    "growingsoy": "soybean",
    "rose": "bean",
}

_COVERAGE_WORDS = ("absent", "sparse", "moderate", "dense")
_WEED_WORDS = ("no", "scattered", "moderate", "heavy")


def _dataset_key(dataset_id: str) -> str:
    key = re.sub(r"[^a-z0-9]", "", dataset_id.lower())
    return key[: -len("vl")] if key.endswith("vl") else key


def crop_name(dataset_id: str) -> str:
    return CROP_NAMES.get(_dataset_key(dataset_id), "crop")


def coverage_bucket(fraction: float) -> int:
    if fraction <= 0:
        return 0
    if fraction <= 0.1:
        return 1
    if fraction <= 0.35:
        return 2
    return 3


def is_row_structured(mask: np.ndarray, valley_ratio: float = 0.2) -> bool:
    """Two or more column-histogram peaks of crop pixels separated by low valleys."""
    hist = (np.asarray(mask) == CROP).sum(axis=0)
    if hist.max(initial=0) == 0:
        return False
    occupied = hist > valley_ratio * hist.max()
    runs = np.count_nonzero(occupied[1:] & ~occupied[:-1]) + int(occupied[0])
    return runs >= 2


def synthesize_caption(mask: np.ndarray, dataset_id: str) -> str:
    """Deterministic template caption from class coverage and crop row layout."""
    mask = np.asarray(mask)
    n = max(mask.size, 1)
    f_crop = np.count_nonzero(mask == CROP) / n
    f_weed = np.count_nonzero(mask == WEED) / n
    name = crop_name(dataset_id)
    layout = "row-structured" if is_row_structured(mask) else "irregular layout"
    return (
        f"{name[0].upper()}{name[1:]} {_COVERAGE_WORDS[coverage_bucket(f_crop)]} "
        f"with {_WEED_WORDS[coverage_bucket(f_weed)]} weeds, {layout}."
    )


def excess_green_mask(image: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Vegetation pseudo-mask (vegetation labelled crop) from the excess-green index."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    total = rgb.sum(-1) + 1e-8
    r, g, b = (rgb[..., i] / total for i in range(3))
    exg = 2 * g - r - b
    return np.where(exg > threshold, CROP, BACKGROUND).astype(np.uint8)


def neutral_caption(dataset_id: str) -> str:
    name = crop_name(dataset_id)
    return f"{name[0].upper()}{name[1:]} field with weeds."


# --- catalog ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CatalogItem:
    """Reference to one sample; loads lazily from disk unless a record is held in memory."""

    dataset_id: str
    split: str
    sample_id: str
    record: Optional[SampleRecord] = None
    image_path: Optional[Path] = None
    mask_path: Optional[Path] = None
    caption: Optional[str] = None
    caption_path: Optional[Path] = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.dataset_id, self.sample_id)

    def load(self) -> SampleRecord:
        if self.record is not None:
            return self.record
        image = load_rgb(self.image_path)
        mask = load_mask(self.mask_path, self.dataset_id)
        caption = self.caption
        if caption is None and self.caption_path is not None:
            lines = read_caption_file(self.caption_path)
            caption = lines[0] if lines else None
        if caption is None:
            caption = synthesize_caption(mask, self.dataset_id)
        return SampleRecord(image, mask, caption, self.dataset_id, sample_id=self.sample_id)


@dataclass(frozen=True)
class Catalog:
    items: tuple[CatalogItem, ...]
    sampling_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        splits: dict[tuple[str, str], str] = {}
        for it in self.items:
            prev = splits.setdefault(it.key, it.split)
            if prev != it.split:
                raise ValueError(f"sample {it.key} appears in both {prev} and {it.split}")

    def __len__(self):
        return len(self.items)

    def split(self, split: str, dataset_id: Optional[str] = None) -> list[CatalogItem]:
        return [
            it for it in self.items if it.split == split and (dataset_id is None or it.dataset_id == dataset_id)
        ]

    @property
    def dataset_ids(self) -> list[str]:
        return list(dict.fromkeys(it.dataset_id for it in self.items))

    def counts(self) -> dict[tuple[str, str], int]:
        return dict(Counter((it.dataset_id, it.split) for it in self.items))

    def restrict(self, predicate: Callable[[CatalogItem], bool]) -> "Catalog":
        return replace(self, items=tuple(it for it in self.items if predicate(it)))


def catalog_from_records(records: Iterable[SampleRecord], split: str = "train") -> Catalog:
    items = []
    for i, rec in enumerate(records):
        sid = rec.sample_id or f"{rec.dataset_id}/{i:06d}"
        items.append(CatalogItem(rec.dataset_id, split, sid, record=rec))
    return Catalog(tuple(items))


def manifest_items(manifest: DatasetManifest) -> list[CatalogItem]:
    return [
        CatalogItem(
            manifest.dataset_id,
            manifest.split,
            str(Path(e.image).resolve()),
            image_path=Path(e.image),
            mask_path=Path(e.mask),
            caption=e.caption,
            caption_path=e.caption_path,
        )
        for e in manifest.entries
    ]


def build_catalog(manifests: Sequence[DatasetManifest]) -> Catalog:
    """Union of all manifest samples with provenance; duplicates are rejected."""
    items: list[CatalogItem] = []
    seen: set[tuple[str, str]] = set()
    for m in manifests:
        for it in manifest_items(m):
            if it.key in seen:
                raise ValueError(f"duplicate sample {it.key}")
            seen.add(it.key)
            items.append(it)
    catalog = Catalog(tuple(items))
    for (ds, split), n in sorted(catalog.counts().items()):
        log.info("catalog %s/%s: %d samples", ds, split, n)
    return catalog


def merge_catalogs(*catalogs: Catalog) -> Catalog:
    items: list[CatalogItem] = []
    seen: set[tuple[str, str]] = set()
    for cat in catalogs:
        for it in cat.items:
            if it.key in seen:
                raise ValueError(f"duplicate sample {it.key}")
            seen.add(it.key)
            items.append(it)
    return Catalog(tuple(items))


def seeded_permutation(n: int, seed: int) -> np.ndarray:
    # PCG64 is specified explicitly so permutations are stable across platforms
    return np.random.Generator(np.random.PCG64(seed)).permutation(n)


def subsample_target(catalog: Catalog, target_id: str, fraction: float, seed: int) -> Catalog:
    """Keep floor(fraction * N) target-train samples: a prefix of one seeded permutation."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    target = [it for it in catalog.items if it.dataset_id == target_id and it.split == "train"]
    if not any(it.dataset_id == target_id for it in catalog.items):
        raise ValueError(f"target dataset {target_id!r} not in catalog")
    keep_n = math.floor(fraction * len(target) + 1e-9)
    order = seeded_permutation(len(target), seed)
    kept = {target[i].key for i in order[:keep_n]}
    return catalog.restrict(
        lambda it: not (it.dataset_id == target_id and it.split == "train") or it.key in kept
    )


def class_pixel_counts(items: Iterable[CatalogItem], num_classes: int = 3) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for it in items:
        counts += np.bincount(np.asarray(it.load().mask).ravel(), minlength=num_classes)[:num_classes]
    return counts


def inverse_frequency_weights(counts: np.ndarray) -> np.ndarray:
    """Inverse pixel-frequency class weights renormalized to mean 1."""
    counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    w = counts.sum() / counts
    return w / w.mean()
