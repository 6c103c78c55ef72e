"""Synthetic crop/weed scenes for smoke tests, demos and protocol dry runs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from vlws.core import BACKGROUND, CROP, WEED, DatasetManifest, ManifestEntry, SampleRecord, write_manifest
from vlws.ingest import encode_mask, save_png, synthesize_caption

DATASET_IDS = ("UAV Soybean", "PhenoBench", "GrowingSoy", "ROSE")

# per-dataset soil tint so the four domains look different
_SOIL = {0: (120, 90, 60), 1: (95, 80, 70), 2: (140, 110, 80), 3: (110, 100, 90)}


def synthetic_scene(size: int, seed: int, style: int = 0, rows: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Crop discs along vertical rows plus scattered weed blobs on textured soil."""
    rng = np.random.Generator(np.random.PCG64(seed))
    h = w = size
    mask = np.full((h, w), BACKGROUND, dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    for k in range(rows):
        cx = int((k + 0.5) * w / rows)
        for cy in range(size // 8, h, max(size // 4, 4)):
            r = rng.uniform(0.05, 0.09) * size
            jitter = rng.normal(0, size * 0.01, 2)
            mask[(yy - cy - jitter[0]) ** 2 + (xx - cx - jitter[1]) ** 2 <= r * r] = CROP
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.03, 0.06) * size
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask[blob & (mask == BACKGROUND)] = WEED
    soil = np.array(_SOIL[style % len(_SOIL)], dtype=np.float64)
    image = soil + rng.normal(0, 8, (h, w, 3))
    image[mask == CROP] = (40, 170, 50) + rng.normal(0, 6, (np.count_nonzero(mask == CROP), 3))
    image[mask == WEED] = (150, 190, 40) + rng.normal(0, 6, (np.count_nonzero(mask == WEED), 3))
    return np.clip(image, 1, 255).astype(np.uint8), mask


def synthetic_records(n: int, size: int = 64, dataset_id: str = "UAV Soybean", seed: int = 0, style: int = 0) -> list[SampleRecord]:
    out = []
    for i in range(n):
        image, mask = synthetic_scene(size, seed * 10_007 + i, style)
        out.append(SampleRecord(image, mask, synthesize_caption(mask, dataset_id), dataset_id, sample_id=f"{dataset_id}/{seed}/{i}"))
    return out


def write_synthetic_dataset(
    root: str | Path,
    dataset_ids: Sequence[str] = DATASET_IDS,
    n_train: int = 8,
    n_val: int = 4,
    size: int = 64,
    seed: int = 0,
) -> list[Path]:
    """Write PNG tiles, RGB palette masks and train/val manifests; returns manifest paths."""
    root = Path(root)
    paths = []
    for d, ds in enumerate(dataset_ids):
        slug = ds.lower().replace(" ", "_")
        for split, n, offset in (("train", n_train, 0), ("val", n_val, 100_000)):
            entries = []
            for i in range(n):
                image, mask = synthetic_scene(size, seed * 1_000_003 + d * 10_000 + offset + i, style=d)
                img_p = save_png(image, root / slug / split / f"{i:04d}.png")
                mask_p = save_png(encode_mask(mask), root / slug / split / f"{i:04d}_mask.png")
                entries.append(ManifestEntry(img_p, mask_p))
            manifest = DatasetManifest(ds, split, tuple(entries), gsd_mm_per_px=1.0)
            paths.append(write_manifest(manifest, root / f"{slug}_{split}.manifest"))
    return paths
