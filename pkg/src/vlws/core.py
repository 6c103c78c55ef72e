"""Domain types shared across the package: class palette, samples, manifests."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class PaletteClass:
    name: str
    color: tuple[int, int, int]
    index: int


@dataclass(frozen=True)
class ClassPalette:
    classes: tuple[PaletteClass, ...]

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if names != ["background", "crop", "weed"]:
            raise ValueError(f"palette must be (background, crop, weed) in that order, got {names}")
        if [c.index for c in self.classes] != list(range(len(self.classes))):
            raise ValueError("palette indices must be 0..C-1 without gaps")
        colors = [c.color for c in self.classes]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")
        for color in colors:
            if len(color) != 3 or any(not 0 <= v <= 255 for v in color):
                raise ValueError(f"invalid RGB color {color}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def colors_array(self) -> np.ndarray:
        """(C, 3) uint8 array of class colors in index order."""
        return np.array([c.color for c in self.classes], dtype=np.uint8)


PALETTE = ClassPalette(
    (
        PaletteClass("background", (0, 0, 0), 0),
        PaletteClass("crop", (0, 255, 0), 1),
        PaletteClass("weed", (255, 0, 0), 2),
    )
)

BACKGROUND, CROP, WEED = 0, 1, 2


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """One image tile with its index mask, caption and provenance."""

    image: np.ndarray
    mask: np.ndarray
    caption: str
    dataset_id: str
    tile_origin: Optional[tuple[int, int]] = None
    sample_id: str = ""

    def __post_init__(self):
        # read-only views keep records safe to share between readers
        for arr in (self.image, self.mask):
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_sample(s: SampleRecord, palette: ClassPalette = PALETTE) -> ValidationReport:
    """Check every SampleRecord invariant; violations are returned, never raised."""
    report = ValidationReport()
    image, mask = np.asarray(s.image), np.asarray(s.mask)
    if image.ndim != 3 or image.shape[2] != 3:
        report.violations.append(f"image must be HxWx3, got shape {image.shape}")
    elif image.dtype != np.uint8:
        report.violations.append(f"image must be 8-bit, got dtype {image.dtype}")
    if mask.ndim != 2:
        report.violations.append(f"mask must be HxW, got shape {mask.shape}")
    if image.ndim >= 2 and mask.ndim >= 2 and image.shape[:2] != mask.shape[:2]:
        report.violations.append(f"shape mismatch: image {image.shape[:2]} vs mask {mask.shape[:2]}")
    if mask.ndim == 2 and mask.size:
        bad = (mask < 0) | (mask >= palette.num_classes)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            report.violations.append(f"invalid class index {int(mask[r, c])} at ({r},{c})")
    if not isinstance(s.caption, str) or not s.caption.strip():
        report.violations.append("caption is empty")
    return report


def mask_to_onehot(mask: np.ndarray, num_classes: int = 3) -> np.ndarray:
    """(H, W) index mask -> (C, H, W) one-hot array of 0/1."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError("class out of range")
    return (np.arange(num_classes).reshape(-1, 1, 1) == mask[None]).astype(np.uint8)


def check_probability_map(p: np.ndarray, atol: float = 1e-5) -> None:
    p = np.asarray(p)
    if p.ndim != 3:
        raise ValueError(f"probability map must be CxHxW, got {p.shape}")
    if (p < 0).any() or (p > 1).any():
        raise ValueError("probabilities outside [0, 1]")
    if not np.allclose(p.sum(axis=0), 1.0, atol=atol):
        raise ValueError("per-pixel probabilities do not sum to 1")


def check_onehot(y: np.ndarray) -> None:
    y = np.asarray(y)
    if y.ndim != 3 or not np.isin(y, (0, 1)).all() or not (y.sum(axis=0) == 1).all():
        raise ValueError("not a valid one-hot mask")


# --- manifests --------------------------------------------------------------

MANIFEST_SPLITS = ("train", "val")


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    mask: Path
    caption: Optional[str] = None  # inline caption text
    caption_path: Optional[Path] = None


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    split: str
    entries: tuple[ManifestEntry, ...]
    gsd_mm_per_px: float = 1.0
    palette: ClassPalette = PALETTE
    source: Optional[Path] = None

    def validate(self, check_files: bool = True) -> None:
        if self.split not in MANIFEST_SPLITS:
            raise ValueError(f"split must be one of {MANIFEST_SPLITS}, got {self.split!r}")
        if not self.entries:
            raise ValueError(f"manifest for {self.dataset_id!r} has no entries")
        if self.gsd_mm_per_px <= 0:
            raise ValueError("gsd must be positive")
        if check_files:
            for e in self.entries:
                for p in (e.image, e.mask, e.caption_path):
                    if p is not None and not Path(p).exists():
                        raise FileNotFoundError(f"{self.dataset_id}: missing file {p}")


def read_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest file.

    Format: header lines ``dataset_id=...``, ``split=...``, ``gsd=...`` followed by one
    tab-separated record per line, ``image=<path>\\tmask=<path>[\\tcaption=<path|inline:text>]``.
    Relative paths resolve against the manifest's directory. Blank lines and ``#`` comments
    are ignored.
    """
    path = Path(path)
    base = path.parent
    header: dict[str, str] = {}
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line and not line.startswith("image="):
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            header[key.strip()] = value.strip()
            continue
        fields = {}
        for part in line.split("\t"):
            key, sep, value = part.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: malformed field {part!r}")
            fields[key.strip()] = value
        if "image" not in fields or "mask" not in fields:
            raise ValueError(f"{path}:{lineno}: record needs image= and mask=")
        caption = caption_path = None
        cap = fields.get("caption")
        if cap is not None:
            if cap.startswith("inline:"):
                caption = cap[len("inline:"):]
            else:
                caption_path = base / cap
        entries.append(ManifestEntry(base / fields["image"], base / fields["mask"], caption, caption_path))
    for key in ("dataset_id", "split"):
        if key not in header:
            raise ValueError(f"{path}: missing header {key}=")
    manifest = DatasetManifest(
        dataset_id=header["dataset_id"],
        split=header["split"],
        entries=tuple(entries),
        gsd_mm_per_px=float(header.get("gsd", 1.0)),
        source=path,
    )
    manifest.validate(check_files=check_files)
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write ``manifest`` to ``path``; paths are stored relative to the file where possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    lines = [f"dataset_id={manifest.dataset_id}", f"split={manifest.split}", f"gsd={manifest.gsd_mm_per_px:g}"]
    for e in manifest.entries:
        rec = f"image={rel(e.image)}\tmask={rel(e.mask)}"
        if e.caption is not None:
            if "\t" in e.caption or "\n" in e.caption:
                raise ValueError("inline captions cannot contain tabs or newlines")
            rec += f"\tcaption=inline:{e.caption}"
        elif e.caption_path is not None:
            rec += f"\tcaption={rel(e.caption_path)}"
        lines.append(rec)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_caption_file(path: str | Path) -> list[str]:
    """Caption sidecar: one UTF-8 caption per non-blank line."""
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]

