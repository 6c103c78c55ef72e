"""Protocol drivers: target-fraction sweeps, contrastive-weight ablation, field maps, embedding analysis."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from vlws.core import PALETTE, SampleRecord
from vlws.ingest import (
    Catalog,
    CatalogItem,
    TilingConfig,
    encode_mask,
    excess_green_mask,
    neutral_caption,
    seeded_permutation,
    subsample_target,
    synthesize_caption,
    tile_scene,
)
from vlws.losses import LossConfig
from vlws.metrics import per_class_dice
from vlws.model import DilatedResNet, ModelConfig, VLWSModel
from vlws.trainer import TrainConfig, TrainResult, evaluate_items, images_to_tensor, predict_probs, train
from vlws.vlencoder import EncoderConfig, VLEncoder

log = logging.getLogger(__name__)

TABLE_ROWS = ("Weed", "Crop", "Background", "Mean")
DEFAULT_FRACTIONS = (0.1, 0.2, 0.5, 1.0)
DEFAULT_LAMBDAS = (0.01, 0.02, 0.03, 0.05, 0.10)

TrainFn = Callable[..., TrainResult]


def _dice_rows(scores: Sequence[float]) -> list[float]:
    """Per-class Dice (background, crop, weed) -> percentages in (Weed, Crop, Background, Mean) order."""
    return [100 * scores[2], 100 * scores[1], 100 * scores[0], 100 * sum(scores) / len(scores)]


def id_list_hash(items: Sequence[CatalogItem]) -> str:
    return hashlib.sha256("\n".join(f"{it.dataset_id}\x1f{it.sample_id}" for it in items).encode()).hexdigest()


# --- domain-adaptation sweep --------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    target_dataset: str
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    repeats: int = 1
    required_datasets: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if list(fr) != sorted(fr) or any(not 0 < f <= 1 for f in fr):
            raise ValueError("fractions must be ascending values in (0, 1]")
        object.__setattr__(self, "fractions", fr)
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class SweepCell:
    fraction: float
    dice: list[float]  # background, crop, weed; averaged over repeats
    target_train_ids: list[str]
    target_val_hash: str
    history: list[dict] = field(default_factory=list)


@dataclass
class SweepReport:
    target: str
    sources: list[str]
    cells: list[SweepCell]

    def rows(self) -> dict[str, list[float]]:
        cols = [_dice_rows(c.dice) for c in self.cells]
        return {name: [col[i] for col in cols] for i, name in enumerate(TABLE_ROWS)}

    def table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["Target Dataset", "Source Datasets", "Class"] + [f"{round(100 * c.fraction)}%" for c in self.cells])
        for name, vals in self.rows().items():
            w.writerow([self.target, " + ".join(self.sources), name] + [f"{v:.2f}" for v in vals])
        return buf.getvalue()


def run_adaptation_sweep(
    spec: SweepSpec,
    catalog: Catalog,
    model_cfg: ModelConfig = ModelConfig(),
    enc_cfg: EncoderConfig = EncoderConfig(),
    loss_cfg: LossConfig = LossConfig(),
    train_fn: TrainFn = train,
) -> SweepReport:
    """Train on full source splits plus a nested fraction of the target train split, per fraction."""
    present = set(catalog.dataset_ids)
    for ds in spec.required_datasets or ():
        if ds not in present:
            raise ValueError(f"missing manifest for dataset {ds!r}")
    if spec.target_dataset not in present:
        raise ValueError(f"missing manifest for dataset {spec.target_dataset!r}")
    sources = [ds for ds in catalog.dataset_ids if ds != spec.target_dataset]
    target_val = catalog.split("val", spec.target_dataset)
    if not target_val:
        raise ValueError(f"target dataset {spec.target_dataset!r} has no validation split")

    base = catalog.restrict(lambda it: it.split == "train" or it.dataset_id == spec.target_dataset)
    cells = []
    for fraction in spec.fractions:
        cell_catalog = subsample_target(base, spec.target_dataset, fraction, spec.seed)
        kept = [it.sample_id for it in cell_catalog.split("train", spec.target_dataset)]
        val_items = cell_catalog.split("val", spec.target_dataset)
        scores, history = [], []
        for r in range(spec.repeats):
            model = VLWSModel(replace(model_cfg, seed=model_cfg.seed + r), enc_cfg)
            tcfg = replace(spec.train, seed=spec.train.seed + r)
            result = train_fn(model, cell_catalog, tcfg, loss_cfg, val_items=val_items)
            report = evaluate_items(result.model, val_items, "file", tcfg.batch_size)
            scores.append(per_class_dice(report.pooled))
            history += result.history
        log.info("fraction %.2f: %d target samples", fraction, len(kept))
        cells.append(SweepCell(fraction, list(np.mean(scores, axis=0)), kept, id_list_hash(val_items), history))
    return SweepReport(spec.target_dataset, sources, cells)


# --- contrastive-weight ablation ------------------------------------------------


@dataclass
class AblationReport:
    values: list[float]
    dice: list[list[float]]  # per value: background, crop, weed
    histories: list[list[dict]] = field(default_factory=list)

    def table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["lambda_VL", "Weed", "Crop", "Bg", "Average"])
        for v, scores in zip(self.values, self.dice):
            w.writerow([f"{v:.2f}"] + [f"{x:.2f}" for x in _dice_rows(scores)])
        return buf.getvalue()


def run_lambda_ablation(
    catalog: Catalog,
    values: Sequence[float] = DEFAULT_LAMBDAS,
    train_cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    enc_cfg: EncoderConfig = EncoderConfig(),
    loss_cfg: LossConfig = LossConfig(),
    train_fn: TrainFn = train,
) -> AblationReport:
    if any(v < 0 for v in values):
        raise ValueError("lambda values must be non-negative")
    val_items = catalog.split("val") or catalog.split("train")
    dice, histories = [], []
    for v in values:
        model = VLWSModel(model_cfg, enc_cfg)
        result = train_fn(model, catalog, train_cfg, replace(loss_cfg, lambda_vl=float(v)), val_items=val_items)
        report = evaluate_items(result.model, val_items, "file", train_cfg.batch_size)
        dice.append(per_class_dice(report.pooled))
        histories.append(result.history)
    return AblationReport([float(v) for v in values], dice, histories)


# --- field-map stitching --------------------------------------------------------


@dataclass(frozen=True)
class StitchLayout:
    height: int
    width: int
    blend: str = "mean_prob"  # mean_prob | majority

    def __post_init__(self):
        if self.blend not in ("mean_prob", "majority"):
            raise ValueError(f"unknown blend mode {self.blend!r}")


@dataclass
class StitchResult:
    class_map: np.ndarray  # (H, W) indices
    probs: np.ndarray  # (C, H, W): mean probabilities, or vote shares in majority mode
    rendered: np.ndarray  # (H, W, 3) palette image
    area_fractions: dict[str, float]


def stitch_map(tiles: Sequence[tuple[tuple[int, int], np.ndarray]], layout: StitchLayout) -> StitchResult:
    """Merge per-tile class probabilities into a scene map.

    Tiles are summed in row-major origin order into float64 per-pixel sums with a coverage
    count, so the result does not depend on the order tiles are passed in.
    """
    if not tiles:
        raise ValueError("no tiles to stitch")
    c = np.asarray(tiles[0][1]).shape[0]
    acc = np.zeros((c, layout.height, layout.width), dtype=np.float64)
    count = np.zeros((layout.height, layout.width), dtype=np.int64)
    for (r, col), p in sorted(tiles, key=lambda t: tuple(t[0])):
        p = np.asarray(p, dtype=np.float64)
        if p.shape[0] != c:
            raise ValueError("tiles disagree on class count")
        h, w = p.shape[1:]
        if r < 0 or col < 0 or r + h > layout.height or col + w > layout.width:
            raise ValueError(f"tile at {(r, col)} exceeds the scene extent")
        if layout.blend == "mean_prob":
            acc[:, r : r + h, col : col + w] += p
        else:
            acc[:, r : r + h, col : col + w] += np.arange(c)[:, None, None] == p.argmax(0)[None]
        count[r : r + h, col : col + w] += 1
    gaps = np.argwhere(count == 0)
    if len(gaps):
        r, col = gaps[0]
        raise ValueError(f"coverage gap at ({r},{col})")
    probs = acc / count
    # argmax takes the lowest class index on ties
    class_map = probs.argmax(0).astype(np.uint8)
    fractions = np.bincount(class_map.ravel(), minlength=c) / class_map.size
    return StitchResult(
        class_map, probs, encode_mask(class_map), {PALETTE.names[i]: float(fractions[i]) for i in range(c)}
    )


def render_overlay(image: np.ndarray, class_map: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Tint crop green and weed red over the image; background pixels are left untouched."""
    image, class_map = np.asarray(image), np.asarray(class_map)
    if image.shape[:2] != class_map.shape:
        raise ValueError(f"extent mismatch: image {image.shape[:2]} vs map {class_map.shape}")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    colors = PALETTE.colors_array().astype(np.float64)[class_map]
    out = image.astype(np.float64)
    fg = class_map != 0
    out[fg] = (1 - alpha) * out[fg] + alpha * colors[fg]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def scene_caption(image: np.ndarray, dataset_id: str, mode: str) -> str:
    if mode == "template":
        return synthesize_caption(excess_green_mask(image), dataset_id)
    if mode == "fixed":
        return neutral_caption(dataset_id)
    raise ValueError(f"scene captions support template|fixed, got {mode!r}")


def predict_scene(
    model: VLWSModel,
    image: np.ndarray,
    tiling: TilingConfig = TilingConfig(discard_threshold=1.0),
    blend: str = "mean_prob",
    caption_mode: str = "template",
    dataset_id: str = "UAV Soybean",
    batch_size: int = 4,
) -> StitchResult:
    """Tile a scene, segment every tile with its own caption and stitch the result."""
    if tiling.tile_size % 8:
        raise ValueError("tile size must be a multiple of 8")
    tiles = tile_scene(image, None, tiling)
    dtype = next(model.parameters()).dtype
    preds = []
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        x = images_to_tensor([t.image for t in chunk], dtype)
        caps = [scene_caption(t.image, dataset_id, caption_mode) for t in chunk]
        probs = predict_probs(model, x, caps).to(torch.float64).numpy()
        preds += [(t.origin, p) for t, p in zip(chunk, probs)]
    return stitch_map(preds, StitchLayout(image.shape[0], image.shape[1], blend))


# --- embedding similarity -----------------------------------------------------


@dataclass
class SimilarityResult:
    dataset_ids: list[str]
    labels: list[str]  # dataset id per matrix row
    sample_ids: list[str]
    matrix: np.ndarray  # per-tile cosine similarities
    block_means: np.ndarray  # (K, K) dataset-block means

    def block_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow([""] + self.dataset_ids)
        for ds, row in zip(self.dataset_ids, self.block_means):
            w.writerow([ds] + [f"{v:.4f}" for v in row])
        return buf.getvalue()


def sample_per_dataset(catalog: Catalog, budget: int, seed: int) -> dict[str, list[CatalogItem]]:
    out = {}
    for ds in catalog.dataset_ids:
        items = [it for it in catalog.items if it.dataset_id == ds]
        order = seeded_permutation(len(items), seed)
        out[ds] = [items[i] for i in sorted(order[:budget])]
    return out


def cosine_matrix(emb: np.ndarray) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("degenerate embedding")
    unit = emb / norms
    m = unit @ unit.T
    m = np.clip((m + m.T) / 2, -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    return m


def block_means(matrix: np.ndarray, labels: Sequence[str], dataset_ids: Sequence[str]) -> np.ndarray:
    labels = np.asarray(labels)
    k = len(dataset_ids)
    out = np.zeros((k, k))
    for a, da in enumerate(dataset_ids):
        for b, db in enumerate(dataset_ids):
            out[a, b] = matrix[np.ix_(labels == da, labels == db)].mean()
    return out


class BaselineVisualEncoder(torch.nn.Module):
    """Classification-pretrained dilated ResNet with global average pooling."""

    def __init__(self, model_cfg: ModelConfig = ModelConfig(), pretrained: bool = True):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(model_cfg.seed)
            self.backbone = DilatedResNet(model_cfg)
        if pretrained:
            init = model_cfg.backbone_init if model_cfg.backbone_init not in ("auto", "random") else "imagenet"
            self.backbone.load_imagenet(init)
        self.eval()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)[1].mean(dim=(2, 3))


def embedding_similarity_matrix(
    catalog: Catalog,
    backend: str = "vl",
    enc_cfg: EncoderConfig = EncoderConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    budget: int = 50,
    seed: int = 0,
    pretrained_baseline: Optional[bool] = None,
    embed_fn: Optional[Callable[[list[SampleRecord]], np.ndarray]] = None,
) -> SimilarityResult:
    """Cosine similarities between tile embeddings, per tile and as dataset-block means."""
    if len(catalog.dataset_ids) < 2:
        raise ValueError("need at least two datasets")
    if embed_fn is None:
        if backend == "vl":
            encoder = VLEncoder(enc_cfg).eval()

            @torch.no_grad()
            def embed_fn(recs):
                return encoder.encode_image_global(images_to_tensor([r.image for r in recs])).double().numpy()

        elif backend == "baseline-visual":
            if pretrained_baseline is None:
                pretrained_baseline = enc_cfg.backend == "pretrained"
            net = BaselineVisualEncoder(model_cfg, pretrained_baseline)

            def embed_fn(recs):
                return net(images_to_tensor([r.image for r in recs])).double().numpy()

        else:
            raise ValueError(f"unknown backend {backend!r}")
    picked = sample_per_dataset(catalog, budget, seed)
    labels, ids, embs = [], [], []
    for ds, items in picked.items():
        for it in items:
            rec = it.load()
            labels.append(ds)
            ids.append(it.sample_id)
            embs.append(embed_fn([rec])[0])
    matrix = cosine_matrix(np.stack(embs))
    dataset_ids = list(picked)
    return SimilarityResult(dataset_ids, labels, ids, matrix, block_means(matrix, labels, dataset_ids))

