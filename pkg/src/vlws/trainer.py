"""Optimization loop, evaluation and run configuration."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import typing
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from vlws.core import PALETTE, WEED, read_manifest
from vlws.ingest import (
    Catalog,
    CatalogItem,
    build_catalog,
    class_pixel_counts,
    excess_green_mask,
    inverse_frequency_weights,
    neutral_caption,
    synthesize_caption,
)
from vlws.losses import LossConfig, total_loss
from vlws.metrics import (
    DiceAccumulator,
    accumulate,
    accumulator_json,
    dataset_table,
    dice_of,
    mean_dice,
    overall_table,
    per_class_dice,
)
from vlws.model import ModelConfig, VLWSModel, load_checkpoint, save_checkpoint
from vlws.vlencoder import EncoderConfig

log = logging.getLogger(__name__)

EVAL_CAPTION_MODES = ("file", "template", "fixed")


@dataclass(frozen=True)
class TrainConfig:
    lr_visual: float = 3e-5
    lr_text: float = 3e-6
    lr_min: float = 1e-7
    epochs: int = 200
    batch_size: int = 8
    patience: int = 30
    weight_decay: float = 1e-2
    seed: int = 0
    stop_metric: str = "mean_dice"  # mean_dice | weed_dice
    max_steps: Optional[int] = None
    dtype: str = "float32"  # float32 | float64
    augment: bool = False
    eval_caption: str = "file"

    def __post_init__(self):
        if not self.lr_min < self.lr_text <= self.lr_visual:
            raise ValueError("learning rates must satisfy lr_min < lr_text <= lr_visual")
        if not self.patience < self.epochs:
            raise ValueError("patience must be smaller than epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.stop_metric not in ("mean_dice", "weed_dice"):
            raise ValueError(f"unknown stop metric {self.stop_metric!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.eval_caption not in EVAL_CAPTION_MODES:
            raise ValueError(f"eval_caption must be one of {EVAL_CAPTION_MODES}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def lr_at(epoch: int, lr_max: float, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate from ``lr_max`` at epoch 0 to ``lr_min`` at ``epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (lr_max - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


def make_batches(items: Sequence[CatalogItem], batch_size: int, seed: int, epoch: int) -> Iterator[list[CatalogItem]]:
    """One seeded shuffle of the pooled items per (seed, epoch), chunked; the last batch may be short."""
    if not items:
        raise ValueError("cannot batch an empty catalog")
    order = np.random.Generator(np.random.PCG64([seed, epoch])).permutation(len(items))
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start : start + batch_size]]


# --- tensors ------------------------------------------------------------------


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype).contiguous()


def masks_to_onehot(masks: Sequence[np.ndarray], num_classes: int, dtype=torch.float32) -> torch.Tensor:
    m = torch.from_numpy(np.stack([np.asarray(x, dtype=np.int64) for x in masks]))
    return F.one_hot(m, num_classes).permute(0, 3, 1, 2).to(dtype)


def _augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    k = int(rng.integers(4))
    return np.rot90(image, k).copy(), np.rot90(mask, k).copy()


def eval_caption_for(record, mode: str) -> str:
    if mode == "file":
        return record.caption
    if mode == "template":
        return synthesize_caption(excess_green_mask(record.image), record.dataset_id)
    if mode == "fixed":
        return neutral_caption(record.dataset_id)
    raise ValueError(f"unknown caption mode {mode!r}")


# --- evaluation ---------------------------------------------------------------


@dataclass
class EvalReport:
    per_dataset: dict[str, DiceAccumulator]
    pooled: DiceAccumulator

    def metric(self, name: str = "mean_dice") -> float:
        return mean_dice(self.pooled) if name == "mean_dice" else dice_of(self.pooled, WEED)

    def to_json(self) -> dict:
        return {
            "pooled": accumulator_json(self.pooled),
            "per_dataset": {ds: accumulator_json(acc) for ds, acc in self.per_dataset.items()},
        }

    def overall_table(self, method: str = "VL-WS") -> str:
        return overall_table({method: self.pooled})

    def dataset_table(self, method: str = "VL-WS") -> str:
        return dataset_table({method: self.per_dataset})


@torch.no_grad()
def predict_probs(model: VLWSModel, images: torch.Tensor, captions: Sequence[str]) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        return torch.softmax(model(images, captions).logits, dim=1)
    finally:
        model.train(was_training)


def evaluate_items(
    model: VLWSModel, items: Sequence[CatalogItem], caption_mode: str = "file", batch_size: int = 8
) -> EvalReport:
    if not items:
        raise ValueError("evaluation split is empty")
    dtype = next(model.parameters()).dtype
    per: dict[str, DiceAccumulator] = {}
    nc = model.cfg.num_classes
    for start in range(0, len(items), batch_size):
        recs = [it.load() for it in items[start : start + batch_size]]
        x = images_to_tensor([r.image for r in recs], dtype)
        probs = predict_probs(model, x, [eval_caption_for(r, caption_mode) for r in recs])
        preds = probs.argmax(dim=1).numpy()
        for r, pred in zip(recs, preds):
            per[r.dataset_id] = accumulate(per.get(r.dataset_id, DiceAccumulator.zeros(nc)), pred, r.mask)
    pooled = DiceAccumulator.zeros(nc)
    for acc in per.values():
        pooled = pooled + acc
    return EvalReport(per, pooled)


def evaluate(checkpoint: str | Path | VLWSModel, catalog: Catalog, split: str = "val", caption_mode: str = "file", **encoder_overrides) -> EvalReport:
    model = checkpoint if isinstance(checkpoint, VLWSModel) else load_checkpoint(checkpoint, encoder_overrides or None)[0]
    return evaluate_items(model, catalog.split(split), caption_mode)


# --- training -----------------------------------------------------------------


class NonFiniteLoss(RuntimeError):
    def __init__(self, snapshot: dict):
        super().__init__(f"non-finite loss: {json.dumps(snapshot, default=str)}")
        self.snapshot = snapshot


@dataclass
class TrainResult:
    model: VLWSModel
    best_epoch: int
    best_metric: float
    history: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    stopped_epoch: int = 0
    steps: int = 0


def data_fingerprint(items: Sequence[CatalogItem]) -> str:
    h = hashlib.sha256()
    for key in sorted(f"{it.dataset_id}\x1f{it.sample_id}" for it in items):
        h.update(key.encode("utf-8") + b"\n")
    return h.hexdigest()


@contextmanager
def deterministic_torch():
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


ValidateFn = Callable[[VLWSModel, int], EvalReport]


def train(
    model: VLWSModel,
    catalog: Catalog,
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    val_items: Optional[Sequence[CatalogItem]] = None,
    out_dir: Optional[str | Path] = None,
    validate_fn: Optional[ValidateFn] = None,
) -> TrainResult:
    """Train with per-group cosine schedules and early stopping; returns the best-epoch model.

    Validation runs after every epoch on ``val_items`` (default: the catalog's val split,
    falling back to the training items when no val split exists).
    """
    train_items = catalog.split("train")
    if not train_items:
        raise ValueError("catalog has no training samples")
    if val_items is None:
        val_items = catalog.split("val") or train_items
    nc = model.cfg.num_classes
    dtype = cfg.torch_dtype
    model.to(dtype)
    weights = loss_cfg.class_weights
    if weights is None:
        weights = tuple(inverse_frequency_weights(class_pixel_counts(train_items, nc)))
    weights_t = torch.tensor(weights, dtype=dtype)

    visual, text = model.parameter_groups()
    groups = [{"params": visual, "lr": cfg.lr_visual, "lr_max": cfg.lr_visual, "name": "visual"}]
    if text:
        groups.append({"params": text, "lr": cfg.lr_text, "lr_max": cfg.lr_text, "name": "text"})
    optimizer = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)

    if validate_fn is None:
        validate_fn = lambda m, epoch: evaluate_items(m, val_items, "file", cfg.batch_size)  # noqa: E731

    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "history.jsonl", "a", encoding="utf-8")

    history: list[dict] = []

    def record(entry: dict):
        history.append(entry)
        if log_fh:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()

    torch.manual_seed(cfg.seed)
    aug_rng = np.random.Generator(np.random.PCG64([cfg.seed, 0xA06]))
    best_metric, best_epoch, best_state = -math.inf, -1, None
    step = 0
    epoch = 0
    try:
        with deterministic_torch():
            for epoch in range(cfg.epochs):
                for g in optimizer.param_groups:
                    g["lr"] = lr_at(epoch, g["lr_max"], cfg)
                model.train()
                for batch in make_batches(train_items, cfg.batch_size, cfg.seed, epoch):
                    if cfg.max_steps is not None and step >= cfg.max_steps:
                        break
                    recs = [it.load() for it in batch]
                    pairs = [(r.image, r.mask) for r in recs]
                    if cfg.augment:
                        pairs = [_augment(im, m, aug_rng) for im, m in pairs]
                    x = images_to_tensor([p[0] for p in pairs], dtype)
                    y = masks_to_onehot([p[1] for p in pairs], nc, dtype)
                    output = model(x, [r.caption for r in recs])
                    probs = torch.softmax(output.logits, dim=1)
                    loss, parts = total_loss(probs, y, output.v_hat, output.t_hat, loss_cfg, weights_t)
                    if not math.isfinite(parts["total"]):
                        raise NonFiniteLoss({"epoch": epoch, "step": step, "batch": [it.sample_id for it in batch], **parts})
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    record(
                        {
                            "kind": "step",
                            "epoch": epoch,
                            "step": step,
                            "batch": [it.sample_id for it in batch],
                            **parts,
                            **{f"lr_{g['name']}": g["lr"] for g in optimizer.param_groups},
                        }
                    )
                    step += 1

                report = validate_fn(model, epoch)
                metric = report.metric(cfg.stop_metric)
                improved = metric > best_metric
                if improved:
                    best_metric, best_epoch = metric, epoch
                    best_state = copy.deepcopy(model.state_dict())
                scores = per_class_dice(report.pooled)
                record(
                    {
                        "kind": "epoch",
                        "epoch": epoch,
                        "metric": metric,
                        **{f"dice_{PALETTE.names[c]}": scores[c] for c in range(nc)},
                        "best_epoch": best_epoch,
                    }
                )
                log.info("epoch %d: %s=%.4f (best %.4f @ %d)", epoch, cfg.stop_metric, metric, best_metric, best_epoch)
                if epoch - best_epoch >= cfg.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
    finally:
        if log_fh:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out:
        fingerprint = {"seed": cfg.seed, "data_hash": data_fingerprint(train_items)}
        ckpt = save_checkpoint(
            out / "best.npz", model, fingerprint, {"best_epoch": best_epoch, "best_metric": best_metric, "stop_metric": cfg.stop_metric}
        )
    return TrainResult(model, best_epoch, best_metric, history, ckpt, epoch, step)


# --- run configuration --------------------------------------------------------


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    manifests: list[Path] = field(default_factory=list)
    out_dir: Path = Path("runs/default")

    def catalog(self) -> Catalog:
        if not self.manifests:
            raise ValueError("run config lists no data.manifest entries")
        return build_catalog([read_manifest(p) for p in self.manifests])


_SECTIONS = {"train": TrainConfig, "loss": LossConfig, "model": ModelConfig, "encoder": EncoderConfig}


def _coerce(value: str, annotation) -> object:
    origin = typing.get_origin(annotation)
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    if origin is typing.Union:
        if value.strip().lower() in ("none", "null", ""):
            return None
        return _coerce(value, args[0])
    if origin is tuple:
        elem = args[0] if args else float
        return tuple(_coerce(v.strip(), elem) for v in value.split(",") if v.strip())
    if annotation is bool:
        lowered = value.strip().lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return lowered in ("true", "1", "yes")
    if annotation is int:
        return int(value)
    if annotation is float:
        return float(value)
    return value.strip()


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a ``section.key=value`` run config (sections: train, loss, model, encoder, data).

    ``data.manifest`` may repeat or hold a comma-separated list; ``data.out_dir`` sets the
    output directory. Relative paths resolve against the config file's directory.
    """
    path = Path(path)
    base = path.parent
    values: dict[str, dict[str, object]] = {k: {} for k in _SECTIONS}
    manifests: list[Path] = []
    out_dir = base / "runs" / path.stem
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or "." not in key:
            raise ValueError(f"{path}:{lineno}: expected section.key=value")
        section, name = key.strip().split(".", 1)
        value = value.strip()
        if section == "data":
            if name == "manifest":
                manifests += [base / v.strip() for v in value.split(",") if v.strip()]
            elif name == "out_dir":
                out_dir = base / value
            else:
                raise ValueError(f"{path}:{lineno}: unknown data key {name!r}")
            continue
        if section not in _SECTIONS:
            raise ValueError(f"{path}:{lineno}: unknown section {section!r}")
        cls = _SECTIONS[section]
        hints = typing.get_type_hints(cls)
        if name not in hints:
            raise ValueError(f"{path}:{lineno}: unknown {section} key {name!r}")
        values[section][name] = _coerce(value, hints[name])
    return RunConfig(
        train=TrainConfig(**values["train"]),
        loss=LossConfig(**values["loss"]),
        model=ModelConfig(**values["model"]),
        encoder=EncoderConfig(**values["encoder"]),
        manifests=manifests,
        out_dir=out_dir,
    )


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        for f in dataclasses.fields(getattr(cfg, section)):
            v = getattr(getattr(cfg, section), f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{f.name}={'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    lines += [f"data.manifest={p}" for p in cfg.manifests]
    lines.append(f"data.out_dir={cfg.out_dir}")
    return "\n".join(lines) + "\n"
