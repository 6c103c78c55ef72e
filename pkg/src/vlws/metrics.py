"""Globally accumulated per-class Dice and Dice/IoU conversion."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from vlws.core import PALETTE

# report column order: weed, crop, background, then the class mean
REPORT_CLASSES = (2, 1, 0)
REPORT_HEADER = ("Weed", "Crop", "Bg", "Avg")


@dataclass(frozen=True)
class DiceAccumulator:
    intersection: tuple[int, ...] = (0, 0, 0)
    pred: tuple[int, ...] = (0, 0, 0)
    gt: tuple[int, ...] = (0, 0, 0)

    @classmethod
    def zeros(cls, num_classes: int = 3) -> "DiceAccumulator":
        z = (0,) * num_classes
        return cls(z, z, z)

    @property
    def num_classes(self) -> int:
        return len(self.intersection)

    def __add__(self, other: "DiceAccumulator") -> "DiceAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("accumulators track different class counts")
        add = lambda a, b: tuple(x + y for x, y in zip(a, b))  # noqa: E731
        return DiceAccumulator(add(self.intersection, other.intersection), add(self.pred, other.pred), add(self.gt, other.gt))

    merge = __add__


def accumulate(acc: DiceAccumulator, pred: np.ndarray, gt: np.ndarray) -> DiceAccumulator:
    """Return ``acc`` plus the per-class counts of one prediction/label pair."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    c = acc.num_classes
    pred, gt = pred.ravel().astype(np.int64), gt.ravel().astype(np.int64)
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= c):
        raise ValueError("class index out of range")
    p = np.bincount(pred, minlength=c)
    g = np.bincount(gt, minlength=c)
    i = np.bincount(pred[pred == gt], minlength=c)
    return acc + DiceAccumulator(tuple(int(x) for x in i), tuple(int(x) for x in p), tuple(int(x) for x in g))


def dice_of(acc: DiceAccumulator, c: int) -> float:
    denom = acc.pred[c] + acc.gt[c]
    if denom == 0:
        return 1.0  # class absent from both prediction and labels
    return 2 * acc.intersection[c] / denom


def per_class_dice(acc: DiceAccumulator) -> list[float]:
    return [dice_of(acc, c) for c in range(acc.num_classes)]


def mean_dice(acc: DiceAccumulator | Sequence[float]) -> float:
    scores = per_class_dice(acc) if isinstance(acc, DiceAccumulator) else list(acc)
    return sum(scores) / len(scores)


def dice_to_iou(d: float) -> float:
    if not 0 <= d <= 1:
        raise ValueError("dice must lie in [0, 1]")
    return d / (2 - d)


def iou_to_dice(i: float) -> float:
    return 2 * i / (1 + i)


# --- reports ------------------------------------------------------------------


def report_row(acc: DiceAccumulator) -> list[float]:
    """Dice % in (Weed, Crop, Bg, Avg) order."""
    scores = per_class_dice(acc)
    return [100 * scores[c] for c in REPORT_CLASSES] + [100 * mean_dice(scores)]


def overall_table(rows: Mapping[str, DiceAccumulator]) -> str:
    """Tab-delimited method x (Weed, Crop, Bg, Avg) Dice % table."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(("Method",) + REPORT_HEADER)
    for name, acc in rows.items():
        w.writerow([name] + [f"{v:.2f}" for v in report_row(acc)])
    return buf.getvalue()


def dataset_table(rows: Mapping[str, Mapping[str, DiceAccumulator]]) -> str:
    """Tab-delimited method x dataset x (Weed, Crop, Bg) Dice % table."""
    datasets = list(dict.fromkeys(ds for per in rows.values() for ds in per))
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["Method"] + [f"{ds}/{h}" for ds in datasets for h in REPORT_HEADER[:3]])
    for name, per in rows.items():
        cells = []
        for ds in datasets:
            cells += [f"{v:.2f}" for v in report_row(per[ds])[:3]] if ds in per else ["", "", ""]
        w.writerow([name] + cells)
    return buf.getvalue()


def accumulator_json(acc: DiceAccumulator) -> dict:
    scores = per_class_dice(acc)
    return {
        "dice": {PALETTE.names[c]: scores[c] for c in range(acc.num_classes)},
        "mean_dice": mean_dice(scores),
        "iou": {PALETTE.names[c]: dice_to_iou(scores[c]) for c in range(acc.num_classes)},
        "counts": {"intersection": list(acc.intersection), "pred": list(acc.pred), "gt": list(acc.gt)},
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
