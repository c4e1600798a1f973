"""Confusion-matrix metrics, JSON reports and cross-dataset rank aggregation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy.stats import rankdata

from .exceptions import DataError, LabelError, ShapeError


@dataclass
class ConfusionMatrix:
    """``counts[g, p]``: pixels with ground truth ``g`` predicted as ``p``."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        """Return a new matrix with ``pred``/``gt`` pixels tallied in."""
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        k = self.num_classes
        for name, a in (("prediction", pred), ("ground truth", gt)):
            if a.size and (a.min() < 0 or a.max() >= k):
                bad = a[(a < 0) | (a >= k)][0]
                raise LabelError(f"{name} contains class {bad} outside [0, {k})")
        tally = np.bincount(gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel(), minlength=k * k)
        return ConfusionMatrix(self.counts + tally.reshape(k, k))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def _ratio(a, b):
    return float(a) / float(b) if b else 0.0


def metrics(cm: ConfusionMatrix, class_index: int) -> Dict[str, float]:
    """Precision, recall, F1 and IoU of one class; any 0/0 is reported as 0."""
    c = cm.counts
    tp = c[class_index, class_index]
    fp = c[:, class_index].sum() - tp
    fn = c[class_index, :].sum() - tp
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return {
        "precision": p,
        "recall": r,
        "f1": _ratio(2 * p * r, p + r),
        "iou": _ratio(tp, tp + fp + fn),
    }


def summarize(cm: ConfusionMatrix) -> Dict[str, object]:
    """Per-class metrics plus headline F1/IoU.

    Binary problems report the foreground class (1); otherwise macro means.
    """
    per_class = {str(c): metrics(cm, c) for c in range(cm.num_classes)}
    if cm.num_classes == 2:
        head_f1, head_iou = per_class["1"]["f1"], per_class["1"]["iou"]
    else:
        head_f1 = float(np.mean([m["f1"] for m in per_class.values()]))
        head_iou = float(np.mean([m["iou"] for m in per_class.values()]))
    return {"per_class": per_class, "mean_f1": head_f1, "mean_iou": head_iou}


def write_report(cm: ConfusionMatrix, out_path, *, task: str, dataset: str, param_count: int,
                 schedule: dict, seed: int) -> Path:
    summary = summarize(cm)
    report = {
        "task": task,
        "dataset": dataset,
        "per_class": summary["per_class"],
        "mean_f1": summary["mean_f1"],
        "mean_iou": summary["mean_iou"],
        "param_count": int(param_count),
        "schedule": schedule,
        "seed": int(seed),
    }
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    return out


@dataclass
class RankTable:
    models: List[str]
    datasets: List[str]
    f1: np.ndarray
    iou: np.ndarray

    def __post_init__(self):
        self.f1 = np.asarray(self.f1, dtype=np.float64)
        self.iou = np.asarray(self.iou, dtype=np.float64)
        dupes = sorted({m for m in self.models if self.models.count(m) > 1})
        if dupes:
            raise DataError(f"duplicate model names: {', '.join(dupes)}")
        shape = (len(self.models), len(self.datasets))
        if self.f1.shape != shape or self.iou.shape != shape:
            raise ShapeError(f"score tables must be {shape}")
        if np.isnan(self.f1).any() or np.isnan(self.iou).any():
            raise DataError("rank table has missing cells")

    @classmethod
    def from_csv(cls, path) -> "RankTable":
        """Read ``model,dataset,f1,iou`` rows (header required)."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        models = list(dict.fromkeys(r["model"] for r in rows))
        datasets = list(dict.fromkeys(r["dataset"] for r in rows))
        f1 = np.full((len(models), len(datasets)), np.nan)
        iou = np.full_like(f1, np.nan)
        seen = set()
        for r in rows:
            key = (r["model"], r["dataset"])
            if key in seen:
                raise DataError(f"duplicate row for model {key[0]} on dataset {key[1]}")
            seen.add(key)
            i, j = models.index(key[0]), datasets.index(key[1])
            f1[i, j], iou[i, j] = float(r["f1"]), float(r["iou"])
        return cls(models, datasets, f1, iou)


@dataclass
class RankEntry:
    model: str
    ordinal: int
    average_rank: float
    mean_iou: float
    per_dataset_rank: List[int]


def rank_aggregate(table: RankTable) -> List[RankEntry]:
    """Order models by average per-dataset F1 rank, ties broken by mean IoU.

    Per-dataset ranks use competition ranking (tied models share the better
    rank); the result carries ordinals ``1..M`` with 1 the best.
    """
    per_dataset = np.column_stack(
        [rankdata(-table.f1[:, j], method="min") for j in range(len(table.datasets))]
    ).astype(int)
    avg = per_dataset.mean(axis=1)
    mean_iou = table.iou.mean(axis=1)
    order = sorted(range(len(table.models)), key=lambda i: (avg[i], -mean_iou[i]))
    return [
        RankEntry(table.models[i], pos + 1, float(avg[i]), float(mean_iou[i]), per_dataset[i].tolist())
        for pos, i in enumerate(order)
    ]


def ranking_dict(entries: List[RankEntry]) -> Dict[str, int]:
    return {e.model: e.ordinal for e in entries}
