"""Single-forward-pass prediction and timestep-sweep interpretability."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .data import Sample, denormalize, write_mask
from .evaluation import ConfusionMatrix, metrics
from .exceptions import ConfigError, TimestepRangeError
from .schedule import ScheduleConfig, clean_path, forward_sample_batch
from .training import TaskData, as_task_data


@dataclass
class SweepReport:
    timesteps: List[int]
    metrics: List[Dict[int, Dict[str, float]]]
    seed: int
    masks: Dict[str, Dict[int, np.ndarray]] = field(default_factory=dict)
    num_classes: int = 2

    def f1(self, class_index=1) -> List[float]:
        return [m[class_index]["f1"] for m in self.metrics]

    def iou(self, class_index=1) -> List[float]:
        return [m[class_index]["iou"] for m in self.metrics]


def _model_input(schedule, x0, t, generator):
    ab = schedule.alpha_bar_eff[t]
    if ab == 1.0:
        # endpoint: the clean path alone, no random draw at all
        return clean_path(schedule, x0, torch.full((x0.shape[0],), t))
    noise = torch.randn(x0.shape, generator=generator, dtype=torch.float32).to(x0.dtype)
    return forward_sample_batch(schedule, x0, torch.full((x0.shape[0],), t), noise)


@torch.no_grad()
def predict_logits(model, x0: torch.Tensor, schedule: ScheduleConfig, t: Optional[int] = None,
                   generator: Optional[torch.Generator] = None, batch_size: int = 16) -> torch.Tensor:
    """Logits ``[N, K, H, W]`` from one forward pass per sample at timestep ``t`` (default ``T``)."""
    task = schedule.task
    if task not in model.heads:
        raise ConfigError(f"model has no head for task {task!r}")
    t = schedule.T if t is None else int(t)
    if not 0 <= t <= schedule.T:
        raise TimestepRangeError(f"timestep {t} outside [0, {schedule.T}]")
    if schedule.alpha_bar_eff[t] != 1.0 and generator is None:
        generator = torch.Generator().manual_seed(0)
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, x0.shape[0], batch_size):
        xb = x0[i:i + batch_size]
        out.append(model(_model_input(schedule, xb, t, generator), torch.full((xb.shape[0],), t), task=task))
    model.train(was_training)
    return torch.cat(out)


def predict(model, sample, schedule: ScheduleConfig, t: Optional[int] = None,
            generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Per-pixel argmax mask ``[H, W]`` for one sample (ties go to the lower class)."""
    if isinstance(sample, Sample):
        if sample.task != schedule.task:
            raise ConfigError(f"sample is {sample.task!r} but schedule is {schedule.task!r}")
        x0 = sample.stacked()
    else:
        x0 = np.asarray(sample)
    logits = predict_logits(model, torch.as_tensor(x0)[None], schedule, t, generator)
    return logits.argmax(dim=1)[0].numpy()


def predict_masks(model, x0: torch.Tensor, schedule: ScheduleConfig, t=None, generator=None) -> np.ndarray:
    return predict_logits(model, x0, schedule, t, generator).argmax(dim=1).numpy()


def evaluate(model, data, schedule: ScheduleConfig, t: Optional[int] = None, seed: int = 0) -> ConfusionMatrix:
    data = as_task_data(data, schedule.task)
    masks = predict_masks(model, data.x, schedule, t, torch.Generator().manual_seed(seed))
    cm = ConfusionMatrix.zeros(model.config.out_classes)
    return cm.accumulate(masks, data.y.numpy())


def timestep_sweep(model, data, schedule: ScheduleConfig, t_list: Sequence[int], seed: int = 0,
                   keep_masks: bool = False, export_dir=None) -> SweepReport:
    """Metrics of single-pass predictions at each timestep in ``t_list``.

    Noise is drawn afresh for every timestep from a generator seeded with
    ``(seed, t)``; endpoint timesteps draw nothing.
    """
    t_list = sorted({int(t) for t in t_list})
    if not t_list:
        raise TimestepRangeError("t_list must not be empty")
    for t in t_list:
        if not 0 <= t <= schedule.T:
            raise TimestepRangeError(f"timestep {t} outside [0, {schedule.T}]")
    data: TaskData = as_task_data(data, schedule.task)
    k = model.config.out_classes
    y = data.y.numpy()
    report = SweepReport(timesteps=t_list, metrics=[], seed=seed, num_classes=k)
    export = Path(export_dir) if export_dir is not None else None
    if export is not None:
        export.mkdir(parents=True, exist_ok=True)
    for t in t_list:
        gen = torch.Generator().manual_seed(int(seed) * 1_000_003 + t)
        masks = predict_masks(model, data.x, schedule, t, gen)
        cm = ConfusionMatrix.zeros(k).accumulate(masks, y)
        report.metrics.append({c: metrics(cm, c) for c in range(k)})
        for sid, m in zip(data.ids, masks):
            if keep_masks:
                report.masks.setdefault(sid, {})[t] = m
            if export is not None:
                write_mask(export / f"{sid}_t{t}.png", m)
    return report


def _mask_rgb(mask, k):
    g = (np.asarray(mask, dtype=np.float64) * (255.0 / max(1, k - 1))).astype(np.uint8)
    return np.stack([g, g, g])


def export_progression(report: SweepReport, samples: Sequence[Sample], out_dir) -> List[Path]:
    """Write one grid PNG per sample and ``f1_vs_timestep.csv``.

    Grid columns: input image(s), predicted mask at each timestep, ground truth.
    """
    if not report.timesteps:
        raise TimestepRangeError("report has no timesteps")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        if s.id not in report.masks:
            raise ConfigError(f"report carries no masks for sample {s.id}; run the sweep with keep_masks=True")
        tiles = [denormalize(im) for im in s.images]
        tiles += [_mask_rgb(report.masks[s.id][t], report.num_classes) for t in report.timesteps]
        tiles.append(_mask_rgb(s.mask, report.num_classes))
        sep = np.full((3, tiles[0].shape[1], 2), 255, dtype=np.uint8)
        row = np.concatenate([x for tile in tiles for x in (tile, sep)][:-1], axis=2)
        path = out / f"{s.id}_grid.png"
        Image.fromarray(row.transpose(1, 2, 0), "RGB").save(path)
        written.append(path)

    csv_path = out / "f1_vs_timestep.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "f1_class1", "iou_class1"])
        for t, m in zip(report.timesteps, report.metrics):
            w.writerow([t, repr(m[1]["f1"]), repr(m[1]["iou"])])
    written.append(csv_path)
    return written
