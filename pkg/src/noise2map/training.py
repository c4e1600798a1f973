"""Training drivers: denoising pretraining, supervised fine-tuning, multi-task.

Randomness is drawn per epoch from ``(seed, epoch, stream)``: a permutation,
one timestep per sample and one noise seed per sample position. Batch size
and accumulation factor therefore do not change what any sample sees, which
makes ``(B, accum=2)`` and ``(2B, accum=1)`` runs step-for-step comparable
and lets a run resume from any epoch boundary.
"""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .data import DatasetManifest
from .exceptions import ConfigError, DivergenceError, EmptyDatasetError, NumericError
from .model import DenoiserModel, UNetConfig
from .objectives import (
    ClassWeights,
    MultiTaskWeights,
    weighted_cross_entropy_sum,
)
from .schedule import ScheduleConfig, endpoint, forward_sample_batch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_HEADER = "step\tepoch\ttask\tloss\tlr\tt_mean"

_STREAMS = {"ss": 1, "cd": 2, "pretrain": 3}


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    grad_accum: int = 2
    optimizer: str = "adam"
    lr_schedule: str = "constant"
    warmup_fraction: float = 0.05
    weight_decay: float = 0.0
    seed: int = 0
    mixed_precision: bool = False
    t_min: int = 1
    t_max: Optional[int] = None
    diffusion: bool = True

    def __post_init__(self):
        problems = []
        if self.grad_accum < 1:
            problems.append("grad_accum must be >= 1")
        if not self.lr >= 0:
            problems.append("lr must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.optimizer not in ("adam", "adamw"):
            problems.append(f"optimizer must be adam or adamw, got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine_warmup"):
            problems.append(f"lr_schedule must be constant or cosine_warmup, got {self.lr_schedule!r}")
        if not 0 <= self.warmup_fraction < 1:
            problems.append("warmup_fraction must lie in [0, 1)")
        if self.t_min < 1:
            problems.append("t_min must be >= 1")
        if self.t_max is not None and self.t_max < self.t_min:
            problems.append("t_max must be >= t_min")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def pretraining(cls, **overrides):
        """AdamW with cosine decay and warmup, the denoising-pretraining recipe."""
        base = dict(optimizer="adamw", lr_schedule="cosine_warmup", weight_decay=0.01)
        base.update(overrides)
        return cls(**base)

    def timestep_range(self, T: int) -> Tuple[int, int]:
        hi = T if self.t_max is None else self.t_max
        if hi > T:
            raise ConfigError(f"t_max {hi} exceeds T={T}")
        return self.t_min, hi

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    """Resumable training state plus the best weights seen so far."""

    model_state: Dict[str, torch.Tensor]
    unet_config: dict
    optimizer_state: Optional[dict] = None
    epoch: int = 0
    step: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    best_model_state: Optional[Dict[str, torch.Tensor]] = None
    schedules: Dict[str, dict] = field(default_factory=dict)
    train_config: Optional[dict] = None
    history: List[tuple] = field(default_factory=list)
    kind: str = "task"

    @property
    def heads(self):
        return sorted({k.split(".")[1] for k in self.model_state if k.startswith("heads.")})

    def best(self) -> Dict[str, torch.Tensor]:
        return self.best_model_state if self.best_model_state is not None else self.model_state

    def build_model(self, use_best=True) -> DenoiserModel:
        model = DenoiserModel(UNetConfig(**self.unet_config))
        state = self.best() if use_best else self.model_state
        model = model.to(next(iter(state.values())).dtype)
        model.load_state_dict(state)
        return model

    def schedule(self, task: str) -> ScheduleConfig:
        if task not in self.schedules:
            raise ConfigError(f"checkpoint carries no schedule for task {task!r}")
        return ScheduleConfig.from_dict(self.schedules[task])

    def to_payload(self) -> dict:
        def flat(state):
            if state is None:
                return None
            # float arrays stored as 32-bit; a no-op for full-precision training
            return {k: (v.detach().to(torch.float32) if v.is_floating_point() else v.detach()).clone()
                    for k, v in state.items()}

        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "unet_config": self.unet_config,
            "schedules": self.schedules,
            "heads": self.heads,
            "train_config": self.train_config,
            "epoch": self.epoch,
            "step": self.step,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
            "model_state": flat(self.model_state),
            "best_model_state": flat(self.best_model_state),
            "optimizer_state": self.optimizer_state,
            "history": [list(r) for r in self.history],
        }

    def save(self, path) -> Path:
        """Atomic write: serialize to a sibling temp file, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.to_payload(), tmp)
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        version = payload.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint format version {version!r}")
        return cls(
            model_state=payload["model_state"],
            unet_config=payload["unet_config"],
            optimizer_state=payload["optimizer_state"],
            epoch=payload["epoch"],
            step=payload["step"],
            best_val_loss=payload["best_val_loss"],
            best_epoch=payload["best_epoch"],
            best_model_state=payload["best_model_state"],
            schedules=payload["schedules"],
            train_config=payload["train_config"],
            history=[tuple(r) for r in payload["history"]],
            kind=payload["kind"],
        )


@dataclass
class TaskData:
    """In-memory split: clean inputs ``x0``, masks ``y`` and sample ids."""

    x: torch.Tensor
    y: Optional[torch.Tensor]
    ids: List[str]
    task: str

    def __len__(self):
        return self.x.shape[0]


def as_task_data(data, task: str) -> TaskData:
    if isinstance(data, TaskData):
        return data
    if isinstance(data, DatasetManifest):
        if data.task != task:
            raise ConfigError(f"manifest is for task {data.task!r}, expected {task!r}")
        x, y, ids = data.arrays()
        return TaskData(x, y, ids, task)
    if isinstance(data, (tuple, list)) and len(data) == 2:
        x, y = (torch.as_tensor(np.asarray(a)) if not isinstance(a, torch.Tensor) else a for a in data)
        return TaskData(x.float(), y.long(), [str(i) for i in range(len(x))], task)
    raise ConfigError(f"cannot interpret {type(data).__name__} as {task} training data")


def _image_corpus(data, channels: int) -> torch.Tensor:
    """Images for denoising pretraining; pair corpora contribute both views."""
    if isinstance(data, TaskData):
        x = data.x
    elif isinstance(data, DatasetManifest):
        x = data.arrays()[0]
    elif isinstance(data, torch.Tensor):
        x = data
    else:
        x = torch.as_tensor(np.asarray(data))
    if not x.is_floating_point():
        x = x.float()
    if x.dim() == 4 and x.shape[1] == 2 * channels:
        x = torch.cat([x[:, :channels], x[:, channels:]], dim=0)
    return x


class _EpochPlan:
    """Order, timesteps and noise seeds for one pass over one data stream."""

    def __init__(self, n, seed, epoch, stream, t_range):
        rng = np.random.default_rng([int(seed), int(epoch), _STREAMS[stream]])
        self.order = rng.permutation(n)
        self.t = rng.integers(t_range[0], t_range[1] + 1, size=n)
        self.noise_seeds = rng.integers(0, 2**62, size=n)

    def noise(self, positions, shape, dtype):
        out = []
        for p in positions:
            g = torch.Generator().manual_seed(int(self.noise_seeds[p]))
            out.append(torch.randn(shape, generator=g, dtype=torch.float32))
        return torch.stack(out).to(dtype)


def _step_groups(n, batch_size, grad_accum):
    """Positions grouped as optimizer steps -> micro-batches -> positions."""
    batches = [list(range(i, min(i + batch_size, n))) for i in range(0, n, batch_size)]
    return [batches[i:i + grad_accum] for i in range(0, len(batches), grad_accum)]


def make_optimizer(model, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based optimizer step ``step``."""
    if cfg.lr_schedule == "constant" or total_steps <= 0:
        return cfg.lr
    warmup = max(1, math.ceil(cfg.warmup_fraction * total_steps))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def _autocast(cfg):
    return torch.autocast("cpu", dtype=torch.bfloat16, enabled=cfg.mixed_precision)


def noised_inputs(schedule, x0, t, noise, diffusion=True):
    if diffusion:
        return forward_sample_batch(schedule, x0, t, noise)
    return endpoint(schedule, x0)


def supervised_step(model, batch, schedule: ScheduleConfig, weights: ClassWeights, generator: torch.Generator,
                    task: Optional[str] = None, t_range: Optional[Tuple[int, int]] = None, t=None):
    """Loss of one supervised batch with freshly drawn timesteps and noise.

    ``batch`` is a list of :class:`~noise2map.data.Sample` or an ``(x0, y)``
    pair of tensors. Gradients are not cleared or applied here.
    """
    task = task or schedule.task
    if task != schedule.task:
        raise ConfigError(f"schedule is for task {schedule.task!r} but batch is {task!r}")
    if isinstance(batch, (list, tuple)) and batch and hasattr(batch[0], "stacked"):
        if any(s.task != task for s in batch):
            raise ConfigError("batch mixes tasks or does not match the requested head")
        x0 = torch.from_numpy(np.stack([s.stacked() for s in batch]))
        y = torch.from_numpy(np.stack([s.mask for s in batch]).astype(np.int64))
    else:
        x0, y = batch
    lo, hi = t_range or (1, schedule.T)
    if t is None:
        t = torch.randint(lo, hi + 1, (x0.shape[0],), generator=generator)
    else:
        t = torch.as_tensor(t).reshape(-1).expand(x0.shape[0])
    noise = torch.randn(x0.shape, generator=generator, dtype=torch.float32).to(x0.dtype)
    x_t = noised_inputs(schedule, x0, t, noise)
    logits = model(x_t, t, task=task)
    num, den = weighted_cross_entropy_sum(logits, y, weights)
    return num / den


def _supervised_terms(model, data: TaskData, plan, positions, schedule, weights, cfg):
    idx = torch.as_tensor(plan.order[positions])
    x0, y = data.x[idx], data.y[idx]
    t = torch.as_tensor(plan.t[positions])
    if cfg.diffusion:
        noise = plan.noise(positions, x0.shape[1:], x0.dtype)
        x_t = noised_inputs(schedule, x0, t, noise)
    else:
        t = torch.full_like(t, schedule.T)
        x_t = endpoint(schedule, x0)
    with _autocast(cfg):
        logits = model(x_t, t, task=data.task)
    num, _ = weighted_cross_entropy_sum(logits.float() if cfg.mixed_precision else logits, y, weights)
    return num, float(t.double().mean())


def _group_weight_mass(data, plan, group, weights):
    positions = [p for mb in group for p in mb]
    y = data.y[torch.as_tensor(plan.order[positions])]
    return torch.tensor(weights.weights, dtype=torch.float64)[y].sum().item()


@torch.no_grad()
def validation_loss(model, data: TaskData, schedule: ScheduleConfig, weights: ClassWeights, batch_size=16) -> float:
    """Weighted CE at ``t = T`` with zero noise (the inference condition)."""
    was_training = model.training
    model.eval()
    num_total, den_total = 0.0, 0.0
    for i in range(0, len(data), batch_size):
        x0, y = data.x[i:i + batch_size], data.y[i:i + batch_size]
        t = torch.full((x0.shape[0],), schedule.T)
        num, den = weighted_cross_entropy_sum(model(endpoint(schedule, x0), t, task=data.task), y, weights)
        num_total += float(num)
        den_total += float(den)
    model.train(was_training)
    return num_total / den_total


class _LogWriter:
    def __init__(self, path, resume):
        self.fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not (resume and path.exists())
            self.fh = open(path, "w" if fresh else "a")
            if fresh:
                self.fh.write(LOG_HEADER + "\n")

    def write(self, row):
        if self.fh is not None:
            step, epoch, task, loss, lr, t_mean = row
            self.fh.write(f"{step}\t{epoch}\t{task}\t{loss!r}\t{lr!r}\t{t_mean!r}\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def read_log(path) -> List[tuple]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        step, epoch, task, loss, lr, t_mean = line.split("\t")
        rows.append((int(step), int(epoch), task, float(loss), float(lr), float(t_mean)))
    return rows


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _start(model, cfg, resume):
    opt = make_optimizer(model, cfg)
    if resume is None:
        return opt, 0, 0, math.inf, 0, None, []
    if isinstance(resume, (str, Path)):
        resume = Checkpoint.load(resume)
    model.load_state_dict(resume.model_state)
    if resume.optimizer_state is not None:
        opt.load_state_dict(resume.optimizer_state)
    best = {k: v.clone() for k, v in resume.best_model_state.items()} if resume.best_model_state else None
    return opt, resume.epoch, resume.step, resume.best_val_loss, resume.best_epoch, best, list(resume.history)


def _finish(model, ckpt, restore_best):
    if restore_best and ckpt.best_model_state is not None:
        model.load_state_dict(ckpt.best_model_state)
    return ckpt


def _make_checkpoint(model, opt, epoch, step, best_val, best_epoch, best_state, schedules, cfg, history, kind):
    return Checkpoint(
        model_state=_snapshot(model),
        unet_config=model.config.to_dict(),
        optimizer_state=copy.deepcopy(opt.state_dict()),
        epoch=epoch, step=step, best_val_loss=best_val, best_epoch=best_epoch,
        best_model_state=best_state, schedules=schedules, train_config=cfg.to_dict(),
        history=list(history), kind=kind,
    )


def _save(ckpt, out_dir, name):
    if out_dir is not None:
        ckpt.save(Path(out_dir) / name)


def train_task(model: DenoiserModel, train, val=None, task: str = "ss", schedule: Optional[ScheduleConfig] = None,
               cfg: Optional[TrainConfig] = None, class_weights: Optional[ClassWeights] = None,
               out_dir=None, log_path=None, resume=None, restore_best=True) -> Checkpoint:
    """Supervised single-task training with gradient accumulation.

    One optimizer update per ``grad_accum`` micro-batches; the loss of an
    update is the weighted CE over all pixels of its micro-batches. After
    each epoch the validation loss at ``t = T`` picks the best weights, which
    are loaded back into ``model`` at the end when ``restore_best`` is set.
    The returned checkpoint holds the final (resumable) state and the best
    weights in ``best_model_state``.
    """
    cfg = cfg or TrainConfig()
    schedule = schedule or ScheduleConfig.create(task=task)
    if schedule.task != task:
        raise ConfigError(f"schedule task {schedule.task!r} does not match {task!r}")
    if task not in model.heads:
        raise ConfigError(f"model has no head for task {task!r}")
    train = as_task_data(train, task)
    val = as_task_data(val, task) if val is not None else None
    if len(train) == 0:
        raise EmptyDatasetError("training split is empty")
    k = model.config.out_classes
    weights = class_weights or ClassWeights.uniform(k)
    t_range = cfg.timestep_range(schedule.T)
    schedules = {task: schedule.to_dict()}

    opt, start_epoch, step, best_val, best_epoch, best_state, history = _start(model, cfg, resume)
    groups = _step_groups(len(train), cfg.batch_size, cfg.grad_accum)
    total_steps = cfg.epochs * len(groups)
    log = _LogWriter(log_path, resume is not None)
    model.train()
    last_good = _make_checkpoint(model, opt, start_epoch, step, best_val, best_epoch, best_state,
                                 schedules, cfg, history, "task")
    try:
        for epoch in range(start_epoch, cfg.epochs):
            plan = _EpochPlan(len(train), cfg.seed, epoch, task, t_range)
            for group in groups:
                lr = lr_at(step, total_steps, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.zero_grad(set_to_none=True)
                mass = _group_weight_mass(train, plan, group, weights)
                loss_value, t_sum, n_seen = 0.0, 0.0, 0
                for positions in group:
                    num, t_mean = _supervised_terms(model, train, plan, positions, schedule, weights, cfg)
                    loss = num / mass
                    loss.backward()
                    loss_value += float(loss.detach())
                    t_sum += t_mean * len(positions)
                    n_seen += len(positions)
                if not math.isfinite(loss_value):
                    _save(last_good, out_dir, "last.pt")
                    raise DivergenceError(f"non-finite loss at step {step}", checkpoint=last_good)
                opt.step()
                step += 1
                row = (step, epoch + 1, task, loss_value, lr, t_sum / n_seen)
                history.append(row)
                log.write(row)

            if val is not None:
                v = validation_loss(model, val, schedule, weights)
                logger.info("epoch %d val_loss %.5f", epoch + 1, v)
                if v < best_val:
                    best_val, best_epoch, best_state = v, epoch + 1, _snapshot(model)
            last_good = _make_checkpoint(model, opt, epoch + 1, step, best_val, best_epoch, best_state,
                                         schedules, cfg, history, "task")
            if val is not None and best_epoch == epoch + 1:
                _save(last_good, out_dir, "best.pt")
    except NumericError as exc:
        if isinstance(exc, DivergenceError):
            raise
        _save(last_good, out_dir, "last.pt")
        raise DivergenceError(f"{exc} at step {step}", checkpoint=last_good) from exc
    finally:
        log.close()
    _save(last_good, out_dir, "last.pt")
    return _finish(model, last_good, restore_best)


def train_multitask(model: DenoiserModel, cd_train, ss_train, weights: MultiTaskWeights = MultiTaskWeights(),
                    cd_schedule: Optional[ScheduleConfig] = None, ss_schedule: Optional[ScheduleConfig] = None,
                    cfg: Optional[TrainConfig] = None, cd_class_weights=None, ss_class_weights=None,
                    cd_val=None, ss_val=None, out_dir=None, log_path=None, resume=None,
                    restore_best=True) -> Checkpoint:
    """Shared-trunk training on ``lambda_cd * L_cd + lambda_ss * L_ss``.

    Each step pairs one CD group with one SS group; the shorter stream
    wraps around its own permutation. Three log rows are written per step:
    ``cd``, ``ss`` and their combination ``mt``.
    """
    cfg = cfg or TrainConfig()
    cd_schedule = cd_schedule or ScheduleConfig.create(task="cd")
    ss_schedule = ss_schedule or ScheduleConfig.create(task="ss")
    if "cd" not in model.heads or "ss" not in model.heads:
        raise ConfigError("multi-task training needs a model with both cd and ss heads")
    cd = as_task_data(cd_train, "cd")
    ss = as_task_data(ss_train, "ss")
    if len(cd) == 0 or len(ss) == 0:
        raise EmptyDatasetError("multi-task training needs non-empty cd and ss splits")
    cd_val = as_task_data(cd_val, "cd") if cd_val is not None else None
    ss_val = as_task_data(ss_val, "ss") if ss_val is not None else None
    k = model.config.out_classes
    cd_w = cd_class_weights or ClassWeights.uniform(k)
    ss_w = ss_class_weights or ClassWeights.uniform(k)
    schedules = {"cd": cd_schedule.to_dict(), "ss": ss_schedule.to_dict()}

    n = max(len(cd), len(ss))
    groups = _step_groups(n, cfg.batch_size, cfg.grad_accum)
    total_steps = cfg.epochs * len(groups)
    opt, start_epoch, step, best_val, best_epoch, best_state, history = _start(model, cfg, resume)
    log = _LogWriter(log_path, resume is not None)
    model.train()
    last_good = _make_checkpoint(model, opt, start_epoch, step, best_val, best_epoch, best_state,
                                 schedules, cfg, history, "multitask")

    def wrap(data, positions):
        return [p % len(data) for p in positions]

    try:
        for epoch in range(start_epoch, cfg.epochs):
            cd_plan = _EpochPlan(len(cd), cfg.seed, epoch, "cd", cfg.timestep_range(cd_schedule.T))
            ss_plan = _EpochPlan(len(ss), cfg.seed, epoch, "ss", cfg.timestep_range(ss_schedule.T))
            for group in groups:
                lr = lr_at(step, total_steps, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.zero_grad(set_to_none=True)
                cd_group = [wrap(cd, mb) for mb in group]
                ss_group = [wrap(ss, mb) for mb in group]
                cd_mass = _group_weight_mass(cd, cd_plan, cd_group, cd_w)
                ss_mass = _group_weight_mass(ss, ss_plan, ss_group, ss_w)
                l_cd = l_ss = 0.0
                t_cd = t_ss = 0.0
                for cd_pos, ss_pos in zip(cd_group, ss_group):
                    num_cd, tm_cd = _supervised_terms(model, cd, cd_plan, cd_pos, cd_schedule, cd_w, cfg)
                    num_ss, tm_ss = _supervised_terms(model, ss, ss_plan, ss_pos, ss_schedule, ss_w, cfg)
                    part_cd, part_ss = num_cd / cd_mass, num_ss / ss_mass
                    (weights.lambda_cd * part_cd + weights.lambda_ss * part_ss).backward()
                    l_cd += float(part_cd.detach())
                    l_ss += float(part_ss.detach())
                    t_cd += tm_cd * len(cd_pos)
                    t_ss += tm_ss * len(ss_pos)
                l_mt = weights.lambda_cd * l_cd + weights.lambda_ss * l_ss
                if not math.isfinite(l_mt):
                    _save(last_good, out_dir, "last.pt")
                    raise DivergenceError(f"non-finite loss at step {step}", checkpoint=last_good)
                opt.step()
                step += 1
                m = sum(len(p) for p in group)
                for row in ((step, epoch + 1, "cd", l_cd, lr, t_cd / m),
                            (step, epoch + 1, "ss", l_ss, lr, t_ss / m),
                            (step, epoch + 1, "mt", l_mt, lr, (t_cd + t_ss) / (2 * m))):
                    history.append(row)
                    log.write(row)

            if cd_val is not None and ss_val is not None:
                v = (weights.lambda_cd * validation_loss(model, cd_val, cd_schedule, cd_w)
                     + weights.lambda_ss * validation_loss(model, ss_val, ss_schedule, ss_w))
                if v < best_val:
                    best_val, best_epoch, best_state = v, epoch + 1, _snapshot(model)
            last_good = _make_checkpoint(model, opt, epoch + 1, step, best_val, best_epoch, best_state,
                                         schedules, cfg, history, "multitask")
            if best_epoch == epoch + 1:
                _save(last_good, out_dir, "best.pt")
    except NumericError as exc:
        if isinstance(exc, DivergenceError):
            raise
        _save(last_good, out_dir, "last.pt")
        raise DivergenceError(f"{exc} at step {step}", checkpoint=last_good) from exc
    finally:
        log.close()
    _save(last_good, out_dir, "last.pt")
    return _finish(model, last_good, restore_best)


@torch.no_grad()
def denoising_loss(model, images: torch.Tensor, schedule: ScheduleConfig, seed: int = 0, batch_size=16) -> float:
    """MSE of noise prediction on ``images`` with seeded timesteps and noise."""
    was_training = model.training
    model.eval()
    plan = _EpochPlan(len(images), seed, 0, "pretrain", (1, schedule.T))
    total, count = 0.0, 0
    for start in range(0, len(images), batch_size):
        positions = list(range(start, min(start + batch_size, len(images))))
        x0 = images[torch.as_tensor(positions)]
        t = torch.as_tensor(plan.t[positions])
        eps = plan.noise(positions, x0.shape[1:], x0.dtype)
        x_t = _pretrain_corrupt(schedule, x0, t, eps)
        total += float(((model(x_t, t, task="pretrain") - eps) ** 2).sum())
        count += eps.numel()
    model.train(was_training)
    return total / count


def _pretrain_corrupt(schedule, x0, t, eps):
    ab = torch.as_tensor(schedule.base_alpha_bar(t.numpy()), dtype=x0.dtype).reshape(-1, 1, 1, 1)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def pretrain(model: DenoiserModel, corpus, cfg: Optional[TrainConfig] = None,
             schedule: Optional[ScheduleConfig] = None, val=None, out_dir=None, log_path=None,
             resume=None, restore_best=True) -> Checkpoint:
    """Self-supervised denoising on the monotone base curve (epsilon prediction, MSE).

    Masks in the corpus are ignored; pair corpora contribute both images.
    """
    cfg = cfg or TrainConfig.pretraining()
    schedule = schedule or ScheduleConfig.create(task="ss")
    if "pretrain" not in model.heads:
        raise ConfigError("pretraining needs a model built with the 'pretrain' task head")
    images = _image_corpus(corpus, model.config.in_channels)
    if len(images) == 0:
        raise EmptyDatasetError("pretraining corpus is empty")
    if images.shape[1] != model.config.in_channels:
        raise ConfigError(f"corpus has {images.shape[1]} channels, model expects {model.config.in_channels}")
    val_images = _image_corpus(val, model.config.in_channels) if val is not None else None
    t_range = cfg.timestep_range(schedule.T)
    schedules = {"pretrain": schedule.to_dict()}

    opt, start_epoch, step, best_val, best_epoch, best_state, history = _start(model, cfg, resume)
    groups = _step_groups(len(images), cfg.batch_size, cfg.grad_accum)
    total_steps = cfg.epochs * len(groups)
    log = _LogWriter(log_path, resume is not None)
    model.train()
    last_good = _make_checkpoint(model, opt, start_epoch, step, best_val, best_epoch, best_state,
                                 schedules, cfg, history, "pretrain")
    try:
        for epoch in range(start_epoch, cfg.epochs):
            plan = _EpochPlan(len(images), cfg.seed, epoch, "pretrain", t_range)
            for group in groups:
                lr = lr_at(step, total_steps, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.zero_grad(set_to_none=True)
                n_elem = sum(len(mb) for mb in group) * images[0].numel()
                loss_value, t_sum, n_seen = 0.0, 0.0, 0
                for positions in group:
                    x0 = images[torch.as_tensor(plan.order[positions])]
                    t = torch.as_tensor(plan.t[positions])
                    eps = plan.noise(positions, x0.shape[1:], x0.dtype)
                    with _autocast(cfg):
                        pred = model(_pretrain_corrupt(schedule, x0, t, eps), t, task="pretrain")
                    loss = ((pred.float() - eps) ** 2).sum() / n_elem
                    loss.backward()
                    loss_value += float(loss.detach())
                    t_sum += float(t.double().sum())
                    n_seen += len(positions)
                if not math.isfinite(loss_value):
                    _save(last_good, out_dir, "last.pt")
                    raise DivergenceError(f"non-finite loss at step {step}", checkpoint=last_good)
                opt.step()
                step += 1
                row = (step, epoch + 1, "pretrain", loss_value, lr, t_sum / n_seen)
                history.append(row)
                log.write(row)

            if val_images is not None:
                v = denoising_loss(model, val_images, schedule, seed=cfg.seed)
                if v < best_val:
                    best_val, best_epoch, best_state = v, epoch + 1, _snapshot(model)
            last_good = _make_checkpoint(model, opt, epoch + 1, step, best_val, best_epoch, best_state,
                                         schedules, cfg, history, "pretrain")
            if val_images is not None and best_epoch == epoch + 1:
                _save(last_good, out_dir, "best.pt")
    except NumericError as exc:
        if isinstance(exc, DivergenceError):
            raise
        _save(last_good, out_dir, "last.pt")
        raise DivergenceError(f"{exc} at step {step}", checkpoint=last_good) from exc
    finally:
        log.close()
    _save(last_good, out_dir, "last.pt")
    return _finish(model, last_good, restore_best)


def load_pretrained(model: DenoiserModel, source, use_best=True) -> int:
    """Copy name- and shape-matched trunk parameters into ``model``.

    Output heads are never transferred. Returns the number of tensors copied.
    """
    if isinstance(source, (str, Path)):
        source = Checkpoint.load(source)
    if isinstance(source, Checkpoint):
        source = source.best() if use_best else source.model_state
    own = model.state_dict()
    moved = {}
    for name, value in source.items():
        if name.startswith("heads.") or name not in own or own[name].shape != value.shape:
            continue
        moved[name] = value.to(own[name].dtype)
    own.update(moved)
    model.load_state_dict(own)
    logger.info("transferred %d pretrained tensors", len(moved))
    return len(moved)

