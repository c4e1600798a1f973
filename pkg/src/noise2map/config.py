"""Experiment configuration files (YAML or JSON).

Example::

    task: ss
    seed: 0
    out: runs/ss
    model: {preset: desk}
    schedule: {kind: linear_beta, base_steps: 1000, T: 1000}
    train: {epochs: 200, batch_size: 8, lr: 1.0e-4, grad_accum: 2}
    loss: {class_weights: [1, 3], lambda_cd: 1.0, lambda_ss: 1.0}
    data: {root: data/synth_ss}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .exceptions import ConfigError, Noise2MapError
from .model import UNetConfig
from .objectives import ClassWeights, MultiTaskWeights
from .schedule import ScheduleConfig
from .training import TrainConfig

_MODEL_KEYS = {f.name for f in dataclasses.fields(UNetConfig)} - {"tasks"} | {"preset"}
_SCHEDULE_KEYS = {"kind", "base_steps", "T", "beta_min", "beta_max", "s", "terminal"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_LOSS_KEYS = {"class_weights", "ss_class_weights", "cd_class_weights", "lambda_cd", "lambda_ss"}
_DATA_KEYS = {"root", "ss_root", "cd_root", "pretrain_root", "train_split", "val_split", "test_split"}
_TOP_KEYS = {"task", "seed", "out", "model", "schedule", "train", "pretrain", "loss", "data"}
_SECTIONS = {"model": _MODEL_KEYS, "schedule": _SCHEDULE_KEYS, "train": _TRAIN_KEYS, "pretrain": _TRAIN_KEYS,
             "loss": _LOSS_KEYS, "data": _DATA_KEYS}


@dataclass
class ExperimentConfig:
    task: str = "ss"
    seed: int = 0
    out: str = "runs"
    model: Dict[str, Any] = field(default_factory=lambda: {"preset": "desk"})
    schedule: Dict[str, Any] = field(default_factory=lambda: {"kind": "linear_beta", "base_steps": 1000, "T": 1000})
    train: Dict[str, Any] = field(default_factory=dict)
    pretrain: Dict[str, Any] = field(default_factory=dict)
    loss: Dict[str, Any] = field(default_factory=dict)
    data: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = sorted(set(d) - _TOP_KEYS)
        for section, keys in _SECTIONS.items():
            sub = d.get(section)
            if sub is None:
                continue
            if not isinstance(sub, dict):
                unknown.append(f"{section} (expected a mapping)")
                continue
            unknown += sorted(f"{section}.{k}" for k in set(sub) - keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        base = cls()
        merged = {f.name: d.get(f.name, getattr(base, f.name)) for f in dataclasses.fields(cls)}
        if "schedule" in d:
            merged["schedule"] = {**base.schedule, **d["schedule"]}
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        return cls.from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def validate(self):
        if self.task not in ("ss", "cd", "mt"):
            raise ConfigError(f"task must be ss, cd or mt, got {self.task!r}")
        problems: List[str] = []
        for name, build in (("model", lambda: self.unet_config()), ("schedule", lambda: self.schedule_config("ss")),
                            ("train", self.train_config), ("pretrain", self.pretrain_config),
                            ("loss", self.multitask_weights)):
            try:
                build()
            except (Noise2MapError, TypeError, ValueError) as exc:
                problems.append(f"{name}: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))

    def tasks(self):
        return ("cd", "ss") if self.task == "mt" else (self.task,)

    def unet_config(self, tasks=None, extra_tasks=()) -> UNetConfig:
        m = dict(self.model)
        preset = m.pop("preset", "desk")
        if preset not in ("desk", "reference"):
            raise ConfigError(f"model.preset must be desk or reference, got {preset!r}")
        if "stage_channels" in m:
            m["stage_channels"] = tuple(m["stage_channels"])
        tasks = tuple(tasks or self.tasks()) + tuple(extra_tasks)
        factory = UNetConfig.desk if preset == "desk" else UNetConfig.reference
        return factory(tasks=tasks, **m)

    def schedule_config(self, task: str) -> ScheduleConfig:
        return ScheduleConfig.from_dict({**self.schedule, "task": task})

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.seed if seed is None else seed})

    def pretrain_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig.pretraining(**{**self.pretrain, "seed": self.seed if seed is None else seed})

    def class_weights(self, task: str, k: int) -> ClassWeights:
        values = self.loss.get(f"{task}_class_weights", self.loss.get("class_weights"))
        return ClassWeights.uniform(k) if values is None else ClassWeights(tuple(values))

    def multitask_weights(self) -> MultiTaskWeights:
        return MultiTaskWeights(float(self.loss.get("lambda_cd", 1.0)), float(self.loss.get("lambda_ss", 1.0)))

    def data_root(self, task: str) -> Path:
        key = f"{task}_root"
        root = self.data.get(key) or self.data.get("root")
        if root is None:
            raise ConfigError(f"config needs data.root or data.{key}")
        return Path(root)

    def split(self, which: str) -> str:
        return self.data.get(f"{which}_split", which)
