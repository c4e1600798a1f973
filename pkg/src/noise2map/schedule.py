"""Forward-process mathematics for task-structured noising.

A monotone signal-retention curve (alpha-bar) is defined over ``base_steps``
indices. The effective curve over the ``T`` training timesteps reflects that
index around ``T/2`` so the noise vanishes at both ends of the trajectory:
``t=0`` is the untouched input and ``t=T`` is the task endpoint (the input
itself for segmentation, the channel-swapped pair for change detection).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Union

import numpy as np
import torch

from .exceptions import DataError, ParameterError, ShapeError, TimestepRangeError

CURVE_KINDS = ("linear_beta", "cosine", "quadratic")
TASKS = ("ss", "cd")

# Scheduler names used in the ablation tables, mapped to the forward curve they
# share. DDIM and DDPM only differ in reverse sampling, which is never run here.
SCHEDULER_ALIASES = {"ddpm": "linear_beta", "ddim": "linear_beta", "pndm": "cosine"}

_DEFAULT_PARAMS = {
    "linear_beta": {"beta_min": 1e-4, "beta_max": 0.02},
    "cosine": {"s": 0.008},
    "quadratic": {"terminal": 1e-6},
}

Array = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True, eq=False)
class AlphaBarCurve:
    """Discretized alpha-bar values ``values[0..base_steps]`` with ``values[0] == 1``."""

    kind: str
    base_steps: int
    values: np.ndarray
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.base_steps + 1,):
            raise ParameterError(
                f"curve has {values.shape[0]} values, expected base_steps + 1 = {self.base_steps + 1}"
            )
        if values[0] != 1.0:
            raise ParameterError("alpha_bar[0] must be exactly 1")
        if not np.all((values > 0) & (values <= 1)):
            raise ParameterError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(values) > 0):
            raise ParameterError("alpha_bar must be non-increasing")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "base_steps": self.base_steps, **self.params}


def make_alpha_bar_curve(kind: str, base_steps: int = 1000, **params) -> AlphaBarCurve:
    """Build an alpha-bar curve of the given family.

    ``linear_beta`` takes ``beta_min``/``beta_max`` (DDPM's linear betas),
    ``cosine`` takes the offset ``s`` and ``quadratic`` the ``terminal`` value
    reached at the last index.
    """
    kind = SCHEDULER_ALIASES.get(kind, kind)
    if kind not in CURVE_KINDS:
        raise ParameterError(f"unknown curve kind {kind!r}; expected one of {CURVE_KINDS}")
    if not isinstance(base_steps, (int, np.integer)) or base_steps < 1:
        raise ParameterError(f"base_steps must be a positive integer, got {base_steps!r}")
    base_steps = int(base_steps)
    unknown = set(params) - set(_DEFAULT_PARAMS[kind])
    if unknown:
        raise ParameterError(f"unknown parameters for {kind}: {sorted(unknown)}")
    p = {**_DEFAULT_PARAMS[kind], **{k: float(v) for k, v in params.items()}}

    if kind == "linear_beta":
        lo, hi = p["beta_min"], p["beta_max"]
        if not lo > 0:
            raise ParameterError(f"beta_min must be > 0, got {lo}")
        if not hi < 1:
            raise ParameterError(f"beta_max must be < 1, got {hi}")
        if not lo < hi:
            raise ParameterError(f"beta_min must be < beta_max, got {lo} >= {hi}")
        betas = np.linspace(lo, hi, base_steps, dtype=np.float64)
        values = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        s = p["s"]
        if not s >= 0:
            raise ParameterError(f"cosine offset s must be >= 0, got {s}")
        u = np.arange(base_steps + 1, dtype=np.float64) / base_steps
        f = np.cos((u + s) / (1 + s) * math.pi / 2) ** 2
        values = f / f[0]
    else:
        end = p["terminal"]
        if not 0 < end < 1:
            raise ParameterError(f"quadratic terminal must lie in (0, 1), got {end}")
        values = np.linspace(1.0, math.sqrt(end), base_steps + 1, dtype=np.float64) ** 2
    values[0] = 1.0
    return AlphaBarCurve(kind=kind, base_steps=base_steps, values=values, params=p)


def fold_timestep(t: int, T: int, base_steps: int) -> int:
    """Map training timestep ``t`` in ``[0, T]`` to a base-curve index.

    Indices rise linearly to ``base_steps`` at ``T/2`` and fall back to 0 at
    ``T``. Rounding is half-up and done in integer arithmetic.
    """
    t, T = int(t), int(T)
    if not 0 <= t <= T:
        raise TimestepRangeError(f"timestep {t} outside [0, {T}]")
    f = 2 * t if 2 * t <= T else 2 * (T - t)
    return (2 * base_steps * f + T) // (2 * T)


@dataclass(frozen=True, eq=False)
class ScheduleConfig:
    """Total timesteps, base curve and task. Effective tables are built eagerly."""

    T: int
    curve: AlphaBarCurve
    task: str = "ss"
    folded_index: np.ndarray = field(init=False, repr=False)
    alpha_bar_eff: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ParameterError(f"task must be one of {TASKS}, got {self.task!r}")
        if not isinstance(self.T, (int, np.integer)) or self.T < 2:
            raise ParameterError(f"T must be an integer >= 2, got {self.T!r}")
        idx = np.array([fold_timestep(t, self.T, self.curve.base_steps) for t in range(self.T + 1)])
        ab = self.curve.values[idx]
        idx.setflags(write=False)
        ab.setflags(write=False)
        object.__setattr__(self, "folded_index", idx)
        object.__setattr__(self, "alpha_bar_eff", ab)

    @classmethod
    def create(cls, task="ss", T=1000, kind="linear_beta", base_steps=1000, **params):
        return cls(T=int(T), curve=make_alpha_bar_curve(kind, base_steps, **params), task=task)

    def with_task(self, task: str) -> "ScheduleConfig":
        return ScheduleConfig(T=self.T, curve=self.curve, task=task)

    def base_alpha_bar(self, t):
        """Alpha-bar on the monotone (unfolded) curve, used by denoising pretraining."""
        t = np.asarray(t)
        if np.any((t < 0) | (t > self.T)):
            raise TimestepRangeError(f"timestep outside [0, {self.T}]")
        s = (2 * self.curve.base_steps * t + self.T) // (2 * self.T)
        return self.curve.values[s]

    def to_dict(self) -> Dict[str, Any]:
        return {"T": int(self.T), "task": self.task, **self.curve.to_dict()}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ScheduleConfig":
        d = dict(d)
        return cls.create(
            task=d.pop("task", "ss"), T=d.pop("T", 1000), kind=d.pop("kind", "linear_beta"),
            base_steps=d.pop("base_steps", 1000), **d,
        )


@dataclass
class ForwardSample:
    """A noised input together with the pieces it was assembled from."""

    x_t: np.ndarray
    t: int
    clean_t: np.ndarray
    noise: np.ndarray
    alpha_bar_eff: float


def effective_alpha_bar(cfg: ScheduleConfig, t: int) -> float:
    t = int(t)
    if not 0 <= t <= cfg.T:
        raise TimestepRangeError(f"timestep {t} outside [0, {cfg.T}]")
    return float(cfg.alpha_bar_eff[t])


def swap_pair(x: Array) -> Array:
    """Exchange the first and second halves of the channel axis (axis -3)."""
    c2 = x.shape[-3]
    if c2 % 2:
        raise ShapeError(f"change detection input needs an even channel count, got {c2}")
    c = c2 // 2
    if isinstance(x, torch.Tensor):
        return torch.cat([x[..., c:, :, :], x[..., :c, :, :]], dim=-3)
    return np.concatenate([x[..., c:, :, :], x[..., :c, :, :]], axis=-3)


def _check_t(cfg, t):
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any((arr < 0) | (arr > cfg.T)):
        raise TimestepRangeError(f"timestep outside [0, {cfg.T}]: {arr.min()}..{arr.max()}")


def _per_sample(values, x):
    """Broadcast a scalar or per-batch vector of coefficients against ``x``."""
    if isinstance(x, torch.Tensor):
        v = torch.as_tensor(values, dtype=x.dtype, device=x.device)
        return v.reshape(v.shape + (1,) * (x.dim() - v.dim())) if v.dim() else v
    v = np.asarray(values, dtype=x.dtype)
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim)) if v.ndim else v


def clean_path(cfg: ScheduleConfig, x0: Array, t) -> Array:
    """Noise-free component of the trajectory at timestep ``t``.

    ``x0`` may be a single ``[C, H, W]`` array or a ``[B, C, H, W]`` batch with
    one timestep per sample. For change detection the path is the convex
    interpolation from ``[pre, post]`` towards ``[post, pre]``.
    """
    _check_t(cfg, t)
    if cfg.task == "ss":
        return x0
    swapped = swap_pair(x0)
    t_np = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    # keep (T - t)/T and t/T as separate quotients so that reversing time on
    # the swapped input yields bit-identical products
    keep = _per_sample((cfg.T - t_np) / cfg.T, x0)
    move = _per_sample(t_np / cfg.T, x0)
    return keep * x0 + move * swapped


def _coefficients(cfg, t, like):
    t_np = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    ab = cfg.alpha_bar_eff[t_np]
    return _per_sample(np.sqrt(ab), like), _per_sample(np.sqrt(1.0 - ab), like), ab


def forward_sample(cfg: ScheduleConfig, x0: np.ndarray, t: int, rng: np.random.Generator) -> ForwardSample:
    """Draw one noised input ``x_t`` from ``x0`` at timestep ``t``."""
    x0 = np.asarray(x0)
    if not np.all(np.isfinite(x0)):
        raise DataError("input contains non-finite values")
    t = int(t)
    clean = clean_path(cfg, x0, t)
    noise = rng.standard_normal(x0.shape).astype(x0.dtype, copy=False)
    signal, spread, ab = _coefficients(cfg, t, x0)
    x_t = signal * clean + spread * noise
    return ForwardSample(x_t=x_t, t=t, clean_t=clean, noise=noise, alpha_bar_eff=float(ab))


def forward_sample_batch(cfg: ScheduleConfig, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Batched forward noising with caller-supplied noise ``[B, C, H, W]``."""
    if not torch.isfinite(x0).all():
        raise DataError("input contains non-finite values")
    clean = clean_path(cfg, x0, t)
    signal, spread, _ = _coefficients(cfg, t, x0)
    return signal * clean + spread * noise


def endpoint(cfg: ScheduleConfig, x0: Array) -> Array:
    """Task endpoint at ``t = T``: the input for SS, the swapped pair for CD."""
    return x0 if cfg.task == "ss" else swap_pair(x0)
