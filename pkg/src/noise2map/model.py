"""Timestep-conditioned attention U-Net producing per-pixel class logits.

The trunk is shared between tasks. Each task owns an input stem (3 channels
for single images, 6 for concatenated pairs) and a 1x1 output head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import ConfigError, NumericError, ShapeError

# task -> which input stem it uses
TASK_STEMS = {"ss": "image", "pretrain": "image", "cd": "pair"}


@dataclass
class UNetConfig:
    """Channel plan and conditioning switches.

    ``in_channels`` is the channel count of one image; pair stems take twice
    that. Resolutions beyond ``len(stage_channels)`` reuse the last width.
    """

    in_channels: int = 3
    out_classes: int = 2
    stage_channels: Tuple[int, ...] = (128, 256, 512)
    num_resolutions: int = 5
    time_embed_dim: int = 512
    attention_at_bottleneck: bool = True
    use_timestep_conditioning: bool = True
    attention_heads: int = 4
    tasks: Tuple[str, ...] = ("ss",)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.tasks = tuple(self.tasks)
        problems = []
        if not self.stage_channels or any(c <= 0 for c in self.stage_channels):
            problems.append("stage_channels must be a non-empty list of positive integers")
        if self.num_resolutions < max(1, len(self.stage_channels)):
            problems.append("num_resolutions must be >= len(stage_channels)")
        if self.out_classes < 2:
            problems.append("out_classes must be >= 2")
        if self.in_channels < 1:
            problems.append("in_channels must be positive")
        if self.time_embed_dim % 2 or self.time_embed_dim < 4:
            problems.append("time_embed_dim must be an even integer >= 4")
        unknown = [t for t in self.tasks if t not in TASK_STEMS]
        if unknown or not self.tasks:
            problems.append(f"tasks must be a non-empty subset of {sorted(TASK_STEMS)}, got {self.tasks}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def widths(self) -> Tuple[int, ...]:
        last = self.stage_channels[-1]
        return self.stage_channels + (last,) * (self.num_resolutions - len(self.stage_channels))

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.num_resolutions - 1)

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def reference(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        base = dict(stage_channels=(16, 32, 64), num_resolutions=3, time_embed_dim=64)
        base.update(overrides)
        return cls(**base)


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal encoding: first half ``sin(t w_k)``, second half ``cos(t w_k)``.

    ``w_k = exp(-k ln(1e4) / (dim/2 - 1))`` for ``k = 0 .. dim/2 - 1``.
    Returns ``[dim]`` for a scalar ``t`` and ``[B, dim]`` for a batch.
    """
    if dim % 2 or dim < 4:
        raise ConfigError(f"embedding dim must be even and >= 4, got {dim}")
    t = torch.as_tensor(t)
    scalar = t.dim() == 0
    t = t.reshape(-1).to(torch.float64)
    if torch.any(t < 0):
        raise ConfigError("timesteps must be non-negative")
    half = dim // 2
    k = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-k * math.log(1e4) / (half - 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb[0] if scalar else emb


def _groups(channels: int, max_groups: int = 8) -> int:
    return math.gcd(max_groups, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim: Optional[int]):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None:
            h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention over spatial positions."""

    def __init__(self, channels, heads):
        super().__init__()
        while channels % heads:
            heads -= 1
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(seq, seq, seq, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class DenoiserModel(nn.Module):
    """U-Net ``eps_theta(x_t, t)`` mapping a noised input to class logits."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        c0 = widths[0]
        tdim = config.time_embed_dim if config.use_timestep_conditioning else None

        if tdim:
            self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        else:
            self.time_mlp = None

        stems = {}
        for task in config.tasks:
            kind = TASK_STEMS[task]
            if kind not in stems:
                in_ch = config.in_channels * (2 if kind == "pair" else 1)
                stems[kind] = nn.Conv2d(in_ch, c0, 3, padding=1)
        self.stems = nn.ModuleDict(stems)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = c0
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock(prev, w, tdim))
            prev = w
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(w, w, 3, stride=2, padding=1))

        self.mid_block1 = ResBlock(prev, prev, tdim)
        self.mid_attn = SelfAttention(prev, config.attention_heads) if config.attention_at_bottleneck else None
        self.mid_block2 = ResBlock(prev, prev, tdim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up_blocks.append(ResBlock(prev + w, w, tdim))
            prev = w
            if i > 0:
                self.upsamples.append(nn.Conv2d(w, widths[i - 1], 3, padding=1))
                prev = widths[i - 1]

        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        heads = {}
        for task in config.tasks:
            out = config.in_channels if task == "pretrain" else config.out_classes
            heads[task] = nn.Conv2d(c0, out, 1)
        self.heads = nn.ModuleDict(heads)

    def check_input(self, x, task):
        if task not in self.heads:
            raise ConfigError(f"model has no head for task {task!r}; available: {sorted(self.heads)}")
        m = self.config.spatial_multiple
        if x.dim() != 4:
            raise ShapeError(f"expected input of shape [B, C, H, W], got {tuple(x.shape)}")
        if x.shape[-1] % m or x.shape[-2] % m:
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} is not divisible by {m}; pad the input to a multiple of {m}"
            )
        stem = self.stems[TASK_STEMS[task]]
        if x.shape[1] != stem.in_channels:
            raise ShapeError(f"task {task!r} expects {stem.in_channels} input channels, got {x.shape[1]}")

    def forward(self, x, t, task="ss"):
        self.check_input(x, task)
        if self.time_mlp is not None:
            t = torch.as_tensor(t, device=x.device).reshape(-1).expand(x.shape[0])
            temb = timestep_embedding(t, self.config.time_embed_dim).to(x.dtype)
            temb = self.time_mlp(temb)
        else:
            temb = None

        h = self.stems[TASK_STEMS[task]](x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid_block1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if i < len(self.upsamples):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)

        logits = self.heads[task](F.silu(self.out_norm(h)))
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite activations in forward pass")
        return logits

    def head_parameters(self, task):
        return list(self.heads[task].parameters())

    def reset_head(self, task):
        self.heads[task].reset_parameters()


def build_model(config: UNetConfig, seed: int = 0, dtype=torch.float32) -> DenoiserModel:
    """Construct a model with deterministic initialization for ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DenoiserModel(config)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
