"""Input checks shared by the estimator API and the CLI."""

from __future__ import annotations

import numpy as np
import torch

from .data import normalize
from .exceptions import DataError, LabelError, ShapeError


def check_images(X, channels: int, multiple: int = 1) -> torch.Tensor:
    """Validate an image batch ``[N, C, H, W]`` and return it as float32 in [-1, 1].

    Integer input is treated as 8-bit and normalized; float input must already
    be normalized.
    """
    a = X.detach().cpu().numpy() if isinstance(X, torch.Tensor) else np.asarray(X)
    if a.ndim != 4:
        raise ShapeError(f"expected a batch of shape [N, C, H, W], got {a.shape}")
    if a.shape[0] == 0:
        raise DataError("empty batch")
    if a.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {a.shape[1]}")
    if a.shape[2] % multiple or a.shape[3] % multiple:
        raise ShapeError(f"spatial size {a.shape[2:]} must be a multiple of {multiple}; pad the images")
    if np.issubdtype(a.dtype, np.integer):
        a = normalize(a)
    else:
        a = a.astype(np.float32, copy=False)
        if not np.all(np.isfinite(a)):
            raise DataError("images contain non-finite values")
        if a.min() < -1.0 - 1e-6 or a.max() > 1.0 + 1e-6:
            raise DataError("float images must be normalized to [-1, 1]")
    return torch.from_numpy(np.ascontiguousarray(a))


def check_masks(y, n_samples: int, spatial, n_classes: int) -> torch.Tensor:
    a = y.detach().cpu().numpy() if isinstance(y, torch.Tensor) else np.asarray(y)
    if a.shape != (n_samples,) + tuple(spatial):
        raise ShapeError(f"masks must have shape {(n_samples,) + tuple(spatial)}, got {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise LabelError("masks must hold integer class indices")
    if a.size and (a.min() < 0 or a.max() >= n_classes):
        raise LabelError(f"mask values must lie in [0, {n_classes}), got [{a.min()}, {a.max()}]")
    return torch.from_numpy(a.astype(np.int64))
