"""Dataset ingestion and a synthetic bi-temporal building-scene generator.

On-disk layout (PNG, 8-bit; images RGB, masks single channel with the class
index as pixel value)::

    SS:  root/images/{id}.png   root/masks/{id}.png
    CD:  root/A/{id}.png        root/B/{id}.png        root/masks/{id}.png
    root/splits/{train,val,test}.txt   one id per line
    root/meta.json                     optional: {"num_classes": K, "class_weights": [...]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

from .exceptions import DataError, EmptyDatasetError, ManifestError, ShapeError
from .objectives import ClassWeights

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    task: str
    images: Tuple[np.ndarray, ...]
    mask: np.ndarray
    id: str

    def __post_init__(self):
        n = 2 if self.task == "cd" else 1
        if len(self.images) != n:
            raise ShapeError(f"{self.task} sample {self.id} needs {n} image(s), got {len(self.images)}")
        if len({im.shape for im in self.images}) != 1:
            raise ShapeError(f"sample {self.id}: images differ in shape")
        if self.mask.shape != self.images[0].shape[-2:]:
            raise ShapeError(f"sample {self.id}: mask {self.mask.shape} vs image {self.images[0].shape[-2:]}")

    def stacked(self) -> np.ndarray:
        """Model input at ``t=0``: the image, or ``[pre, post]`` along channels."""
        return np.concatenate(self.images, axis=0)


@dataclass
class DatasetManifest:
    root: Path
    task: str
    entries: List[Tuple[Tuple[Path, ...], Path, str]]
    num_classes: int = 2
    class_weights: Optional[ClassWeights] = None
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e[2] for e in self.entries]

    def load(self, index: int) -> Sample:
        paths, mask_path, sid = self.entries[index]
        images = tuple(normalize(read_image(p)) for p in paths)
        mask = read_mask(mask_path)
        if mask.max(initial=0) >= self.num_classes:
            raise DataError(f"mask {mask_path} has class {mask.max()} >= num_classes {self.num_classes}")
        return Sample(task=self.task, images=images, mask=mask, id=sid)

    def samples(self) -> List[Sample]:
        return [self.load(i) for i in range(len(self))]

    def arrays(self) -> Tuple[torch.Tensor, torch.Tensor, List[str]]:
        """Whole split as ``(x0 [N, C, H, W] float32, masks [N, H, W] int64, ids)``."""
        samples = self.samples()
        x = torch.from_numpy(np.stack([s.stacked() for s in samples]))
        y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
        return x, y, [s.id for s in samples]


def normalize(image8: np.ndarray) -> np.ndarray:
    """Map 8-bit values ``v`` to ``v / 127.5 - 1`` as float32."""
    a = np.asarray(image8)
    if a.size and (a.min() < 0 or a.max() > 255):
        raise DataError(f"8-bit image values must lie in [0, 255], got [{a.min()}, {a.max()}]")
    return (a.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def denormalize(image: np.ndarray) -> np.ndarray:
    a = (np.asarray(image, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """PNG to ``[C, H, W]`` uint8."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"))
    return np.ascontiguousarray(a.transpose(2, 0, 1))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1", "I"):
            im = im.convert("L")
        return np.asarray(im).astype(np.int64)


def write_image(path, image8: np.ndarray):
    Image.fromarray(np.ascontiguousarray(np.asarray(image8, dtype=np.uint8).transpose(1, 2, 0)), "RGB").save(path)


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.asarray(mask, dtype=np.uint8), "L").save(path)


def _read_meta(root: Path) -> dict:
    meta = root / "meta.json"
    return json.loads(meta.read_text()) if meta.exists() else {}


def load_manifest(root, task: str, split: str = "train") -> DatasetManifest:
    """Enumerate a split of a directory-layout corpus, sorted by id."""
    root = Path(root)
    if task not in ("ss", "cd"):
        raise ManifestError(f"task must be 'ss' or 'cd', got {task!r}")
    dirs = ["images"] if task == "ss" else ["A", "B"]
    for d in dirs + ["masks"]:
        if not (root / d).is_dir():
            raise ManifestError(f"{root} lacks the {d}/ directory required for task {task}")

    stems = [{p.stem for p in (root / d).glob("*.png")} for d in dirs]
    if task == "cd" and stems[0] != stems[1]:
        unmatched = sorted(stems[0] ^ stems[1])
        raise ManifestError(f"A/ and B/ ids do not match; unmatched ids: {', '.join(unmatched)}")
    available = stems[0]

    split_file = root / "splits" / f"{split}.txt"
    if split_file.exists():
        ids = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
        missing_images = sorted(set(ids) - available)
        if missing_images:
            raise ManifestError(f"split {split} lists ids without images: {', '.join(missing_images)}")
    elif (root / "splits").is_dir():
        raise EmptyDatasetError(f"no split file {split_file}")
    else:
        ids = sorted(available)

    no_mask = sorted(i for i in ids if not (root / "masks" / f"{i}.png").exists())
    if no_mask:
        raise ManifestError(f"missing masks for ids: {', '.join(no_mask)}")
    if not ids:
        raise EmptyDatasetError(f"split {split!r} of {root} is empty")

    meta = _read_meta(root)
    k = int(meta.get("num_classes", 2))
    cw = meta.get("class_weights")
    entries = [
        (tuple(root / d / f"{i}.png" for d in dirs), root / "masks" / f"{i}.png", i)
        for i in sorted(set(ids))
    ]
    return DatasetManifest(
        root=root, task=task, entries=entries, num_classes=k,
        class_weights=ClassWeights(tuple(cw)) if cw else None, split=split,
    )


def _offsets(dim: int, target: int) -> List[int]:
    offs = list(range(0, dim - target + 1, target))
    if offs[-1] != dim - target:
        offs.append(dim - target)
    return offs


def center_crop_or_tile(image: np.ndarray, target: int) -> List[np.ndarray]:
    """Cut ``target x target`` tiles from the last two axes, row-major.

    Tiles lie on a non-overlapping grid; when a side is not a multiple of
    ``target`` one extra tile is anchored at the far edge.
    """
    h, w = image.shape[-2:]
    if h < target or w < target:
        raise ShapeError(f"image {h}x{w} is smaller than tile size {target}; pad it first")
    return [image[..., y:y + target, x:x + target] for y in _offsets(h, target) for x in _offsets(w, target)]


@dataclass
class SynthSpec:
    """Parameters of the synthetic building-scene corpus."""

    seed: int = 0
    size: int = 64
    n_buildings: Tuple[int, int] = (2, 5)
    change_fraction: float = 0.5
    n_samples: int = 32
    task: str = "cd"
    n_val: int = 0
    n_test: int = 0
    class_weights: Optional[Sequence[float]] = None
    multiple_of: int = field(default=4, repr=False)

    def __post_init__(self):
        if self.size % self.multiple_of:
            raise ShapeError(f"size {self.size} must be divisible by {self.multiple_of}")
        if not 0 <= self.change_fraction <= 1:
            raise DataError("change_fraction must lie in [0, 1]")
        if self.n_val + self.n_test >= self.n_samples:
            raise DataError("n_val + n_test must leave at least one training sample")
        lo, hi = self.n_buildings
        if not 1 <= lo <= hi:
            raise DataError("n_buildings must be a range with 1 <= low <= high")


def _background(rng, size):
    coarse = rng.uniform(-1, 1, size=(3, 8, 8))
    field_ = zoom(coarse, (1, size / 8, size / 8), order=1)
    field_ = gaussian_filter(field_, sigma=(0, 2, 2))
    tint = rng.uniform(0.25, 0.42, size=(3, 1, 1))
    return tint + 0.06 * field_


def _place(rng, size, occupied, tries=200):
    """Random rectangle (y0, y1, x0, x1) not touching any occupied pixel."""
    lo, hi = max(3, size // 10), max(4, size // 4)
    for _ in range(tries):
        h, w = rng.integers(lo, hi + 1, size=2)
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        y1, x1 = y0 + int(h), x0 + int(w)
        if y1 <= y0 or x1 <= x0:
            continue
        # one-pixel margin keeps footprints of distinct buildings disjoint
        if occupied[max(0, y0 - 1):y1 + 1, max(0, x0 - 1):x1 + 1].any():
            continue
        occupied[y0:y1, x0:x1] = True
        return (y0, y1, x0, x1)
    return None


def _render(background, rects, colors, rng, jitter=0.01):
    img = background.copy()
    for (y0, y1, x0, x1), col in zip(rects, colors):
        img[:, y0:y1, x0:x1] = col[:, None, None]
    img = img + jitter * rng.standard_normal(img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _footprint(rects, size):
    m = np.zeros((size, size), dtype=np.uint8)
    for y0, y1, x0, x1 in rects:
        m[y0:y1, x0:x1] = 1
    return m


def synth_scene(rng: np.random.Generator, spec: SynthSpec):
    """One scene: ``(pre8, post8, ss_mask, change_mask, pre_rects, post_rects)``."""
    size = spec.size
    bg = _background(rng, size)
    occupied = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(spec.n_buildings[0], spec.n_buildings[1] + 1))
    pre = [r for r in (_place(rng, size, occupied) for _ in range(n)) if r is not None]
    colors = [rng.uniform(0.6, 0.95, size=3) for _ in pre]

    n_change = int(round(spec.change_fraction * len(pre)))
    removed = set(rng.choice(len(pre), size=n_change, replace=False).tolist()) if n_change else set()
    added = [r for r in (_place(rng, size, occupied) for _ in range(n_change)) if r is not None]
    added_colors = [rng.uniform(0.6, 0.95, size=3) for _ in added]

    kept = [i for i in range(len(pre)) if i not in removed]
    post = [pre[i] for i in kept] + added
    post_colors = [colors[i] for i in kept] + added_colors

    pre8 = _render(bg, pre, colors, rng)
    post8 = _render(bg, post, post_colors, rng)
    change = _footprint([pre[i] for i in sorted(removed)] + added, size)
    return pre8, post8, _footprint(pre, size), change, pre, post


def generate_synthetic(spec: SynthSpec, out_root) -> DatasetManifest:
    """Write a reproducible synthetic corpus and return its training manifest."""
    out = Path(out_root)
    task = spec.task
    dirs = ["images"] if task == "ss" else ["A", "B"]
    for d in dirs + ["masks", "splits"]:
        (out / d).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    ids = [f"s{i:05d}" for i in range(spec.n_samples)]
    for sid in ids:
        pre8, post8, ss_mask, change, _, _ = synth_scene(rng, spec)
        if task == "ss":
            write_image(out / "images" / f"{sid}.png", pre8)
            write_mask(out / "masks" / f"{sid}.png", ss_mask)
        else:
            write_image(out / "A" / f"{sid}.png", pre8)
            write_image(out / "B" / f"{sid}.png", post8)
            write_mask(out / "masks" / f"{sid}.png", change)

    n_train = spec.n_samples - spec.n_val - spec.n_test
    parts = {"train": ids[:n_train], "val": ids[n_train:n_train + spec.n_val], "test": ids[n_train + spec.n_val:]}
    for name, part in parts.items():
        (out / "splits" / f"{name}.txt").write_text("".join(f"{i}\n" for i in part))
    meta = {"task": task, "num_classes": 2}
    if spec.class_weights is not None:
        meta["class_weights"] = [float(v) for v in spec.class_weights]
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    logger.info("wrote %d %s samples to %s", spec.n_samples, task, out)
    return load_manifest(out, task, "train")
