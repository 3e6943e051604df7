"""Datasets: synthetic generation, NTSR/NLBL storage, splitting, batching, augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .formats import PathLike, read_labels, read_tensor, write_atomic, write_labels, write_tensor

DIFFICULTIES = ("trivial", "easy", "hard")
MIN_IMAGE_SIZE = 8  # gratings have a 4-pixel period; two periods minimum


class DatasetError(ValueError):
    pass


@dataclass
class DatasetFile:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_classes < 2:
            raise DatasetError(f"need at least 2 classes, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"label out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "DatasetFile":
        return DatasetFile(self.images[idx], self.labels[idx], self.num_classes, dict(self.meta))


def _gratings(rng, labels, classes, size, channels, phase_jitter, noise):
    n = len(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.pi * labels / classes
    phase = rng.uniform(-phase_jitter, phase_jitter, n)
    contrast = rng.uniform(0.7, 1.3, n)
    freq = 2 * np.pi / 4.0
    arg = freq * (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]) + phase[:, None, None]
    img = contrast[:, None, None] * np.cos(arg)
    out = np.repeat(img[:, None], channels, axis=1)
    return out + rng.normal(0.0, noise, out.shape)


def gen_synthetic(
    classes: int = 2,
    samples: int = 2000,
    size: int = 16,
    difficulty: str = "easy",
    seed: int = 0,
    channels: int = 1,
) -> DatasetFile:
    """Class-conditional images, balanced and shuffled.

    ``trivial``: constant intensity ``k + U(-0.3, 0.3)`` for class k.
    ``easy``: oriented cosine gratings (orientation ``pi k / classes``, 4-pixel
    period, phase jitter within +-pi/4) plus Gaussian noise (sigma 0.5).
    ``hard``: same gratings with uniformly random phase and sigma 1.
    """
    if classes < 2:
        raise DatasetError(f"need at least 2 classes, got {classes}")
    if samples < 1:
        raise DatasetError("need at least one sample")
    if difficulty not in DIFFICULTIES:
        raise DatasetError(f"unknown difficulty {difficulty!r}; expected one of {DIFFICULTIES}")
    if size < MIN_IMAGE_SIZE:
        raise DatasetError(f"image size {size} is below the pattern scale (minimum {MIN_IMAGE_SIZE})")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(samples) % classes)
    if difficulty == "trivial":
        level = labels + rng.uniform(-0.3, 0.3, samples)
        images = np.broadcast_to(level[:, None, None, None], (samples, channels, size, size))
    elif difficulty == "easy":
        images = _gratings(rng, labels, classes, size, channels, np.pi / 4, 0.5)
    else:
        images = _gratings(rng, labels, classes, size, channels, np.pi, 1.0)
    meta = {"classes": classes, "samples": samples, "size": size, "difficulty": difficulty, "seed": seed, "channels": channels}
    return DatasetFile(np.ascontiguousarray(images, dtype=np.float32), labels, classes, meta)


def save_dataset(ds: DatasetFile, directory: PathLike) -> dict[str, Path]:
    d = Path(directory)
    paths = {"images": d / "images.ntsr", "labels": d / "labels.nlbl", "meta": d / "meta.json"}
    write_tensor(paths["images"], ds.images)
    write_labels(paths["labels"], ds.labels)
    meta = {**ds.meta, "classes": ds.num_classes}
    write_atomic(paths["meta"], (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return paths


def load_dataset(images: PathLike, labels: PathLike, num_classes: Optional[int] = None) -> DatasetFile:
    """Class count comes from the argument, else a ``meta.json`` beside the images, else max label + 1."""
    x = read_tensor(images)
    y = read_labels(labels)
    meta: dict = {}
    meta_path = Path(images).with_name("meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    if num_classes is None:
        num_classes = int(meta.get("classes", max(int(y.max()) + 1 if y.size else 2, 2)))
    return DatasetFile(x.astype(np.float32, copy=False), y, num_classes, meta)


def load_dataset_dir(directory: PathLike, num_classes: Optional[int] = None) -> DatasetFile:
    d = Path(directory)
    return load_dataset(d / "images.ntsr", d / "labels.nlbl", num_classes)


def split_halves(ds: DatasetFile, seed: int) -> tuple[DatasetFile, DatasetFile]:
    """Shuffled (train, validation) halves."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    half = len(ds) // 2
    train, val = ds.subset(perm[half:]), ds.subset(perm[:half])
    if len(train) == 0 or len(val) == 0:
        raise DatasetError(f"cannot split {len(ds)} samples into non-empty train/validation halves")
    return train, val


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> Iterator[np.ndarray]:
    """Index batches covering ``range(n)``; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise DatasetError(f"batch size must be positive, got {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 2, flip: bool = True) -> np.ndarray:
    """Random crop after zero padding, plus horizontal flips with probability 1/2."""
    n, c, h, w = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else images
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
