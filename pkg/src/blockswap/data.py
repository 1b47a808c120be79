"""Dataset ingestion, a synthetic desk-scale task, and minibatching.

CIFAR-10 binary records are 3073 bytes: one label byte, then 1024 red,
1024 green, 1024 blue bytes in row-major order. Images are scaled to
[0, 1] and standardized per channel; the constants used are stored on the
dataset so serialization can invert them bit-faithfully.

The synthetic task puts a bright patch at a class-specific location on a
noisy background: learnable by a linear model well above chance, but noisy
enough that architecture quality shows up in trained error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

RECORD_BYTES = 3073
CIFAR_HW = 32


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray   # (N, 3, H, W) float32, standardized
    labels: np.ndarray   # (N,) int64
    split: str           # "train" or "eval"
    mean: np.ndarray     # per-channel constants used for standardization
    std: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must be (N, 3, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise DataError("empty dataset")
        if self.labels.shape != (n,):
            raise DataError(f"{n} images but {self.labels.shape} labels")
        if self.split not in ("train", "eval"):
            raise DataError(f"split must be 'train' or 'eval', got {self.split!r}")

    def __len__(self):
        return self.images.shape[0]


def _standardize(images01, mean, std):
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (3,) or std.shape != (3,):
        raise DataError("need one mean/std per channel")
    if np.any(std <= 0):
        raise DataError("std must be positive")
    out = (images01.astype(np.float64) - mean[:, None, None]) / std[:, None, None]
    return out.astype(np.float32), mean, std


def load_cifar_binary(paths, mean=CIFAR10_MEAN, std=CIFAR10_STD, split="train"):
    """Read one or more CIFAR-10 binary files into a standardized Dataset."""
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    chunks = []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % RECORD_BYTES:
            raise DataError(
                f"{path}: length {len(raw)} is not a multiple of {RECORD_BYTES}-byte records")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES))
    records = np.concatenate(chunks) if chunks else np.zeros((0, RECORD_BYTES), np.uint8)
    if records.shape[0] == 0:
        raise DataError("no records found")
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"label byte {labels.max()} out of range for 10 classes")
    images01 = records[:, 1:].reshape(-1, 3, CIFAR_HW, CIFAR_HW).astype(np.float64) / 255.0
    images, mean, std = _standardize(images01, mean, std)
    return Dataset(images, labels, split, mean, std)


def serialize_cifar_records(ds: Dataset) -> bytes:
    """Invert standardization back to the exact byte layout read from disk."""
    if ds.images.shape[2] != CIFAR_HW or ds.images.shape[3] != CIFAR_HW:
        raise DataError(f"CIFAR records are 32x32, dataset is {ds.images.shape[2:]}")
    images01 = (ds.images.astype(np.float64) * ds.std[:, None, None]
                + ds.mean[:, None, None])
    pixels = np.rint(images01 * 255.0).clip(0, 255).astype(np.uint8)
    n = len(ds)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = ds.labels.astype(np.uint8)
    records[:, 1:] = pixels.reshape(n, -1)
    return records.tobytes()


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    size: int = 16
    train_count: int = 1280
    eval_count: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise DataError(f"need at least 2 classes, got {self.classes}")
        if self.size < 8:
            raise DataError(f"image size must be >= 8, got {self.size}")
        if self.train_count < self.classes or self.eval_count < self.classes:
            raise DataError("each split needs at least one image per class")


def _patch_positions(spec):
    # Training-time flips mirror column positions, so class identity rides on
    # the row. Columns use only the centre (its own mirror) and one edge slot
    # whose mirror no other class occupies, keeping flipped images in-class.
    patch = max(2, spec.size // 4)
    rows = max(1, math.ceil(spec.classes / 2))
    span = spec.size - patch
    if rows == 1:
        row_slots = [span // 2]
    else:
        row_slots = [round(i * span / (rows - 1)) for i in range(rows)]
    mid, edge = span // 2, max(1, spec.size // 16)
    return [(row_slots[k % rows], mid if k < rows else edge)
            for k in range(spec.classes)], patch


def make_synthetic(spec: SyntheticSpec):
    """Deterministic (train, eval) pair; eval reuses the train split's stats."""
    rng = np.random.default_rng(spec.seed)
    n = spec.train_count + spec.eval_count
    # balance each split exactly, not just the pool as a whole
    labels = np.concatenate([
        rng.permutation(np.arange(spec.train_count, dtype=np.int64) % spec.classes),
        rng.permutation(np.arange(spec.eval_count, dtype=np.int64) % spec.classes),
    ])

    positions, patch = _patch_positions(spec)
    images = np.full((n, 3, spec.size, spec.size), 0.1)
    for k, (r, c) in enumerate(positions):
        images[labels == k, :, r:r + patch, c:c + patch] = 0.8
    images += rng.normal(0.0, 0.3, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)

    train01 = images[:spec.train_count]
    mean = train01.mean(axis=(0, 2, 3))
    std = train01.std(axis=(0, 2, 3))
    train_images, mean, std = _standardize(train01, mean, std)
    eval_images, _, _ = _standardize(images[spec.train_count:], mean, std)
    train = Dataset(train_images, labels[:spec.train_count], "train", mean, std)
    evald = Dataset(eval_images, labels[spec.train_count:], "eval", mean, std)
    return train, evald


def _augment(images, rng):
    """Zero-pad by H//8, random crop back, then random horizontal flip."""
    n, _, h, w = images.shape
    pad = max(1, h // 8)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        r, c = offsets[i]
        out[i] = padded[i, :, r:r + h, c:c + w]
    out[flips] = out[flips, :, :, ::-1]
    return out


def minibatches(ds: Dataset, batch: int, shuffle_seed=0, epoch=0):
    """Yield (images, labels) batches.

    Train splits shuffle, augment, and drop the last partial batch; eval
    splits iterate in order, unaugmented, keeping the remainder. Batch
    order and augmentation depend only on (shuffle_seed, epoch).
    """
    if batch < 1:
        raise DataError(f"batch size must be >= 1, got {batch}")
    n = len(ds)
    if ds.split == "train":
        rng = np.random.default_rng([int(shuffle_seed), int(epoch)])
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            idx = order[start:start + batch]
            yield _augment(ds.images[idx], rng), ds.labels[idx]
    else:
        for start in range(0, n, batch):
            yield ds.images[start:start + batch], ds.labels[start:start + batch]
