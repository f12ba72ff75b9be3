"""Datasets: a synthetic oriented-grating task and CIFAR-10 binary batches."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: str | None = None
    resolution: int = 32
    classes: int = 3
    samples: int = 96
    noise: float = 0.15
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)
    seed: int = 0
    limit: int | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "cifar10" and not self.path:
            raise ConfigError("cifar10 dataset needs a path")
        self.mean, self.std = tuple(self.mean), tuple(self.std)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32, normalised
    labels: np.ndarray  # [N] int64
    classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def arrays(self):
        return self.images, self.labels

    def split(self, n_first: int):
        a = Dataset(self.images[:n_first], self.labels[:n_first], self.classes, dict(self.meta))
        b = Dataset(self.images[n_first:], self.labels[n_first:], self.classes, dict(self.meta))
        return a, b

    def batches(self, batch_size: int, seed=None, shuffle: bool = True):
        """Yield ``(images, labels)``; the order depends only on ``seed``."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]


def replicate(images: np.ndarray, time_steps: int) -> np.ndarray:
    """Static images [B, C, H, W] repeated into a [T, B, C, H, W] sequence."""
    return np.broadcast_to(images[None], (time_steps,) + images.shape).copy()


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((images - m) / s).astype(np.float32)


def gratings(n: int, classes: int = 3, size: int = 32, noise: float = 0.15, seed=0):
    """Oriented sinusoidal gratings, one orientation per class, plus pixel noise.

    Orientation k*pi/classes identifies the class. Phase jitters within a
    quarter cycle so class-mean images stay distinct, frequency varies
    per image and each channel gets a random gain. Pixels are in [0, 1]
    before clipping noise.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, k in enumerate(labels):
        theta = np.pi * k / classes
        freq = rng.uniform(0.08, 0.16)
        phase = rng.uniform(-np.pi / 4, np.pi / 4)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        gain = rng.uniform(0.7, 1.0, size=3)[:, None, None]
        img = gain * wave[None] + noise * rng.standard_normal((3, size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


def read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch: records of 1 label byte plus 3072 pixel bytes."""
    with open(path, "rb") as f:
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    n, rem = divmod(raw.size, CIFAR_RECORD)
    if rem:
        raise DataError(f"{path}: record {n} is truncated ({rem} of {CIFAR_RECORD} bytes)")
    if n == 0:
        raise DataError(f"{path}: no records")
    rec = raw.reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: record {int(bad[0])} has label {int(labels[bad[0]])} outside 0..9")
    images = rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _cifar_files(path):
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.startswith("data_batch") and f.endswith(".bin"))
        if not names:
            raise DataError(f"{path}: no data_batch_*.bin files")
        return [os.path.join(path, f) for f in names]
    if not os.path.exists(path):
        raise DataError(f"{path}: no such file")
    return [path]


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "synthetic":
        raw, labels = gratings(spec.samples, spec.classes, spec.resolution, spec.noise, spec.seed)
        mean, std = spec.mean, spec.std
    else:
        parts = [read_cifar_file(f) for f in _cifar_files(spec.path)]
        raw = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        mean, std = CIFAR_MEAN, CIFAR_STD
        if spec.mean != DatasetSpec.mean or spec.std != DatasetSpec.std:
            mean, std = spec.mean, spec.std
    if spec.limit is not None:
        raw, labels = raw[:spec.limit], labels[:spec.limit]
    classes = spec.classes if spec.source == "synthetic" else 10
    return Dataset(normalize(raw, mean, std), labels, classes,
                   {"source": spec.source, "mean": list(mean), "std": list(std)})
