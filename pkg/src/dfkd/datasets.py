"""Procedural image-classification data, augmentation and the dataset file format.

Pixel values are derived only from (seed, split, class, index) through a
counter-based splitmix64 stream, so datasets are identical on every platform
that implements IEEE doubles.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, DataError, FormatError

DATASET_MAGIC = b"DFDS"
DATASET_VERSION = 1
UNLABELED = 0xFFFF
MAX_CLASSES = 32

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SPLIT_DOMAIN = {"train": 0x5452, "val": 0x56414C}


def splitmix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer applied to ``x + golden`` (vectorized, wraps mod 2**64)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _uniform(keys: np.ndarray, count: int) -> np.ndarray:
    """``count`` uniforms in [0, 1) per key, shape (len(keys), count)."""
    with np.errstate(over="ignore"):
        ctr = keys[:, None] + np.arange(1, count + 1, dtype=np.uint64)[None, :] * _GOLDEN
    return (splitmix64(ctr) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def sample_keys(seed: int, split: str, classes: np.ndarray, index: np.ndarray) -> np.ndarray:
    domain = _SPLIT_DOMAIN.get(split)
    if domain is None:
        raise ConfigError(f"unknown split {split!r}")
    k = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(domain))
    k = splitmix64(k ^ classes.astype(np.uint64))
    return splitmix64(k ^ index.astype(np.uint64))


@dataclass
class Dataset:
    """Images stored as uint8 N x C x H x W; floats are ``v / 255``."""

    images: np.ndarray
    labels: Optional[np.ndarray]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DataError("images must be a uint8 N x C x H x W array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DataError("labels length does not match images")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DataError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def shape(self):
        return self.images.shape[1:]

    def float_images(self, idx=None) -> torch.Tensor:
        arr = self.images if idx is None else self.images[np.asarray(idx)]
        return torch.from_numpy(arr.astype(np.float32) / np.float32(255.0))

    def label_tensor(self, idx=None) -> torch.Tensor:
        if self.labels is None:
            raise DataError("dataset is unlabeled")
        arr = self.labels if idx is None else self.labels[np.asarray(idx)]
        return torch.from_numpy(arr)

    def norm_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel pixel mean and std over the whole dataset."""
        x = self.images.astype(np.float64) / 255.0
        return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != np.bool_:
            idx = idx.astype(np.int64)
        return replace(self, images=self.images[idx], labels=None if self.labels is None else self.labels[idx])

    def without_labels(self) -> "Dataset":
        return replace(self, labels=None)


def to_uint8(x) -> np.ndarray:
    """Float images in [0, 1] -> uint8 by round-to-nearest."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_float(images, labels=None, num_classes=10, split="synthetic") -> Dataset:
    return Dataset(to_uint8(images), None if labels is None else np.asarray(labels), num_classes, split)


def make_procedural(classes: int = 10, per_class: int = 500, split_seed: int = 0,
                    split: str = "train", size: int = 32) -> Dataset:
    """Balanced dataset of oriented sinusoids with a class-colored blob.

    Class c: sinusoid at orientation pi*c/K with 2 + c/2 cycles across the
    image (amplitude 0.4 around 0.5, random phase), alpha-composited with a
    Gaussian blob in hue c/K at a random center, plus N(0, 0.1) pixel noise.
    """
    if not 1 <= classes <= MAX_CLASSES:
        raise ConfigError(f"classes must be in [1, {MAX_CLASSES}], got {classes}")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    labels = np.repeat(np.arange(classes), per_class)
    index = np.tile(np.arange(per_class), classes)
    keys = sample_keys(split_seed, split, labels, index)
    n_pix = 3 * size * size
    u = _uniform(keys, 3 + n_pix + (n_pix % 2))
    phase = 2 * np.pi * u[:, 0]
    cx = 0.2 + 0.6 * u[:, 1]
    cy = 0.2 + 0.6 * u[:, 2]
    # Box-Muller over the remaining uniforms
    u1 = u[:, 3::2][:, : (n_pix + 1) // 2]
    u2 = u[:, 4::2][:, : (n_pix + 1) // 2]
    r = np.sqrt(-2.0 * np.log1p(-u1))
    noise = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=1)[:, :n_pix]
    noise = noise.reshape(-1, 3, size, size)

    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = np.pi * labels / classes
    freq = 2.0 + labels / 2.0
    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    wave = 0.5 + 0.4 * np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])

    d2 = (xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2
    alpha = np.exp(-d2 / (2 * 0.12**2))
    colors = np.array([colorsys.hsv_to_rgb(c / classes, 0.85, 0.9) for c in range(classes)])
    color = colors[labels]  # N x 3
    img = (1 - alpha[:, None]) * wave[:, None] + alpha[:, None] * color[:, :, None, None]
    img = np.clip(img + 0.1 * noise, 0.0, 1.0)
    return Dataset(to_uint8(img), labels, classes, split)


def make_uniform_noise(n: int, shape=(3, 32, 32), seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(rng.integers(0, 256, size=(n, *shape), dtype=np.uint8), None, 10, "noise")


def standard_augment(batch: torch.Tensor, generator: Optional[torch.Generator] = None,
                     enabled: bool = True, pad: int = 4) -> torch.Tensor:
    """Random ``pad``-pixel zero-pad crop plus horizontal flip with p = 0.5."""
    if not enabled:
        return batch
    n, c, h, w = batch.shape
    padded = torch.nn.functional.pad(batch, (pad, pad, pad, pad))
    oy = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    ox = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    flip = torch.rand(n, generator=generator) < 0.5
    ar_h = torch.arange(h)
    ar_w = torch.arange(w)
    rows = oy[:, None] + ar_h[None]
    cols = torch.where(flip[:, None], ox[:, None] + (w - 1 - ar_w)[None], ox[:, None] + ar_w[None])
    return padded[torch.arange(n)[:, None, None, None], torch.arange(c)[None, :, None, None],
                  rows[:, None, :, None], cols[:, None, None, :]]


def subsample_balanced(dataset: Dataset, per_class: int, seed: int = 0) -> Dataset:
    if not dataset.labeled:
        raise DataError("balanced subsampling needs labels")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < per_class:
            raise DataError(f"class {c} has {len(members)} members, {per_class} requested")
        picks.append(rng.choice(members, size=per_class, replace=False))
    idx = np.concatenate(picks)
    return dataset.subset(idx[rng.permutation(len(idx))])


def save_dataset(dataset: Dataset, path) -> None:
    n, c, h, w = dataset.images.shape
    k = dataset.num_classes if dataset.labeled else UNLABELED
    header = DATASET_MAGIC + struct.pack("<HIBHHH", DATASET_VERSION, n, c, h, w, k)
    body = [header, np.ascontiguousarray(dataset.images).tobytes()]
    if dataset.labeled:
        body.append(dataset.labels.astype("<u2").tobytes())
    Path(path).write_bytes(b"".join(body))


def load_dataset(path, split: str = "file", num_classes: int = 10) -> Dataset:
    """Read a dataset file; ``num_classes`` applies to unlabeled files only."""
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    hsize = struct.calcsize("<HIBHHH")
    if len(data) < 4 + hsize:
        raise FormatError(f"{path}: truncated header")
    version, n, c, h, w, k = struct.unpack_from("<HIBHHH", data, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 4 + hsize
    npix = n * c * h * w
    expected = pos + npix + (0 if k == UNLABELED else 2 * n)
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} != expected {expected}")
    images = np.frombuffer(data, dtype=np.uint8, count=npix, offset=pos).reshape(n, c, h, w).copy()
    if k == UNLABELED:
        return Dataset(images, None, num_classes, split)
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=pos + npix).astype(np.int64)
    return Dataset(images, labels, k, split)
