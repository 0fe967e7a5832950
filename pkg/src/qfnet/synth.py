"""Procedural texture dataset: eight seeded families, single-channel images in [0, 1]."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"QFDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, N, H, W, classes

FAMILIES = (
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "checkerboard",
    "centered_disk",
    "corner_gradient",
    "ring",
    "two_level_solid",
)
SPLITS = ("train", "val", "holdout")
NOISE_AMPLITUDE = 0.1


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 1) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)

    def per_class(self, k: int = 1) -> "Dataset":
        """First ``k`` examples of each class, in class order."""
        idx = []
        for c in range(self.num_classes):
            idx.extend(np.flatnonzero(self.labels == c)[:k].tolist())
        return self.subset(np.asarray(idx, dtype=np.int64))


@dataclass
class GenSpec:
    seed: int = 0
    classes: int = 8
    image_size: int = 16
    train: int = 2000
    val: int = 1000
    holdout: int = 1000

    def __post_init__(self):
        if not 2 <= self.classes <= len(FAMILIES):
            raise ValueError(f"classes must be in [2, {len(FAMILIES)}], got {self.classes}")
        if min(self.train, self.val, self.holdout) <= 0:
            raise ValueError("split counts must be positive")
        if self.image_size < 4:
            raise ValueError("image_size must be at least 4")


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(name.encode())]))


def _render(family: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    period = 4.0
    # phase jitter stays under a quarter period so class means remain distinct
    phase = rng.uniform(0, np.pi / 2)
    if family == 0:
        img = 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + phase)
    elif family == 1:
        img = 0.5 + 0.5 * np.sin(2 * np.pi * xx / period + phase)
    elif family == 2:
        img = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / period + phase)
    elif family == 3:
        off = rng.integers(0, 2)
        img = (((xx + off) // 2 + (yy + off) // 2) % 2).astype(np.float64)
    elif family == 4:
        cy, cx = c + rng.uniform(-1, 1, size=2)
        r = rng.uniform(0.25, 0.35) * size
        img = (np.hypot(yy - cy, xx - cx) <= r).astype(np.float64)
    elif family == 5:
        slope = rng.uniform(0.8, 1.2)
        img = np.clip(slope * (xx + yy) / (2 * (size - 1)), 0, 1)
    elif family == 6:
        cy, cx = c + rng.uniform(-1, 1, size=2)
        r = rng.uniform(0.3, 0.4) * size
        d = np.hypot(yy - cy, xx - cx)
        img = (np.abs(d - r) <= size / 12).astype(np.float64)
    elif family == 7:
        lo, hi = sorted(rng.uniform(0.15, 0.85, size=2))
        split = size // 2 + rng.integers(-1, 2)
        img = np.where(xx < split, lo, hi)
    else:
        raise ValueError(f"unknown family {family}")
    img = img + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _make_split(spec: GenSpec, split: str, count: int) -> Dataset:
    rng = named_rng(spec.seed, f"data/{split}")
    labels = np.arange(count, dtype=np.int64) % spec.classes
    rng.shuffle(labels)
    images = np.empty((count, spec.image_size, spec.image_size, 1), np.float32)
    for i, lab in enumerate(labels):
        images[i, :, :, 0] = _render(int(lab), spec.image_size, rng)
    return Dataset(images, labels, spec.classes, split)


def generate(spec: GenSpec = GenSpec()):
    """Deterministic (train, val, holdout) datasets for ``spec``."""
    return tuple(_make_split(spec, s, getattr(spec, s)) for s in SPLITS)


def save_dataset(d: Dataset, path) -> None:
    n, h, w, _ = d.images.shape
    body = _HEADER.pack(MAGIC, VERSION, n, h, w, d.num_classes)
    body += d.images.astype("<f4").tobytes() + d.labels.astype("<u2").tobytes()
    Path(path).write_bytes(body)


def load_dataset(path, split: str | None = None) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n, h, w, classes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    img_bytes = n * h * w * 4
    expected = _HEADER.size + img_bytes + n * 2
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _HEADER.size
    images = np.frombuffer(raw, "<f4", n * h * w, off).astype(np.float32).reshape(n, h, w, 1)
    labels = np.frombuffer(raw, "<u2", n, off + img_bytes).astype(np.int64)
    if split is None:
        split = path.stem if path.stem in SPLITS else "train"
    return Dataset(images, labels, classes, split)


def save_splits(datasets, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for d in datasets:
        save_dataset(d, directory / f"{d.split}.bin")


def load_split(directory, split: str) -> Dataset:
    return load_dataset(Path(directory) / f"{split}.bin", split)
