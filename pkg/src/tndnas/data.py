"""Deterministic desk-scale image datasets."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    class_count: int
    split_tag: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} do not match")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def channels(self):
        return self.images.shape[1]

    @property
    def image_size(self):
        return self.images.shape[2]

    def subset(self, idx, split_tag=None):
        return Dataset(self.images[idx], self.labels[idx], self.class_count, split_tag or self.split_tag)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


def normalize_channels(images):
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    return (images - mean) / np.where(std > 0, std, 1.0)


def class_pattern(c, size, channels):
    """Noise-free [channels, size, size] pattern for class ``c``.

    Classes cycle through bar orientations, checkerboards and rings; the
    spatial frequency grows every five classes and each class gets its own
    channel colouring.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = 2 + c // 5
    kind = c % 5
    if kind == 0:
        base = np.sin(2 * np.pi * freq * yy)
    elif kind == 1:
        base = np.sin(2 * np.pi * freq * xx)
    elif kind == 2:
        base = np.sin(2 * np.pi * freq * (xx + yy) / np.sqrt(2))
    elif kind == 3:
        base = np.sign(np.sin(2 * np.pi * freq * xx)) * np.sign(np.sin(2 * np.pi * freq * yy))
    else:
        r = np.hypot(xx - 0.5, yy - 0.5)
        base = np.cos(2 * np.pi * freq * r)
    phase = 2 * np.pi * c / 7.0
    colour = 0.6 + 0.4 * np.cos(phase + 2 * np.pi * np.arange(channels) / max(channels, 1))
    return colour[:, None, None] * base[None]


def generate_synthetic(classes=10, per_class=200, size=16, channels=3, noise_sigma=0.3, seed=0):
    if size < 8:
        raise ValueError(f"image size must be at least 8, got {size}")
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    patterns = np.stack([class_pattern(c, size, channels) for c in range(classes)])
    labels = np.repeat(np.arange(classes), per_class)
    images = patterns[labels]
    if noise_sigma > 0:
        images = images + noise_sigma * rng.standard_normal(images.shape)
    order = rng.permutation(len(labels))
    return Dataset(normalize_channels(images[order]), labels[order], classes, "train")


def split(dataset, train_fraction=0.5, seed=0):
    """Class-stratified, seed-deterministic train/validation split."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_fraction * len(idx)))
        train_idx.append(idx[:n_train])
        val_idx.append(idx[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


def iterate_batches(dataset, batch_size, order=None):
    order = np.arange(len(dataset)) if order is None else order
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# ------------------------------------------------------------------- IDX


def _read_idx(path, expected_magic, kind):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)} (need 4 magic bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x} for {kind}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension sizes at offset {len(raw)} (need {header} bytes)")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header + count:
        raise IdxFormatError(
            f"{path}: truncated data at offset {len(raw)}, expected {header + count} bytes for shape {dims}"
        )
    if len(raw) > header + count:
        raise IdxFormatError(f"{path}: {len(raw) - header - count} trailing bytes at offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx(images_path, labels_path, class_count=None, normalize=True):
    """Load an IDX image/label pair as a single-channel dataset.

    Pixels are scaled to [0, 1] and, unless ``normalize`` is false, shifted to
    zero mean and unit variance.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch at offset 4: {images.shape[0]} images in {images_path} "
            f"vs {labels.shape[0]} labels in {labels_path}"
        )
    x = images.astype(np.float64)[:, None] / 255.0
    if normalize and len(x):
        x = normalize_channels(x)
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(x, labels, class_count, "train")


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())
