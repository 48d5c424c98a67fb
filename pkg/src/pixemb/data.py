"""CIFAR binary-format ingestion and a deterministic synthetic image set."""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np

IMAGE_SHAPE = (32, 32, 3)
_PIXELS = 32 * 32 * 3


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images as ``(N, H, W, 3)`` uint8 plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3 or self.images.dtype != np.uint8:
            raise DatasetError(f"images must be uint8 (N, H, W, 3), got {self.images.dtype} {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise DatasetError("one label per image required")
        if len(self.labels) == 0:
            raise DatasetError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def per_class_subset(data: Dataset, per_class: int) -> Dataset:
    """First ``per_class`` images of every class, in file order."""
    keep = []
    for k in range(data.num_classes):
        keep.append(np.flatnonzero(data.labels == k)[:per_class])
    return data.subset(np.sort(np.concatenate(keep)))


def split(data: Dataset, n_eval: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(data))
    return data.subset(np.sort(perm[n_eval:])), data.subset(np.sort(perm[:n_eval]))


# ---------------------------------------------------------------- CIFAR binary

def read_cifar_binary(paths, label_bytes: int = 1, num_classes: int | None = None) -> Dataset:
    """Read records of ``label_bytes`` label byte(s) + 3072 channel-planar pixels.

    With two label bytes (CIFAR-100) the second (fine) label is used.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    record = label_bytes + _PIXELS
    chunks = []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % record:
            raise DatasetError(f"{path}: size {raw.size} is not a multiple of the {record}-byte record")
        chunks.append(raw.reshape(-1, record))
    recs = np.concatenate(chunks)
    labels = recs[:, label_bytes - 1].astype(np.int64)
    images = recs[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    if num_classes is None:
        num_classes = 100 if label_bytes == 2 else 10
    return Dataset(np.ascontiguousarray(images), labels, num_classes)


def write_cifar_binary(data: Dataset, path, label_bytes: int = 1) -> None:
    if data.images.shape[1:] != IMAGE_SHAPE:
        raise DatasetError(f"CIFAR records hold 32x32x3 images, got {data.images.shape[1:]}")
    n = len(data)
    recs = np.zeros((n, label_bytes + _PIXELS), np.uint8)
    recs[:, label_bytes - 1] = data.labels
    recs[:, label_bytes:] = data.images.transpose(0, 3, 1, 2).reshape(n, -1)
    recs.tofile(path)


def load_cifar(path) -> tuple[Dataset, Dataset | None]:
    """Load ``(train, test)`` from a CIFAR-10/100 binary directory or a single file."""
    path = os.fspath(path)
    if os.path.isfile(path):
        return read_cifar_binary(path), None
    if not os.path.isdir(path):
        raise DatasetError(f"dataset path not found: {path}")
    c10 = sorted(glob.glob(os.path.join(path, "data_batch_*.bin")))
    if c10:
        test = os.path.join(path, "test_batch.bin")
        return read_cifar_binary(c10), (read_cifar_binary(test) if os.path.exists(test) else None)
    train = os.path.join(path, "train.bin")
    if os.path.exists(train):
        test = os.path.join(path, "test.bin")
        return (read_cifar_binary(train, 2),
                read_cifar_binary(test, 2) if os.path.exists(test) else None)
    raise DatasetError(f"{path}: no CIFAR binary batches found")


# ---------------------------------------------------------------- synthetic

def synthetic(n: int, num_classes: int = 10, seed: int = 0, size: int = 32) -> Dataset:
    """Deterministic textured images; class fixes hue pair and stripe orientation.

    Balanced: image ``i`` has label ``i % num_classes``.
    """
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(1_000_003)  # classes identical across seeds
    fg = proto_rng.uniform(40, 215, (num_classes, 3))
    bg = proto_rng.uniform(40, 215, (num_classes, 3))
    angle = proto_rng.uniform(0, np.pi, num_classes)
    freq = proto_rng.uniform(0.25, 0.8, num_classes)
    labels = np.arange(n) % num_classes
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size, 3), np.uint8)
    for i, k in enumerate(labels):
        phase = rng.uniform(0, 2 * np.pi)
        a = angle[k] + rng.normal(0, 0.15)
        wave = np.sin(freq[k] * (np.cos(a) * xx + np.sin(a) * yy) + phase)
        mix = (0.5 + 0.5 * wave)[..., None]
        img = mix * fg[k] + (1 - mix) * bg[k]
        img = img * rng.uniform(0.7, 1.3) + rng.normal(0, 25, img.shape)
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), num_classes)


def load_data(spec: str) -> tuple[Dataset, Dataset | None]:
    """Dataset from a path, or ``synthetic[:N[:classes[:seed]]]``."""
    if spec.startswith("synthetic"):
        parts = spec.split(":")[1:]
        n = int(parts[0]) if parts else 512
        k = int(parts[1]) if len(parts) > 1 else 10
        seed = int(parts[2]) if len(parts) > 2 else 0
        return synthetic(n, k, seed), synthetic(max(n // 4, k), k, seed + 1)
    return load_cifar(spec)


def prepare(spec: str, train_per_class: int | None = None, eval_per_class: int | None = None,
            n_eval: int = 1000) -> tuple[Dataset, Dataset]:
    """Train and held-out sets, optionally reduced to the first k images per class.

    Without a test split, ``n_eval`` training images are held out (fixed seed).
    """
    train, held = load_data(spec)
    if held is None:
        train, held = split(train, min(n_eval, len(train) // 5))
    if train_per_class is not None:
        train = per_class_subset(train, train_per_class)
    if eval_per_class is not None:
        held = per_class_subset(held, eval_per_class)
    return train, held
