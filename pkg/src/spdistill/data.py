"""CIFAR-10 binary ingestion, augmentation, batching, and synthetic data.

The CIFAR-10 binary format stores each record as one label byte followed
by 3072 pixel bytes (red plane, green plane, blue plane, each row-major
32x32). Training files hold 10,000 records each.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

__all__ = [
    "BatchPlan",
    "DataSplit",
    "augment",
    "augment_batch",
    "crop",
    "hflip",
    "load_cifar10",
    "normalize",
    "synthetic_clusters",
    "write_cifar_batch",
]

IMAGE_SHAPE = (3, 32, 32)
RECORD_BYTES = 1 + 3 * 32 * 32
RECORDS_PER_FILE = 10_000
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

# widely used CIFAR-10 per-channel statistics of the training set, on the
# 0-1 pixel scale; recorded in every run's resolved config
CIFAR10_MEANS = (0.4914, 0.4822, 0.4465)
CIFAR10_STDS = (0.2470, 0.2435, 0.2616)

CROP_PAD = 4


@dataclass
class DataSplit:
    """Raw uint8 images (n x 3 x 32 x 32) with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "DataSplit":
        return DataSplit(self.images[indices], self.labels[indices])


def _read_batch_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    expected = RECORDS_PER_FILE * RECORD_BYTES
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes ({RECORDS_PER_FILE} records of "
            f"{RECORD_BYTES} bytes), got {len(raw)} bytes"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{path}: label byte {labels.max()} outside 0-9")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return images, labels


def _resolve_dir(data_dir: str) -> str:
    for candidate in (data_dir, os.path.join(data_dir, "cifar-10-batches-bin")):
        if os.path.isfile(os.path.join(candidate, TEST_FILE)):
            return candidate
    raise DataFormatError(
        f"no CIFAR-10 binary batches under {data_dir!r} "
        f"(expected {TEST_FILE} and {', '.join(TRAIN_FILES)})"
    )


def load_cifar10(data_dir: str) -> tuple[DataSplit, DataSplit]:
    """Load the standard binary batches: 50,000 train / 10,000 test records."""
    base = _resolve_dir(data_dir)
    train_parts = [_read_batch_file(os.path.join(base, name)) for name in TRAIN_FILES]
    train = DataSplit(
        np.concatenate([imgs for imgs, _ in train_parts]),
        np.concatenate([labels for _, labels in train_parts]),
    )
    test = DataSplit(*_read_batch_file(os.path.join(base, TEST_FILE)))
    for name, split, expected in (("train", train, 5 * RECORDS_PER_FILE),
                                  ("test", test, RECORDS_PER_FILE)):
        if len(split) != expected:
            raise DataFormatError(
                f"{name} split has {len(split)} records, expected {expected}"
            )
    return train, test


def write_cifar_batch(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write records in the CIFAR-10 binary layout (for tests and tooling)."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images vs {len(labels)} labels")
    with open(path, "wb") as fh:
        fh.write(np.concatenate([labels, images], axis=1).tobytes())


def normalize(images_u8: np.ndarray, means=CIFAR10_MEANS, stds=CIFAR10_STDS,
              dtype=np.float32) -> np.ndarray:
    """Map uint8 pixels to standardized per-channel floats."""
    x = images_u8.astype(dtype) / 255.0
    means = np.asarray(means, dtype=dtype).reshape(1, 3, 1, 1)
    stds = np.asarray(stds, dtype=dtype).reshape(1, 3, 1, 1)
    return (x - means) / stds


# ---------------------------------------------------------------------------
# augmentation: horizontal flip with probability 1/2, then zero-pad by 4
# pixels and take a random 32x32 crop. Offset (4, 4) recovers the input.
# ---------------------------------------------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    """Mirror the width axis (an involution)."""
    return img[..., :, ::-1]


def crop(padded: np.ndarray, top: int, left: int) -> np.ndarray:
    """32 x 32 window of a padded image; offset (4, 4) recovers the input."""
    return padded[..., top:top + 32, left:left + 32]


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Augment one 3 x 32 x 32 image; deterministic given the generator."""
    if rng.random() < 0.5:
        img = hflip(img)
    padded = np.pad(img, ((0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)))
    top, left = rng.integers(0, 2 * CROP_PAD + 1, size=2)
    return np.ascontiguousarray(crop(padded, top, left))


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized augment over a batch; one independent draw per image."""
    n = len(images)
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * CROP_PAD + 1, size=(n, 2))
    out = np.empty_like(images)
    padded = np.pad(
        images, ((0, 0), (0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD))
    )
    for i in range(n):
        view = hflip(padded[i]) if flips[i] else padded[i]
        out[i] = crop(view, offsets[i, 0], offsets[i, 1])
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synthetic_clusters(
    num_classes: int,
    per_class: int,
    spread: float,
    seed: int,
    image_shape: tuple = IMAGE_SHAPE,
) -> DataSplit:
    """Gaussian-perturbed class prototypes, labels ordered by class.

    Each class gets a fixed random prototype image; records are the
    prototype plus N(0, spread) pixel noise (spread in 8-bit pixel units).
    As spread -> 0 the records of a class become identical.
    """
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = np.random.Generator(np.random.PCG64(seed))
    protos = rng.uniform(40.0, 215.0, size=(num_classes, *image_shape))
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(0.0, spread, size=(len(labels), *image_shape))
    images = np.clip(np.rint(protos[labels] + noise), 0, 255).astype(np.uint8)
    return DataSplit(images, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    """Deterministic shuffled batching: same seed, same batch sequence."""

    batch_size: int = 128
    seed: int = 0
    drop_last: bool = False
    shuffle: bool = True

    def epoch_rng(self, epoch: int, stream: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(epoch, stream))
        return np.random.Generator(np.random.PCG64(ss))

    def batches(self, n: int, epoch: int = 0):
        """Yield index arrays covering range(n) once (unless drop_last)."""
        order = np.arange(n)
        if self.shuffle:
            self.epoch_rng(epoch).shuffle(order)
        end = (n // self.batch_size) * self.batch_size if self.drop_last else n
        for start in range(0, end, self.batch_size):
            yield order[start:start + self.batch_size]
