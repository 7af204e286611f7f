"""CIFAR-10-format surrogate dataset for desk-scale experiments.

Ten classes are the unordered pairs of five primitive glyphs (bar,
column, diagonal, ring, checker). Each image places its class's two
glyphs at random positions, scales, and intensities over a colored-noise
background. Classes sharing a glyph are systematically confusable, so a
trained teacher's pairwise activation similarities carry structure beyond
the hard labels. Written as standard CIFAR-10 binary batches so the real
loader and CLI consume it unchanged.
"""

from __future__ import annotations

import itertools
import os

import numpy as np

from spdistill.data import RECORDS_PER_FILE, TEST_FILE, TRAIN_FILES, write_cifar_batch

GLYPHS = ("bar", "column", "diag", "ring", "checker")
CLASS_PAIRS = list(itertools.combinations(range(5), 2))  # 10 classes


def _glyph_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    c = (size - 1) / 2.0
    if kind == "bar":
        return (np.abs(yy - c) <= size / 6.0).astype(np.float32)
    if kind == "column":
        return (np.abs(xx - c) <= size / 6.0).astype(np.float32)
    if kind == "diag":
        return (np.abs(yy - xx) <= size / 5.0).astype(np.float32)
    if kind == "ring":
        r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
        return ((r <= c) & (r >= c * 0.55)).astype(np.float32)
    if kind == "checker":
        cell = max(2, size // 4)
        return (((yy // cell) + (xx // cell)) % 2).astype(np.float32)
    raise ValueError(kind)


def _render(label: int, rng: np.random.Generator) -> np.ndarray:
    img = rng.normal(0.0, 12.0, size=(3, 32, 32)).astype(np.float32)
    img += rng.uniform(60.0, 160.0)
    base_hue = rng.uniform(-25.0, 25.0, size=(3, 1, 1)).astype(np.float32)
    img += base_hue
    for glyph_idx in CLASS_PAIRS[label]:
        size = int(rng.integers(10, 19))
        mask = _glyph_mask(GLYPHS[glyph_idx], size)
        if rng.random() < 0.5:
            mask = mask[:, ::-1]
        top = int(rng.integers(0, 32 - size + 1))
        left = int(rng.integers(0, 32 - size + 1))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        strength = sign * rng.uniform(55.0, 110.0)
        color = rng.uniform(0.55, 1.0, size=(3, 1, 1)).astype(np.float32)
        region = img[:, top:top + size, left:left + size]
        region += strength * color * mask
    img += rng.normal(0.0, 10.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    for i in range(n):
        images[i] = _render(int(labels[i]), rng)
    return images, labels


def write_dataset(out_dir: str, seed: int = 20240501) -> str:
    """Write a full 50k train / 10k test surrogate in CIFAR-10 binary
    layout; returns out_dir. Skips work if the files already exist."""
    os.makedirs(out_dir, exist_ok=True)
    expected = [os.path.join(out_dir, name) for name in (*TRAIN_FILES, TEST_FILE)]
    if all(os.path.exists(p) for p in expected):
        return out_dir
    images, labels = generate(6 * RECORDS_PER_FILE, seed)
    for i, name in enumerate(TRAIN_FILES):
        sl = slice(i * RECORDS_PER_FILE, (i + 1) * RECORDS_PER_FILE)
        write_cifar_batch(os.path.join(out_dir, name), images[sl], labels[sl])
    sl = slice(5 * RECORDS_PER_FILE, 6 * RECORDS_PER_FILE)
    write_cifar_batch(os.path.join(out_dir, TEST_FILE), images[sl], labels[sl])
    return out_dir
