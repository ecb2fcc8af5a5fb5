"""Seeded synthetic image dataset.

Each class is an oriented sinusoidal grating (five orientations times two
periods). Images get a random phase, contrast and brightness, pixel noise,
and occasionally a small distractor block of another class's texture, so
local patches are informative but not perfectly clean.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .model import LabeledDataset

ORIENTATIONS = np.deg2rad([0.0, 36.0, 72.0, 108.0, 144.0])
PERIODS = (4.0, 7.0)


def class_params(cls: int):
    return ORIENTATIONS[cls % 5], PERIODS[cls // 5 % 2]


def _grating(rows: int, cols: int, theta: float, period: float, phase: float) -> np.ndarray:
    y, x = np.mgrid[0:rows, 0:cols].astype(np.float64)
    return np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period + phase)


def synthetic_dataset(
    count: int,
    seed: int = 0,
    classes: int = 10,
    size: int = 32,
    noise: float = 0.1,
    distractor_rate: float = 0.5,
    contrast: Tuple[float, float] = (0.08, 0.18),
) -> LabeledDataset:
    """``count`` grayscale ``size x size`` images with balanced labels, deterministic in ``seed``."""
    if not 1 <= classes <= 10:
        raise ValueError("the generator defines up to 10 classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % classes
    rng.shuffle(labels)
    images = np.empty((count, size, size, 1))
    for n, cls in enumerate(labels):
        theta, period = class_params(int(cls))
        amp = rng.uniform(*contrast)
        base = rng.uniform(0.4, 0.6)
        img = base + amp * _grating(size, size, theta, period, rng.uniform(0, 2 * np.pi))
        if rng.random() < distractor_rate:
            other = int(rng.integers(classes))
            side = int(rng.integers(6, 11))
            r0, c0 = rng.integers(0, size - side + 1, size=2)
            th, pe = class_params(other)
            img[r0 : r0 + side, c0 : c0 + side] = base + amp * _grating(side, side, th, pe, rng.uniform(0, 2 * np.pi))
        img += rng.normal(0.0, noise, size=img.shape)
        images[n, :, :, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, classes)


def separable_blobs(count: int, seed: int = 0, size: int = 12) -> LabeledDataset:
    """Two trivially separable classes: dark versus bright images with noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    means = np.where(labels == 0, 0.25, 0.75)
    images = means[:, None, None, None] + rng.normal(0.0, 0.05, size=(count, size, size, 1))
    return LabeledDataset(np.clip(images, 0.0, 1.0), labels, 2)
