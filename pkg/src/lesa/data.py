"""Seeded synthetic image-classification data and on-disk dataset directories.

Each class is a pair (texture, layout): ``texture = c % T`` picks the
orientation of a striped patch and ``layout = c // T`` picks where on the
image the patch sits.  Neither cue alone identifies the class, so a model has
to read local texture and global arrangement.  Every image also gets a
random-orientation background grating, a random colour tint and Gaussian
pixel noise.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .io import read_labels, read_tensor, write_labels, write_tensor

__all__ = ["Dataset", "generate_dataset", "generate_splits", "save_split", "load_split", "load_dataset_dir"]


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, S, S) float64
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images, self.labels

    def split(self, index: np.ndarray) -> Dataset:
        return Dataset(self.images[index], self.labels[index])


def _num_textures(num_classes: int) -> int:
    return max(1, math.ceil(num_classes / 2))


def generate_dataset(
    num_classes: int = 10,
    count: int = 1000,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.35,
    channels: int = 3,
) -> Dataset:
    if size < 16:
        raise ValueError(f"image size must be at least 16, got {size}")
    if num_classes < 2 or count < 1:
        raise ValueError("need at least 2 classes and 1 image")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % num_classes).astype(np.int64)
    n_tex = _num_textures(num_classes)
    n_lay = math.ceil(num_classes / n_tex)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy -= (size - 1) / 2
    xx -= (size - 1) / 2
    radius = size / 4.0
    sigma = size / 7.0
    period = size / 6.0

    images = np.empty((count, channels, size, size))
    for n, c in enumerate(labels):
        tex, lay = int(c % n_tex), int(c // n_tex)
        theta = math.pi * tex / n_tex + rng.normal(0.0, 0.05)
        phi = 2 * math.pi * lay / n_lay + math.pi / 4 + rng.normal(0.0, 0.15)
        cy = radius * math.sin(phi) + rng.normal(0.0, 1.0)
        cx = radius * math.cos(phi) + rng.normal(0.0, 1.0)
        envelope = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        f = 2 * math.pi / (period * rng.uniform(0.9, 1.1))
        stripes = np.cos(f * (xx * math.cos(theta) + yy * math.sin(theta)) + rng.uniform(0, 2 * math.pi))
        patch = envelope * (0.6 + stripes)

        bg_theta = rng.uniform(0, math.pi)
        bg = 0.25 * np.cos(
            2 * math.pi / (period * rng.uniform(1.5, 2.5)) * (xx * math.cos(bg_theta) + yy * math.sin(bg_theta))
            + rng.uniform(0, 2 * math.pi)
        )
        tint = rng.uniform(0.6, 1.4, size=channels)
        images[n] = tint[:, None, None] * (patch + bg)[None] + noise * rng.standard_normal((channels, size, size))
    return Dataset(images, labels)


def generate_splits(num_classes: int, train_count: int, eval_count: int, size: int, seed: int) -> tuple[Dataset, Dataset]:
    """Independent train and eval sets derived from one seed."""
    train_seed, eval_seed = np.random.SeedSequence(seed).spawn(2)
    train = generate_dataset(num_classes, train_count, size, seed=train_seed.generate_state(1)[0])
    evals = generate_dataset(num_classes, eval_count, size, seed=eval_seed.generate_state(1)[0])
    return train, evals


def save_split(directory: str, data: Dataset) -> None:
    os.makedirs(directory, exist_ok=True)
    write_tensor(os.path.join(directory, "images.lten"), data.images)
    write_labels(os.path.join(directory, "labels.csv"), data.labels)


def load_split(directory: str) -> Dataset:
    images = read_tensor(os.path.join(directory, "images.lten"))
    labels = read_labels(os.path.join(directory, "labels.csv"))
    if len(images) != len(labels):
        raise ValueError(f"{directory}: {len(images)} images but {len(labels)} labels")
    return Dataset(images, labels)


def load_dataset_dir(path: str) -> tuple[Dataset, Dataset]:
    """``path/train`` and ``path/eval`` splits as written by ``lesa gen-data``."""
    return load_split(os.path.join(path, "train")), load_split(os.path.join(path, "eval"))
