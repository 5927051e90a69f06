"""Synthetic labelled image sets and splits."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .. import rng


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray                 # (n, d, h, w)
    labels: np.ndarray | None = None
    name: str = "synthetic"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (n, d, h, w), got {self.images.shape}")
        if len(self.images) < 2:
            raise DatasetError("a contrastive dataset needs at least two images")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DatasetError("labels and images differ in length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def unlabeled(self) -> Dataset:
        """Copy without labels; pretraining only ever sees this view."""
        return Dataset(self.images, None, self.name, self.seed, dict(self.meta))

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.name, self.seed, dict(self.meta))


def make_synthetic(n: int, classes: int, d: int = 3, h: int = 32, w: int = 32, nuisance: float = 1.0,
                   seed: int = 0, dtype=np.float32) -> Dataset:
    """Oriented gratings, one orientation per class, under nuisance corruption.

    Class ``k`` is a sinusoidal grating at angle ``k * pi / classes``.  The
    nuisance level scales every per-image corruption: random phase (full
    range at level 1), spatial frequency spread, additive pixel noise, and a
    per-channel gain and offset.  At level 0 every image of a class is
    identical.  Classes are balanced and the result depends only on the
    arguments.
    """
    if classes < 1 or n < 2 * classes:
        raise DatasetError(f"need n >= 2 * classes, got n={n}, classes={classes}")
    if min(d, h, w) < 1:
        raise DatasetError(f"invalid image dimensions {(d, h, w)}")
    if nuisance < 0:
        raise DatasetError("nuisance must be >= 0")
    g = rng.stream(seed, "synthetic", n, classes, d, h, w)
    labels = np.arange(n) % classes
    g.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_freq = 2 * np.pi / 8.0
    images = np.empty((n, d, h, w), dtype=np.float64)
    for i in range(n):
        theta = labels[i] * np.pi / classes
        freq = base_freq * (1.0 + 0.25 * nuisance * g.uniform(-1, 1))
        phase = nuisance * g.uniform(-np.pi, np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        pattern = 0.5 + 0.25 * np.sin(freq * u + phase)
        gain = 1.0 + nuisance * g.uniform(-0.5, 0.5, size=(d, 1, 1))
        offset = nuisance * g.uniform(-0.25, 0.25, size=(d, 1, 1))
        noise = nuisance * 0.25 * g.standard_normal((d, h, w))
        images[i] = pattern[None] * gain + offset + noise
    return Dataset(images.astype(dtype), labels.astype(np.int64), name=f"synthetic{classes}", seed=seed,
                   meta={"nuisance": nuisance})


def split_indices(n: int, seed: int, fractions=(0.70, 0.15, 0.15)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded train/validation/test split."""
    perm = rng.stream(seed, "split", n).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def load_image_folder(root: str | os.PathLike, size: tuple[int, int] | None = None) -> Dataset:
    """Load ``root/<class>/<image>`` files into a labelled dataset (needs Pillow)."""
    from PIL import Image

    classes = sorted(e.name for e in os.scandir(root) if e.is_dir())
    if not classes:
        raise DatasetError(f"no class folders under {root}")
    images, labels = [], []
    for k, cls in enumerate(classes):
        for entry in sorted(os.scandir(os.path.join(root, cls)), key=lambda e: e.name):
            with Image.open(entry.path) as im:
                im = im.convert("RGB")
                if size is not None:
                    im = im.resize(size)
                images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(k)
    return Dataset(np.stack(images), np.array(labels), name=os.path.basename(os.fspath(root)),
                   meta={"classes": classes})


def from_config(dc, seed: int = 0) -> Dataset:
    """Synthetic dataset described by a ``[data]`` config section."""
    return make_synthetic(dc.n, dc.classes, d=dc.channels, h=dc.height, w=dc.width, nuisance=dc.nuisance,
                          seed=seed)
