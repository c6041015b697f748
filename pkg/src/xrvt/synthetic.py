"""Separable synthetic image sets, used for tests and for desk-scale demos.

Class ``c`` gets its own base colour plus one of a few spatial patterns
(stripes, checker, blob), with mild per-image brightness jitter and noise.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import Dataset, LabeledImage, save_image

UCI_CLASSES = ("Cofield", "Depuy", "Tornier", "Zimmer")
UCI_COUNTS = (83, 294, 71, 149)


def _pattern(c: int, size: int) -> np.ndarray:
    r, q = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    kind = c % 4
    if kind == 0:
        p = (np.floor(q * 4) % 2)
    elif kind == 1:
        p = (np.floor(r * 4) % 2)
    elif kind == 2:
        p = (np.floor(r * 4) + np.floor(q * 4)) % 2
    else:
        p = np.exp(-((r - 0.5) ** 2 + (q - 0.5) ** 2) / 0.05)
    return p


def synthetic_image(c: int, size: int, rng: np.random.Generator, num_classes: int = 4) -> np.ndarray:
    hue = np.array([0.2 + 0.6 * ((c * 0.37) % 1.0), 0.5, 0.8 - 0.6 * (c / max(num_classes - 1, 1))])
    img = 0.15 + 0.5 * _pattern(c, size)[..., None] * hue[None, None, :]
    img = img * rng.uniform(0.9, 1.1) + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(counts=(10, 10, 10, 10), size: int = 32, seed: int = 0,
                      class_names=None, dtype=np.float64) -> Dataset:
    rng = np.random.default_rng(seed)
    names = list(class_names) if class_names else [f"class{c}" for c in range(len(counts))]
    images = []
    for c, n in enumerate(counts):
        for i in range(n):
            images.append(LabeledImage(synthetic_image(c, size, rng, len(counts)).astype(dtype), c,
                                       f"{names[c]}/img{i:04d}.png"))
    return Dataset(images, names)


def write_tree(root, counts=UCI_COUNTS, size: int = 32, seed: int = 0, class_names=UCI_CLASSES) -> Path:
    """Write a ``<root>/<class>/imgNNNN.png`` tree of synthetic images."""
    root = Path(root)
    ds = synthetic_dataset(counts, size, seed, class_names)
    for item in ds.images:
        save_image(item.pixels, root / item.source)
    return root
