"""Geometric and photometric image transforms, and dataset-level augmentation.

All transforms take and return H x W x C arrays with values in [0, 1] and
keep the input dimensions.  Geometric transforms are affine warps sampled
bilinearly; samples that fall outside the source read ``fill`` (default 0).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError

FULL_TRANSFORMS = ("scale", "crop", "translate", "rotate", "distort", "hflip", "vflip", "noise")
REDUCED_TRANSFORMS = ("rotate", "scale", "crop", "hflip")


def _center(img):
    return np.array([(img.shape[0] - 1) / 2.0, (img.shape[1] - 1) / 2.0])


def _about_center(img, m, fill):
    m = np.asarray(m, dtype=np.float64)
    c = _center(img)
    return _finish(_kernels.warp_affine(img, m, c - m @ c, fill))


def _finish(img):
    return np.clip(img, 0.0, 1.0, out=img)


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with corner pixels aligned."""
    H, W = img.shape[:2]
    if (H, W) == (height, width):
        return img.copy()
    sy = (H - 1) / (height - 1) if height > 1 else 0.0
    sx = (W - 1) / (width - 1) if width > 1 else 0.0
    return _kernels.warp_affine(img, np.diag([sy, sx]), np.zeros(2), 0.0, out_shape=(height, width))


def rotate(img: np.ndarray, degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) about the image centre."""
    if not math.isfinite(degrees):
        raise ContractError("rotation angle must be finite")
    rad = math.radians(degrees)
    c, s = math.cos(rad), math.sin(rad)
    # snap so quarter turns are exact permutations
    c = float(round(c)) if abs(c - round(c)) < 1e-12 else c
    s = float(round(s)) if abs(s - round(s)) < 1e-12 else s
    return _about_center(img, [[c, s], [-s, c]], fill)


def scale(img: np.ndarray, factor: float, fill: float = 0.0) -> np.ndarray:
    """Zoom about the centre; factor > 1 enlarges (edges leave the frame)."""
    if not factor > 0:
        raise ContractError("scale factor must be positive")
    return _about_center(img, np.eye(2) / factor, fill)


def crop(img: np.ndarray, region) -> np.ndarray:
    """Cut ``region`` = (top, left, height, width) and resize it to the full frame."""
    top, left, h, w = (float(v) for v in region)
    H, W = img.shape[:2]
    if h <= 0 or w <= 0:
        raise ContractError(f"empty crop region {region}")
    if top < 0 or left < 0 or top + h > H + 1e-9 or left + w > W + 1e-9:
        raise ContractError(f"crop region {region} exceeds image {H}x{W}")
    sy = (h - 1) / (H - 1) if H > 1 else 0.0
    sx = (w - 1) / (W - 1) if W > 1 else 0.0
    return _finish(_kernels.warp_affine(img, np.diag([sy, sx]), np.array([top, left]), 0.0))


def translate(img: np.ndarray, dx: float, dy: float, fill: float = 0.0) -> np.ndarray:
    """Shift right by ``dx`` columns and down by ``dy`` rows."""
    H, W = img.shape[:2]
    if abs(dx) >= W or abs(dy) >= H:
        raise ContractError(f"translation ({dx}, {dy}) must be smaller than the image")
    return _finish(_kernels.warp_affine(img, np.eye(2), np.array([-dy, -dx], dtype=np.float64), fill))


def flip(img: np.ndarray, axis: str = "horizontal") -> np.ndarray:
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1].copy()
    raise ValueError(f"flip axis must be 'horizontal' or 'vertical', got {axis!r}")


def gaussian_noise(img: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Add N(0, sigma^2) per pixel (shared across channels), then clamp."""
    if sigma < 0:
        raise ContractError("noise sigma must be non-negative")
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=img.shape[:2] + (1,))
    return _finish((img + noise).astype(img.dtype))


def distort(img: np.ndarray, magnitude: float, seed) -> np.ndarray:
    """Random shear about the centre, both coefficients uniform in +-magnitude."""
    if magnitude < 0:
        raise ContractError("distortion magnitude must be non-negative")
    if magnitude == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    sr, sc = rng.uniform(-magnitude, magnitude, size=2)
    return _about_center(img, [[1.0, sr], [sc, 1.0]], 0.0)


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPlan:
    mode: str = "reduced"
    rotation: float = 25.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    crop_area: tuple[float, float] = (0.8, 1.0)
    translate: float = 0.1
    noise_sigma: float = 0.03
    shear: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "reduced"):
            raise ConfigError(f"augmentation mode must be 'full' or 'reduced', got {self.mode!r}")
        values = (self.rotation, *self.scale_range, *self.crop_area, self.translate,
                  self.noise_sigma, self.shear)
        if not all(math.isfinite(v) for v in values):
            raise ConfigError("augmentation ranges must be finite")
        if self.noise_sigma < 0 or self.shear < 0 or self.scale_range[0] <= 0:
            raise ConfigError("noise sigma and shear must be >= 0, scale must be positive")
        if not 0 < self.crop_area[0] <= self.crop_area[1] <= 1:
            raise ConfigError("crop area fractions must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.translate < 1:
            raise ConfigError("translate fraction must be in [0, 1)")

    @property
    def transforms(self) -> tuple[str, ...]:
        return FULL_TRANSFORMS if self.mode == "full" else REDUCED_TRANSFORMS

    @property
    def multiplicity(self) -> int:
        return len(self.transforms)


def sub_seed(master: int, image_index: int, transform_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(image_index), int(transform_index)])


def apply_transform(img: np.ndarray, name: str, plan: AugmentPlan, rng: np.random.Generator):
    """Apply one named transform with parameters drawn from ``rng``."""
    H, W = img.shape[:2]
    if name == "rotate":
        return rotate(img, rng.uniform(-plan.rotation, plan.rotation))
    if name == "scale":
        return scale(img, rng.uniform(*plan.scale_range))
    if name == "crop":
        side = math.sqrt(rng.uniform(*plan.crop_area))
        h, w = side * H, side * W
        return crop(img, (rng.uniform(0, H - h), rng.uniform(0, W - w), h, w))
    if name == "translate":
        return translate(img, rng.uniform(-plan.translate, plan.translate) * W,
                         rng.uniform(-plan.translate, plan.translate) * H)
    if name == "distort":
        return distort(img, plan.shear, rng.integers(2**63))
    if name == "hflip":
        return flip(img, "horizontal")
    if name == "vflip":
        return flip(img, "vertical")
    if name == "noise":
        return gaussian_noise(img, plan.noise_sigma, rng.integers(2**63))
    raise ValueError(f"unknown transform {name!r}")


def augment_image(img: np.ndarray, index: int, plan: AugmentPlan) -> list[np.ndarray]:
    """All augmented variants of the image at dataset position ``index``."""
    out = []
    for t, name in enumerate(plan.transforms):
        rng = np.random.default_rng(sub_seed(plan.seed, index, t))
        out.append(apply_transform(img, name, plan, rng).astype(img.dtype, copy=False))
    return out


def variant_source(source: str, k: int) -> str:
    stem, dot, ext = source.rpartition(".")
    return f"{stem}_aug{k}.{ext}" if dot and "/" not in ext else f"{source}_aug{k}"


def augment_dataset(ds, plan: AugmentPlan, workers: int = 1):
    """Originals followed by their variants, each variant one seeded transform.

    Sub-seeds derive from (plan seed, image index, transform index), so the
    result does not depend on ``workers``.
    """
    from .dataset import Dataset, LabeledImage

    def work(i):
        item = ds.images[i]
        items = [item]
        for k, pix in enumerate(augment_image(item.pixels, i, plan), start=1):
            items.append(LabeledImage(pix, item.label, variant_source(item.source, k)))
        return items

    idx = range(len(ds.images))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(work, idx))
    else:
        chunks = [work(i) for i in idx]
    return Dataset([it for chunk in chunks for it in chunk], list(ds.class_names))
