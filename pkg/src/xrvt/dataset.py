"""Image-tree ingestion, manifests, and stratified splitting."""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import resize
from .errors import ContractError, DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
DEFAULT_SIZE = 256


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    label: int
    source: str = ""


@dataclass
class Dataset:
    images: list[LabeledImage]
    class_names: list[str]

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError(f"duplicate class names {self.class_names}")
        for item in self.images:
            if not 0 <= item.label < len(self.class_names):
                raise DataError(f"label {item.label} out of range for {len(self.class_names)} classes")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.images], dtype=np.int64)

    @property
    def sources(self) -> list[str]:
        return [it.source for it in self.images]

    def pixels(self, dtype=None) -> np.ndarray:
        if not self.images:
            return np.zeros((0, 0, 0, 0), dtype=dtype or np.float32)
        return np.stack([it.pixels for it in self.images]).astype(dtype or self.images[0].pixels.dtype,
                                                                     copy=False)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.images[int(i)] for i in indices], list(self.class_names))


@dataclass
class FoldPlan:
    folds: list[np.ndarray]
    seed: int = 0
    k: int = field(init=False)

    def __post_init__(self):
        self.k = len(self.folds)

    def train_indices(self, i: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))


# --------------------------------------------------------------------------
# image I/O
# --------------------------------------------------------------------------

def load_image(path, size: int | tuple[int, int] | None = DEFAULT_SIZE, dtype=np.float32) -> np.ndarray:
    """Decode to RGB, map p -> p / 255, bilinear-resize to ``size``."""
    from PIL import Image

    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            # 32-bit "I" images carry no depth; values above 255 imply 16-bit
            peak = 65535.0 if im.mode.startswith("I;16") or arr.max() > 255 else 255.0
            arr = np.repeat((arr / peak)[..., None], 3, axis=2)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if size is not None:
        h, w = (size, size) if isinstance(size, int) else size
        arr = np.clip(resize(arr, h, w), 0.0, 1.0)
    return arr.astype(dtype)


def save_image(pixels: np.ndarray, path) -> None:
    """Write an 8-bit RGB PNG (values rounded from [0, 1])."""
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def _is_image(name: str) -> bool:
    return name.lower().endswith(IMAGE_SUFFIXES)


def scan_tree(root) -> tuple[list[str], list[str]]:
    """(sorted class directory names, sorted relative image paths)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    paths = []
    for c in classes:
        for dirpath, _, files in os.walk(root / c):
            rel = Path(dirpath).relative_to(root)
            paths += [(rel / f).as_posix() for f in files if _is_image(f)]
    return classes, sorted(paths)


def _load_many(root: Path, rel_paths, class_names, size, dtype) -> Dataset:
    index = {c: i for i, c in enumerate(class_names)}
    images = []
    for rel in rel_paths:
        cls = rel.split("/", 1)[0]
        if cls not in index:
            raise DataError(f"{rel}: class directory {cls!r} is not one of {class_names}")
        try:
            pix = load_image(root / rel, size, dtype)
        except Exception as exc:  # PIL raises a zoo of types on bad files
            warnings.warn(f"skipping undecodable image {rel}: {exc}", stacklevel=3)
            continue
        images.append(LabeledImage(pix, index[cls], rel))
    return Dataset(images, list(class_names))


def ingest(root, size: int | None = DEFAULT_SIZE, dtype=np.float32) -> Dataset:
    """Load ``<root>/<class>/*`` images; class index is the sorted rank of its directory."""
    root = Path(root)
    classes, paths = scan_tree(root)
    if not classes or not paths:
        raise DataError(f"no class directories with images under {root}")
    ds = _load_many(root, paths, classes, size, dtype)
    counts = class_distribution(ds)
    empty = [c for c, n in zip(classes, counts) if n == 0]
    if empty:
        raise DataError(f"classes without decodable images: {empty}")
    return ds


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def write_manifest(paths, file) -> None:
    file = Path(file)
    file.parent.mkdir(parents=True, exist_ok=True)
    file.write_text("".join(f"{p}\n" for p in paths))


def read_manifest(file) -> list[str]:
    return [ln.strip() for ln in Path(file).read_text().splitlines() if ln.strip()]


def manifest_root(file, root=None) -> Path:
    """Directory manifest entries are relative to.

    Explicit ``root`` wins; otherwise a ``root.txt`` next to the manifest;
    otherwise the manifest's own directory.
    """
    if root is not None:
        return Path(root)
    file = Path(file)
    hint = file.parent / "root.txt"
    if hint.is_file():
        return Path(hint.read_text().strip())
    return file.parent


def manifest_classes(file, root=None) -> list[str]:
    """Class index for a manifest.

    A ``classes.txt`` beside the manifest wins, then the sorted class
    directories of the root, then the first path components it lists.
    This keeps train and test manifests on one index.
    """
    sidecar = Path(file).parent / "classes.txt"
    if sidecar.is_file():
        return read_manifest(sidecar)
    base = manifest_root(file, root)
    names = []
    if base.is_dir():
        names = sorted(p.name for p in base.iterdir() if p.is_dir() and not p.name.startswith("."))
    return names or sorted({p.split("/", 1)[0] for p in read_manifest(file)})


def load_manifest(file, root=None, size=DEFAULT_SIZE, dtype=np.float32, class_names=None) -> Dataset:
    """Load the images a manifest lists (see :func:`manifest_classes`)."""
    if class_names is None:
        class_names = manifest_classes(file, root)
    return _load_many(manifest_root(file, root), read_manifest(file), class_names, size, dtype)


# --------------------------------------------------------------------------
# statistics and splitting
# --------------------------------------------------------------------------

def class_distribution(ds_or_labels, num_classes: int | None = None) -> np.ndarray:
    if isinstance(ds_or_labels, Dataset):
        labels, num_classes = ds_or_labels.labels, len(ds_or_labels.class_names)
    else:
        labels = np.asarray(ds_or_labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
    return np.bincount(labels, minlength=num_classes).astype(np.int64)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split_indices(labels, num_classes: int, test_fraction: float, seed: int):
    """Per class, round-half-up(count * fraction) shuffled indices go to test."""
    if not 0 < test_fraction < 1:
        raise ContractError("test_fraction must lie strictly between 0 and 1")
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    if (counts == 0).any():
        raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no images")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = round_half_up(len(idx) * test_fraction)
        if n_test == 0:
            warnings.warn(f"class {c} gets no test images at fraction {test_fraction}", stacklevel=2)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def stratified_split(ds: Dataset, test_fraction: float = 0.25, seed: int = 0):
    tr, te = stratified_split_indices(ds.labels, len(ds.class_names), test_fraction, seed)
    return ds.subset(tr), ds.subset(te)


def stratified_kfold_indices(labels, num_classes: int, k: int, seed: int) -> FoldPlan:
    """Shuffle each class, then deal its indices round-robin across the folds.

    The dealing position carries over from one class to the next, which
    keeps total fold sizes within one of each other as well.
    """
    if k < 2:
        raise ContractError("k must be at least 2")
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    if (counts == 0).any():
        raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no images")
    if k > counts.min():
        warnings.warn(f"k={k} exceeds the smallest class size {counts.min()}; "
                      "some validation folds will miss that class", stacklevel=2)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for c in range(num_classes):
        for i in rng.permutation(np.flatnonzero(labels == c)):
            folds[pos % k].append(int(i))
            pos += 1
    return FoldPlan([np.sort(np.array(f, dtype=np.int64)) for f in folds], seed)


def stratified_kfold(ds: Dataset, k: int = 10, seed: int = 0) -> FoldPlan:
    return stratified_kfold_indices(ds.labels, len(ds.class_names), k, seed)


def split_manifests(ds: Dataset, test_fraction: float, seed: int, out_dir, root=None):
    """Write ``splits/<seed>/train.txt`` and ``test.txt`` under ``out_dir``."""
    train, test = stratified_split(ds, test_fraction, seed)
    d = Path(out_dir) / "splits" / str(seed)
    write_manifest(train.sources, d / "train.txt")
    write_manifest(test.sources, d / "test.txt")
    if root is not None:
        (d / "root.txt").write_text(str(Path(root).resolve()) + "\n")
    write_manifest(ds.class_names, d / "classes.txt")
    return train, test, d
