#!/usr/bin/env python3
"""
Dataset I/O
===========
MNIST-family datasets in the IDX container, stratified subsampling and
synthetic blobs for fast runs.

IDX layout (big endian):
    [offset] [type]          [description]
    0000     u32             magic (2051 images, 2049 labels)
    0004     u32             item count
    0008     u32             rows      (images only)
    0012     u32             columns   (images only)
    ....     u8[]            payload, row-wise

Pixels are scaled by 1/255 at load time. Files ending in .gz are read
through gzip. Nothing is ever downloaded.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from tensor_core import RavenError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
MNIST_SHAPE = (28, 28)

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATASET_DIRS = {"mnist": ("mnist", "MNIST"), "fmnist": ("fmnist", "fashion-mnist", "FashionMNIST")}

PathLike = Union[str, Path]


class IdxFormatError(RavenError):
    """Malformed IDX file; `offset` is the byte position where parsing failed"""

    def __init__(self, message: str, path: Optional[PathLike] = None, offset: int = 0):
        self.path = str(path) if path is not None else None
        self.offset = offset
        where = f"{self.path} " if self.path else ""
        super().__init__(f"{where}at byte {offset}: {message}")


class DatasetError(RavenError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """N x D images in [0, 1] with integer labels"""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"
    image_shape: Tuple[int, int] = MNIST_SHAPE

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 2:
            raise DatasetError(f"images must be N x D, got shape {images.shape}")
        if images.shape[0] != labels.size:
            raise DatasetError(f"{images.shape[0]} images but {labels.size} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError("pixels must lie in [0, 1]")
        if labels.size and labels.min() < 0:
            raise DatasetError("labels must be non-negative")
        shape = tuple(self.image_shape)
        if shape[0] * shape[1] != images.shape[1]:
            shape = (1, images.shape[1])
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "image_shape", shape)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.name, self.split, self.image_shape)


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _header(blob: bytes, path: PathLike, magic: int, fields: int) -> Tuple[int, ...]:
    size = 4 * (1 + fields)
    if len(blob) < size:
        raise IdxFormatError(f"header needs {size} bytes, file has {len(blob)}", path, len(blob))
    values = struct.unpack_from(f">{1 + fields}I", blob, 0)
    if values[0] != magic:
        raise IdxFormatError(f"magic {values[0]} where {magic} was expected", path, 0)
    return values[1:]


def read_idx_images(path: PathLike) -> Tuple[np.ndarray, Tuple[int, int]]:
    """u8 image payload as an (N, rows*cols) array, plus (rows, cols)"""
    blob = _read_bytes(path)
    count, rows, cols = _header(blob, path, IMAGE_MAGIC, 3)
    expected = 16 + count * rows * cols
    if len(blob) < expected:
        raise IdxFormatError(f"payload truncated: {count} images of {rows}x{cols} need {expected} bytes",
                             path, len(blob))
    pixels = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols), (rows, cols)


def read_idx_labels(path: PathLike) -> np.ndarray:
    blob = _read_bytes(path)
    (count,) = _header(blob, path, LABEL_MAGIC, 1)
    if len(blob) < 8 + count:
        raise IdxFormatError(f"payload truncated: {count} labels need {8 + count} bytes", path, len(blob))
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(images_path: PathLike, labels_path: PathLike, name: str = "mnist", split: str = "train") -> Dataset:
    """Load an image/label IDX pair into a Dataset with pixels scaled to [0, 1]"""
    pixels, shape = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if pixels.shape[0] != labels.size:
        raise IdxFormatError(f"{pixels.shape[0]} images but {labels.size} labels", labels_path, 4)
    logger.info("loaded %s/%s: %d images of %dx%d", name, split, pixels.shape[0], *shape)
    return Dataset(pixels / 255.0, labels, name, split, shape)


def write_idx(ds: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Write a Dataset as an IDX pair; pixels are rounded to the nearest 1/255"""
    if ds.labels.size and ds.labels.max() > 255:
        raise DatasetError("IDX labels are single bytes")
    rows, cols = ds.image_shape
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, len(ds), rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABEL_MAGIC, len(ds)) + ds.labels.astype(np.uint8).tobytes())


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem} not found under {directory}")


def locate_split_files(name: str, data_dir: PathLike, split: str = "train") -> Tuple[Path, Path]:
    """(images, labels) paths of one split under data_dir or data_dir/<name>"""
    if name not in DATASET_DIRS:
        raise DatasetError(f"unknown IDX dataset {name!r}")
    if split not in SPLIT_FILES:
        raise DatasetError(f"unknown split {split!r}")
    root = Path(data_dir)
    candidates = [root / sub for sub in DATASET_DIRS[name]] + [root]
    directory = next((c for c in candidates if c.is_dir() and any(c.glob(SPLIT_FILES[split][0] + "*"))), None)
    if directory is None:
        raise FileNotFoundError(f"no {name} {split} files under {root}")
    images_stem, labels_stem = SPLIT_FILES[split]
    return _find(directory, images_stem), _find(directory, labels_stem)


def load_named_dataset(name: str, data_dir: PathLike, split: str = "train") -> Dataset:
    """mnist / fmnist from the standard file names under data_dir (or data_dir/<name>)"""
    images_path, labels_path = locate_split_files(name, data_dir, split)
    return load_idx(images_path, labels_path, name, split)


# ---------------------------------------------------------------------------
# subsampling and synthetic data
# ---------------------------------------------------------------------------

def subsample(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Class-stratified subset of size n, in original order

    Raises:
        DatasetError: n exceeds the dataset size
    """
    if n > len(ds):
        raise DatasetError(f"cannot draw {n} samples from a dataset of {len(ds)}")
    if n < 1:
        raise DatasetError("subsample size must be at least 1")
    if n == len(ds):
        return ds
    indices = np.arange(len(ds))
    counts = np.bincount(ds.labels)
    counts = counts[counts > 0]
    if counts.min() >= 2 and n >= counts.size and len(ds) - n >= counts.size:
        chosen, _ = train_test_split(indices, train_size=n, stratify=ds.labels, random_state=seed)
    else:
        logger.warning("stratified split impossible for n=%d over %d classes; sampling uniformly", n, counts.size)
        chosen = np.random.default_rng(seed).choice(indices, size=n, replace=False)
    return ds.take(np.sort(chosen))


def _centre_patterns(rng: np.random.Generator, classes: int, dim: int) -> np.ndarray:
    """Distinct +-1 patterns when 2^dim allows, one per class"""
    bits = min(dim, 20)
    if classes <= 2 ** bits:
        codes = rng.choice(2 ** bits, size=classes, replace=False)
        head = ((codes[:, None] >> np.arange(bits)[None, :]) & 1) * 2 - 1
    else:
        head = rng.choice([-1, 1], size=(classes, bits))
    tail = rng.choice([-1, 1], size=(classes, dim - bits))
    return np.hstack([head, tail]).astype(np.float64)


def synth_blobs(classes: int = 4, per_class: int = 50, dim: int = 8, separation: float = 1.0,
                seed: int = 0, spread: float = 0.1) -> Dataset:
    """Gaussian blobs around 0.5 + separation/2 * pattern_k, clipped to [0, 1]

    Args:
        classes: Number of classes K
        per_class: Samples per class
        dim: Pixels per sample D
        separation: Distance scale between class centres (0 merges them)
        seed: Generator seed
        spread: Standard deviation of each blob

    Returns:
        Shuffled Dataset named "synth"
    """
    if min(classes, per_class, dim) < 1:
        raise DatasetError("classes, per_class and dim must all be >= 1")
    rng = np.random.default_rng(seed)
    centres = 0.5 + 0.5 * separation * _centre_patterns(rng, classes, dim)
    labels = np.repeat(np.arange(classes), per_class)
    images = centres[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order], "synth", "train", (1, dim))


def split_train_test(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Stratified train/test split for datasets that ship as one block (synth)"""
    indices = np.arange(len(ds))
    train_idx, test_idx = train_test_split(indices, test_size=test_fraction, stratify=ds.labels,
                                           random_state=seed)
    train, test = ds.take(np.sort(train_idx)), ds.take(np.sort(test_idx))
    return (Dataset(train.images, train.labels, ds.name, "train", ds.image_shape),
            Dataset(test.images, test.labels, ds.name, "test", ds.image_shape))
