"""Datasets and continual task streams.

MNIST is read from the raw IDX files; a synthetic Gaussian-cluster dataset
stands in when no files are available. A ``TaskStream`` turns one base
dataset into a sequence of tasks by relabelling or by permuting pixels.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
STREAM_KINDS = ("random_label", "permuted_pixels", "stationary")

# stream ids reserved for task construction
_LABEL_STREAM = 0x4C41424C
_PERMUTE_STREAM = 0x5045524D


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"inputs must be a non-empty N x D matrix, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{y.shape[0]} labels for {x.shape[0]} inputs")
        if self.num_classes < 1 or y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs contain non-finite values")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def _read_idx(path: str, magic: int, ndim: int) -> np.ndarray:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"IDX file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated at offset {len(raw)} while reading magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated at offset {len(raw)} inside the header ({header} bytes)")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IdxFormatError(
            f"{path}: truncated at offset {len(raw)}, expected {header + size} bytes for dims {dims}"
        )
    if len(raw) > header + size:
        raise IdxFormatError(f"{path}: {len(raw) - header - size} trailing bytes after offset {header + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255 and flattened."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N x rows x cols) and labels (N) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValueError("expected N x rows x cols images and N labels")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def synthetic_dataset(num_classes: int, per_class: int, dim: int, rng: RandomStream, noise: float = 0.15) -> Dataset:
    """Isotropic Gaussian clusters around random unit-norm centres, clipped to [0, 1]."""
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("num_classes, per_class and dim must all be positive")
    centers = rng.gaussian((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centers[labels] + noise * rng.gaussian((labels.size, dim))
    return Dataset(np.clip(x, 0.0, 1.0), labels, num_classes)


def subset_and_project(ds: Dataset, subset_size: int, projection_dim: int, rng: RandomStream) -> Dataset:
    """Uniform subsample without replacement, then an optional random projection.

    Projection entries are i.i.d. N(0, 1) / sqrt(D). ``projection_dim = 0``
    keeps the original inputs.
    """
    n, d = ds.inputs.shape
    if not 1 <= subset_size <= n:
        raise ValueError(f"subset_size {subset_size} must lie in [1, {n}]")
    if not 0 <= projection_dim <= d:
        raise ValueError(f"projection_dim {projection_dim} must lie in [0, {d}]")
    idx = np.sort(rng.child(0).permutation(n)[:subset_size])
    x = ds.inputs[idx]
    if projection_dim:
        proj = rng.child(1).gaussian((d, projection_dim)) / np.sqrt(d)
        x = x @ proj
    return Dataset(x, ds.labels[idx], ds.num_classes)


@dataclass(frozen=True, eq=False)
class TaskStream:
    base: Dataset
    kind: str = "random_label"
    master_seed: int = 0

    def __post_init__(self):
        kind = self.kind.strip().lower().replace("-", "_")
        if kind not in STREAM_KINDS:
            raise ValueError(f"unknown stream kind {self.kind!r}; expected one of {STREAM_KINDS}")
        object.__setattr__(self, "kind", kind)

    def permutation(self, k: int) -> np.ndarray:
        if k == 0:
            return np.arange(self.base.dim)
        return RandomStream(self.master_seed, _PERMUTE_STREAM).child(k).permutation(self.base.dim)

    def labels(self, k: int) -> np.ndarray:
        rng = RandomStream(self.master_seed, _LABEL_STREAM).child(k)
        return rng.integers(self.base.num_classes, len(self.base))


def task_view(stream: TaskStream, k: int) -> Dataset:
    """Dataset seen during task ``k``; a pure function of the stream and ``k``."""
    if k < 0:
        raise ValueError("task index must be >= 0")
    base = stream.base
    if stream.kind == "random_label":
        # inputs are shared, labels ignore the originals entirely
        return Dataset(base.inputs, stream.labels(k), base.num_classes)
    if stream.kind == "permuted_pixels":
        if k == 0:
            return base
        return Dataset(base.inputs[:, stream.permutation(k)], base.labels, base.num_classes)
    return base


def minibatches(n: int | Dataset, batch_size: int, epoch: int, rng: RandomStream) -> list[np.ndarray]:
    """Index slices for one epoch; the shuffle depends only on ``rng`` and ``epoch``."""
    n = len(n) if isinstance(n, Dataset) else int(n)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size {batch_size} must lie in [1, {n}]")
    order = rng.child(epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
