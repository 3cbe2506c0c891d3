"""MNIST IDX loading, seeded splits and the class-weighted sampler."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError, DataError, FormatError, SamplerError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
N_CLASSES = 10

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise DataError(f"images must be a 2-D array, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.intp)
        return ImageDataset(self.images[indices], self.labels[indices])

    def class_counts(self, n_classes: int = N_CLASSES) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)

    def of_class(self, c: int) -> np.ndarray:
        return self.images[self.labels == c]


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, gzip.BadGzipFile) as exc:
            raise EOFError(f"{path}: corrupt or truncated gzip stream") from exc
    return raw


def _parse_idx(raw: bytes, path, magic: int) -> np.ndarray:
    if len(raw) < 8:
        raise EOFError(f"{path}: truncated IDX header")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise FormatError(f"{path}: IDX magic {found}, expected {magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise EOFError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise EOFError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> ImageDataset:
    """Parse an IDX image/label pair (plain or gzip) into a [0, 1] float dataset."""
    images = _parse_idx(_read_maybe_gzip(images_path), images_path, IMAGES_MAGIC)
    labels = _parse_idx(_read_maybe_gzip(labels_path), labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"image count {len(images)} does not match label count {len(labels)}")
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return ImageDataset(flat, labels.astype(np.int64))


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def resolve_data_dir(data_dir: Optional[str] = None) -> Path:
    value = data_dir or os.environ.get("NNFORGET_DATA_DIR")
    if not value:
        raise ConfigurationError("no data_dir given and NNFORGET_DATA_DIR is unset", "data_dir")
    return Path(value)


def load_mnist(data_dir=None, split: str = "train") -> ImageDataset:
    data_dir = resolve_data_dir(data_dir)
    files = TRAIN_FILES if split == "train" else TEST_FILES
    return load_idx(_find(data_dir, files[0]), _find(data_dir, files[1]))


@dataclass(frozen=True)
class SplitSpec:
    pretrain_count: int = 45000
    continuation_count: int = 10000
    proto_eval_count: int = 5000
    seed: int = 0


def split_indices(n: int, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    counts = (spec.pretrain_count, spec.continuation_count, spec.proto_eval_count)
    if any(c < 0 for c in counts):
        raise ConfigurationError("split counts must be non-negative", "split_sizes")
    if sum(counts) > n:
        raise ConfigurationError(f"split counts {counts} exceed dataset size {n}", "split_sizes")
    perm = np.random.default_rng(spec.seed).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return perm[:a], perm[a:b], perm[b:b + counts[2]]


def make_splits(dataset: ImageDataset, spec: SplitSpec):
    """Seeded disjoint (pretrain, continuation, proto_eval) partition."""
    return tuple(dataset.subset(ix) for ix in split_indices(len(dataset), spec))


class WeightedSampler:
    """With-replacement sampler that picks a class first, then an example.

    A class is drawn with probability proportional to its weight, counting
    only classes that actually have examples; the example is then uniform
    within that class.
    """

    def __init__(self, labels, weights: Optional[Sequence[float]] = None, seed: int = 0,
                 n_classes: int = N_CLASSES):
        labels = np.asarray(labels, dtype=np.int64)
        self.n_classes = n_classes
        self.class_indices = [np.flatnonzero(labels == c) for c in range(n_classes)]
        self.weights = np.ones(n_classes) if weights is None else np.array(weights, dtype=np.float64)
        if self.weights.shape != (n_classes,):
            raise ConfigurationError(f"need {n_classes} class weights", "weights")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("class weights must be finite and non-negative", "weights")
        self.rng = np.random.default_rng(seed)

    def set_class_weight(self, class_index: int, weight: float) -> "WeightedSampler":
        if not 0 <= class_index < self.n_classes:
            raise ConfigurationError(f"class index {class_index} out of range", "class_index")
        if not weight >= 0 or not np.isfinite(weight):
            raise ConfigurationError(f"class weight must be non-negative, got {weight}", "weight")
        self.weights[class_index] = float(weight)
        return self

    def effective_weights(self) -> np.ndarray:
        present = np.array([len(ix) > 0 for ix in self.class_indices])
        return np.where(present, self.weights, 0.0)

    def class_probabilities(self) -> np.ndarray:
        w = self.effective_weights()
        total = w.sum()
        if total <= 0:
            raise SamplerError("all class weights are zero or their classes are empty")
        return w / total

    def active_count(self) -> int:
        """Number of examples whose class can currently be drawn."""
        w = self.effective_weights()
        return int(sum(len(ix) for ix, wc in zip(self.class_indices, w) if wc > 0))

    def sample_indices(self, size: int) -> np.ndarray:
        p = self.class_probabilities()
        classes = self.rng.choice(self.n_classes, size=size, p=p)
        out = np.empty(size, dtype=np.intp)
        for c in np.unique(classes):
            slot = classes == c
            pool = self.class_indices[c]
            out[slot] = pool[self.rng.integers(0, len(pool), size=int(slot.sum()))]
        return out

    def sample_batch(self, dataset: ImageDataset, batch_size: int):
        idx = self.sample_indices(batch_size)
        return dataset.images[idx], dataset.labels[idx]


def random_translate(images: np.ndarray, rng: np.random.Generator, max_shift: int = 2,
                     side: int = 28) -> np.ndarray:
    """Shift each square image by up to ``max_shift`` pixels per axis, zero-filling."""
    n = len(images)
    grid = images.reshape(n, side, side)
    out = np.zeros_like(grid)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(shifts):
        src_y = slice(max(0, -dy), side - max(0, dy))
        dst_y = slice(max(0, dy), side - max(0, -dy))
        src_x = slice(max(0, -dx), side - max(0, dx))
        dst_x = slice(max(0, dx), side - max(0, -dx))
        out[i, dst_y, dst_x] = grid[i, src_y, src_x]
    return out.reshape(n, -1)
