"""MNIST IDX parsing, normalisation, one-hot labels and seeded batching."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10
GZIP_MAGIC = b"\x1f\x8b"
DATA_DIR_ENV = "PCNET_DATA_DIR"

# (split) -> candidate (images, labels) file stems
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Malformed IDX payload. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == GZIP_MAGIC:
        return gzip.decompress(data)
    return data


def _header(data: bytes, magic: int, n_dims: int) -> tuple:
    need = 4 * (1 + n_dims)
    if len(data) < need:
        raise IdxFormatError(f"header truncated: expected {need} bytes, got {len(data)}", len(data))
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise IdxFormatError(f"magic mismatch: expected 0x{magic:08x}, found 0x{found:08x}", 0)
    return struct.unpack_from(f">{n_dims}I", data, 4)


def parse_idx_images(data: bytes) -> np.ndarray:
    """Parse an IDX3 image file into a ``count x rows x cols`` uint8 array."""
    data = _maybe_gunzip(bytes(data))
    count, rows, cols = _header(data, IMAGE_MAGIC, 3)
    expected = count * rows * cols
    if expected > (1 << 40):
        raise IdxFormatError(f"dimensions {count}x{rows}x{cols} overflow", 4)
    payload = len(data) - 16
    if payload != expected:
        kind = "truncated" if payload < expected else "trailing bytes in"
        raise IdxFormatError(
            f"{kind} image payload: expected {expected} bytes, got {payload}", 16 + min(payload, expected)
        )
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols).copy()


def parse_idx_labels(data: bytes) -> np.ndarray:
    data = _maybe_gunzip(bytes(data))
    (count,) = _header(data, LABEL_MAGIC, 1)
    payload = len(data) - 8
    if payload != count:
        kind = "truncated" if payload < count else "trailing bytes in"
        raise IdxFormatError(f"{kind} label payload: expected {count} bytes, got {payload}", 8 + min(payload, count))
    labels = np.frombuffer(data, dtype=np.uint8, offset=8).copy()
    bad = np.flatnonzero(labels >= N_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise IdxFormatError(f"label {labels[i]} at index {i} is outside 0..9", 8 + i)
    return labels


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    return struct.pack(">4I", IMAGE_MAGIC, count, rows, cols) + images.tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABEL_MAGIC, labels.size) + labels.tobytes()


def normalize(raw) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


def one_hot(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels.astype(np.intp)] = 1.0
    return out


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # count x 784, values in [0, 1]
    labels: np.ndarray  # count ints in 0..9
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, n: Optional[int]) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


def load_idx_pair(images_path, labels_path, split: str = "train") -> Dataset:
    raw = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if raw.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{raw.shape[0]} images vs {labels.shape[0]} labels", 4)
    return Dataset(normalize(raw.reshape(raw.shape[0], -1)), labels.astype(np.int64), split)


def find_mnist(directory, split: str) -> tuple:
    """Locate ``split``'s image/label files in ``directory`` (raw or ``.gz``)."""
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
            if (directory / name).is_file():
                found.append(directory / name)
                break
        else:
            raise FileNotFoundError(f"no {stem}[.gz] in {directory}")
    return tuple(found)


def load_mnist(directory, split: str) -> Dataset:
    images_path, labels_path = find_mnist(directory, split)
    return load_idx_pair(images_path, labels_path, split)


def default_data_dir() -> Optional[Path]:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def synthetic_dataset(n: int, seed: int = 0, split: str = "train", width: int = 784,
                      noise: float = 0.15) -> Dataset:
    """Seeded class-conditional blobs shaped like MNIST.

    Each class owns a fixed random prototype (drawn from a seed that does not
    depend on ``split``), and samples are noisy copies clipped to [0, 1].
    """
    proto_rng = np.random.default_rng(12345)
    side = int(round(np.sqrt(width)))
    prototypes = np.zeros((N_CLASSES, width))
    for c in range(N_CLASSES):
        img = np.zeros((side, side)) if side * side == width else None
        if img is not None:
            # a few bright strokes per class on a 2-D canvas
            for _ in range(3):
                r0, c0 = proto_rng.integers(4, side - 4, size=2)
                r1, c1 = proto_rng.integers(4, side - 4, size=2)
                for s in np.linspace(0.0, 1.0, 4 * side):
                    r = int(round(r0 + s * (r1 - r0)))
                    q = int(round(c0 + s * (c1 - c0)))
                    img[max(r - 1, 0):r + 2, max(q - 1, 0):q + 2] = 1.0
            prototypes[c] = img.ravel()
        else:
            prototypes[c] = (proto_rng.random(width) < 0.2).astype(float)
    offset = {"train": 0, "test": 1}.get(split, 2)
    rng = np.random.default_rng([seed, offset])
    labels = rng.integers(0, N_CLASSES, size=n)
    images = prototypes[labels] * rng.uniform(0.6, 1.0, size=(n, 1))
    images = images + noise * rng.standard_normal((n, width))
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), split)


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int

    def order(self, n: int, epoch: int = 0) -> np.ndarray:
        return np.random.default_rng(self.seed + epoch).permutation(n)


def batches(dataset: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple]:
    """One epoch of ``(images, one_hot_labels, indices)`` in seeded order."""
    n = len(dataset)
    if plan.batch_size > n:
        raise ValueError(f"batch size {plan.batch_size} exceeds dataset size {n}")
    order = plan.order(n, epoch)
    for start in range(0, n, plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield dataset.images[idx], one_hot(dataset.labels[idx]), idx


def batch_stream(dataset: Dataset, plan: BatchPlan) -> Iterator[tuple]:
    """Endless batches; every epoch boundary reshuffles with ``seed + epoch``."""
    epoch = 0
    while True:
        yield from batches(dataset, plan, epoch)
        epoch += 1
