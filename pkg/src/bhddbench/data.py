"""MNIST-format (IDX) ingestion, normalisation and deterministic batching.

IDX layout: two zero bytes, a type byte (0x08 = unsigned byte), a dimension
count byte, then one big-endian uint32 per dimension, then the raw payload.
Images are ``N x 28 x 28`` (magic 0x00000803), labels ``N`` (0x00000801).
Files ending in ``.gz`` are decompressed transparently.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SIDE = 28
N_CLASSES = 10

# file names probed under a dataset root (MNIST convention)
SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATA_ROOT_ENV = "BHDD_DATA_ROOT"


class IDXError(ValueError):
    """Malformed IDX container; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int, path: str | os.PathLike | None = None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


class IDXMagicError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


class IDXCountMismatchError(IDXError):
    pass


class IDXLabelError(IDXError):
    pass


class IDXShapeError(IDXError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, 28, 28]
    labels: np.ndarray  # int64 [N]
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError("labels must lie in [0, 10)")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split or self.split)


# ---------------------------------------------------------------------------
# IDX container


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, expected_magic: int, path=None) -> np.ndarray:
    """Decode an unsigned-byte IDX buffer into an array of its declared shape."""
    if len(buf) < 4:
        raise IDXTruncatedError(f"truncated at offset {len(buf)} while reading magic", len(buf), path)
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise IDXMagicError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0, path)
    ndim = buf[3]
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise IDXTruncatedError(f"truncated at offset {len(buf)} inside dimension header", len(buf), path)
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    n = int(np.prod(dims)) if dims else 0
    if len(buf) < header_end + n:
        raise IDXTruncatedError(
            f"truncated at offset {len(buf)}: payload needs {n} bytes after header", len(buf), path)
    if len(buf) > header_end + n:
        raise IDXCountMismatchError(
            f"{len(buf) - header_end - n} trailing bytes beyond declared payload", header_end + n, path)
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=header_end).reshape(dims).copy()


def read_idx_images(path) -> np.ndarray:
    arr = parse_idx(_read_bytes(path), IMAGE_MAGIC, path)
    if arr.ndim != 3 or arr.shape[1:] != (SIDE, SIDE):
        raise IDXShapeError(f"image header declares {arr.shape}, expected N x {SIDE} x {SIDE}", 4, path)
    return arr


def read_idx_labels(path) -> np.ndarray:
    arr = parse_idx(_read_bytes(path), LABEL_MAGIC, path)
    bad = np.flatnonzero(arr >= N_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise IDXLabelError(f"invalid label {arr[i]} at index {i}", 8 + i, path)
    return arr.astype(np.int64)


def load_idx(path_images, path_labels, split: str = "train") -> Dataset:
    images = read_idx_images(path_images)
    labels = read_idx_labels(path_labels)
    if len(images) != len(labels):
        raise IDXCountMismatchError(
            f"{len(images)} images but {len(labels)} labels", 4, path_labels)
    return Dataset(images, labels, split)


def encode_idx(arr: np.ndarray, magic: int) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if (magic & 0xFF) != arr.ndim:
        raise ValueError(f"magic 0x{magic:08x} declares {magic & 0xFF} dims, array has {arr.ndim}")
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def write_idx(path, arr: np.ndarray, magic: int) -> None:
    path = Path(path)
    payload = encode_idx(arr, magic)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def write_dataset(dataset: Dataset, path_images, path_labels) -> None:
    write_idx(path_images, dataset.images, IMAGE_MAGIC)
    write_idx(path_labels, dataset.labels.astype(np.uint8), LABEL_MAGIC)


def find_split_files(root, split: str) -> tuple[Path, Path]:
    """Locate ``split`` image/label files under ``root`` (plain or ``.gz``)."""
    root = Path(root)
    found = []
    for stem in SPLIT_FILES[split]:
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
            if (root / name).exists():
                found.append(root / name)
                break
        else:
            raise FileNotFoundError(f"no {stem}[.gz] under {root}")
    return found[0], found[1]


def load_split(root, split: str) -> Dataset:
    images, labels = find_split_files(root, split)
    return load_idx(images, labels, split)


# ---------------------------------------------------------------------------
# transforms


def normalize(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 ``[N,28,28]`` -> ``[N,1,28,28]`` in [0, 1]."""
    images = np.asarray(images)
    return (images.astype(dtype) / dtype(255.0)).reshape(len(images), 1, SIDE, SIDE)


def one_hot(labels, k: int = N_CLASSES, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def decode_one_hot(rows: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest index."""
    return np.asarray(rows).argmax(axis=1)


# ---------------------------------------------------------------------------
# batching and subsets


@dataclass
class BatchPlan:
    batch_size: int = 128
    seed: int = 42
    drop_last: bool = False


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def shuffled_batches(dataset: Dataset | int, plan: BatchPlan, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch; a pure function of ``(len, seed, epoch)``."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    perm = epoch_permutation(n, plan.seed, epoch)
    batches = [perm[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]
    if plan.drop_last and batches and len(batches[-1]) < plan.batch_size:
        batches.pop()
    return batches


def sequential_batches(n: int, batch_size: int) -> Iterator[np.ndarray]:
    for i in range(0, n, batch_size):
        yield np.arange(i, min(i + batch_size, n))


def class_quotas(counts: np.ndarray, n: int) -> np.ndarray:
    """Split ``n`` draws across classes as evenly as availability allows.

    Water-filling: every class gets ``min(count, level)`` for the largest
    level that fits in ``n``; the few draws left over go one each to the
    lowest-index classes that still have items.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = min(int(n), int(counts.sum()))
    lo, hi = 0, int(counts.max()) if counts.size else 0
    while lo < hi:  # largest level with sum(min(counts, level)) <= n
        mid = (lo + hi + 1) // 2
        if np.minimum(counts, mid).sum() <= n:
            lo = mid
        else:
            hi = mid - 1
    quota = np.minimum(counts, lo)
    left = n - int(quota.sum())
    room = np.flatnonzero(counts > lo)
    quota[room[:left]] += 1
    return quota


def subset_indices(dataset: Dataset, n: int, seed: int = 42) -> np.ndarray:
    """Sorted indices of a deterministic stratified sample of ``n`` items."""
    N = len(dataset)
    if n > N:
        raise ValueError(f"cannot take {n} samples from {N}")
    if n == N:
        return np.arange(N)
    counts = np.bincount(dataset.labels, minlength=N_CLASSES)
    missing = np.flatnonzero(counts == 0)
    if missing.size and n >= N_CLASSES:
        raise ValueError(f"cannot stratify: classes {missing.tolist()} absent")
    quota = class_quotas(counts, n)
    rng = np.random.default_rng(seed)
    chosen = [rng.permutation(np.flatnonzero(dataset.labels == c))[: quota[c]]
              for c in range(N_CLASSES) if quota[c]]
    return np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)


def subset(dataset: Dataset, n: int, seed: int = 42) -> Dataset:
    """Deterministic stratified sample of ``n`` items, kept in original order."""
    return dataset.take(subset_indices(dataset, n, seed))


def train_val_split(dataset: Dataset, val_size: int, seed: int = 42) -> tuple[Dataset, Dataset]:
    """Shuffle with ``seed`` and hold out the last ``val_size`` items as validation."""
    if not 0 <= val_size < len(dataset):
        raise ValueError(f"val_size {val_size} must lie in [0, {len(dataset)})")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    cut = len(dataset) - val_size
    return dataset.take(np.sort(perm[:cut]), "train"), dataset.take(np.sort(perm[cut:]), "val")
