"""MNIST IDX parsing and mini-batch planning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

LABEL_MAGIC = 0x00000801
IMAGE_MAGIC = 0x00000803

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXError(ValueError):
    pass


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string (optionally gzip-compressed).

    Label files (magic 0x801) come back as an int64 vector; image files
    (magic 0x803) as float32 scaled into [0, 1].
    """
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IDXError("truncated IDX stream: missing magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == LABEL_MAGIC:
        ndim = 1
    elif magic == IMAGE_MAGIC:
        ndim = 3
    else:
        raise IDXError(f"unknown IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError("truncated IDX stream: incomplete dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise IDXError(
            f"truncated IDX stream: header declares {count} bytes, {len(raw) - header} present"
        )
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == LABEL_MAGIC:
        return payload.astype(np.int64)
    return payload.astype(np.float32) / np.float32(255.0)


def encode_idx(array: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` for uint8-representable data.

    A 1-D integer array is written as a label file; a 3-D array as an image
    file (floats in [0, 1] are rescaled by 255 and rounded).
    """
    array = np.asarray(array)
    if array.ndim == 1:
        magic, payload = LABEL_MAGIC, array
    elif array.ndim == 3:
        magic = IMAGE_MAGIC
        payload = np.rint(array * 255.0) if np.issubdtype(array.dtype, np.floating) else array
    else:
        raise IDXError(f"only 1-D label and 3-D image arrays are supported, got ndim={array.ndim}")
    if payload.min(initial=0) < 0 or payload.max(initial=0) > 255:
        raise IDXError("values do not fit in uint8")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + payload.astype(np.uint8).tobytes()


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, 9]
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels in {self.split} split"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.split)

    def sample(self, size: int | None, seed: int) -> "Dataset":
        """Seeded subset without replacement, kept in dataset order; ``None`` = everything."""
        if size is None or size >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), size=size, replace=False)))


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = data_dir / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def mnist_available(data_dir) -> bool:
    try:
        for split in MNIST_FILES.values():
            for stem in split:
                _find(Path(data_dir), stem)
    except FileNotFoundError:
        return False
    return True


def load_mnist(data_dir, split: str = "train") -> Dataset:
    if split not in MNIST_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    data_dir = Path(data_dir)
    image_stem, label_stem = MNIST_FILES[split]
    images = parse_idx(_find(data_dir, image_stem).read_bytes())
    labels = parse_idx(_find(data_dir, label_stem).read_bytes())
    if images.ndim != 3 or labels.ndim != 1:
        raise IDXError(f"{split} files have unexpected ranks {images.ndim}/{labels.ndim}")
    return Dataset(images[:, None, :, :], labels, split)


def split_validation(ds: Dataset, size: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded hold-out: (remaining training samples, validation samples)."""
    if not 0 < size < len(ds):
        raise ValueError(f"validation size {size} must lie in (0, {len(ds)})")
    order = np.random.default_rng(seed).permutation(len(ds))
    val_idx, train_idx = np.sort(order[:size]), np.sort(order[size:])
    train, val = ds.subset(train_idx), ds.subset(val_idx)
    return train, Dataset(val.images, val.labels, "validation")


@dataclass
class BatchPlan:
    batch_size: int
    seed: int = 0
    shuffle: bool = True
    order: np.ndarray | None = field(default=None, repr=False)

    def indices(self, n: int, epoch: int = 0) -> np.ndarray:
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")
        if not self.shuffle:
            return np.arange(n)
        rng = np.random.default_rng([self.seed, epoch])
        self.order = rng.permutation(n)
        return self.order


def batch_indices(n: int, plan: BatchPlan, epoch: int = 0) -> Iterator[np.ndarray]:
    if plan.batch_size <= 0:
        raise ValueError("batch size must be positive")
    if plan.batch_size > n:
        raise ValueError(f"batch size {plan.batch_size} exceeds dataset size {n}")
    order = plan.indices(n, epoch)
    for start in range(0, n, plan.batch_size):
        yield order[start : start + plan.batch_size]


def batches(ds: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (images, labels) mini-batches; the last one may be short."""
    for idx in batch_indices(len(ds), plan, epoch):
        yield ds.images[idx], ds.labels[idx]
