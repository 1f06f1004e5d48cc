"""Dataset ingestion: IDX image/label files and a seeded synthetic generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "IdxFormatError",
    "read_idx",
    "write_idx",
    "load_idx_pair",
    "Dataset",
    "synthetic_blobs",
    "iterate_batches",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into a uint8 array."""
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise IdxFormatError("file too short for magic number", 0)
    (magic,) = struct.unpack_from(">I", buf, 0)
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"bad magic 0x{magic:08x}, only unsigned-byte IDX is supported", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError("truncated dimension header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims)) if ndim else 0
    if len(buf) - header < count:
        raise IdxFormatError(f"truncated data: need {count} bytes, found {len(buf) - header}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", (0x08 << 8) | array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    @property
    def in_channels(self) -> int:
        return self.x_train.shape[1]

    @property
    def classes(self) -> int:
        return int(max(self.y_train.max(), self.y_eval.max())) + 1


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as (N, 1, H, W) float64 in [0, 1], labels as int64."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"image file must be 3-d, got {images.ndim}-d", 0)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"image count {images.shape[0]} does not match label count {labels.shape[0]}")
    return images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64)


def synthetic_blobs(
    classes: int = 4,
    height: int = 16,
    width: int = 16,
    n: int = 2048,
    noise: float = 0.35,
    seed: int = 7,
    bumps: int = 3,
    max_shift: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-blob image classification.

    Each class gets a prototype made of ``bumps`` random Gaussian blobs; samples
    are the prototype shifted by up to ``max_shift`` pixels, plus pixel noise,
    clipped to [0, 1]. Returns ``(x, y)`` with ``x`` shaped (n, 1, H, W).
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    protos = np.zeros((classes, height, width))
    for c in range(classes):
        for _ in range(bumps):
            cy, cx = rng.uniform(2, height - 2), rng.uniform(2, width - 2)
            sigma = rng.uniform(1.0, 2.5)
            protos[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        protos[c] /= protos[c].max()
    y = rng.integers(0, classes, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    x = np.empty((n, 1, height, width))
    for i in range(n):
        x[i, 0] = np.roll(protos[y[i]], tuple(shifts[i]), axis=(0, 1))
    x += noise * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0), y.astype(np.int64)


def iterate_batches(
    x: np.ndarray,
    y: np.ndarray,
    batch_size: int,
    rng: np.random.Generator | None = None,
    drop_last: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (x, y) mini-batches; shuffled when ``rng`` is given."""
    n = x.shape[0]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for i in range(0, stop, batch_size):
        idx = order[i : i + batch_size]
        if len(idx) < 2:
            break
        yield x[idx], y[idx]
