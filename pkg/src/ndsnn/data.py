"""Datasets, spike encoding and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError, FormatError
from .tensor import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] in [0, 1]
    labels: np.ndarray  # [n] int64
    class_count: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def features(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.class_count)


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------


def _read_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header at offset {len(buf)}, need {need} bytes")
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndim}I", buf, 4)


def _read_body(buf: bytes, path, dims: tuple[int, ...], offset: int) -> np.ndarray:
    count = int(np.prod(dims))
    if len(buf) - offset < count:
        raise FormatError(
            f"{path}: truncated data at offset {len(buf)}, expected {count} bytes from offset {offset}"
        )
    if len(buf) - offset > count:
        raise FormatError(f"{path}: {len(buf) - offset - count} trailing bytes at offset {offset + count}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    img_buf = Path(images_path).read_bytes()
    lbl_buf = Path(labels_path).read_bytes()
    n, rows, cols = _read_header(img_buf, images_path, IDX_IMAGES_MAGIC, 3)
    (m,) = _read_header(lbl_buf, labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise FormatError(f"count mismatch: {n} images in {images_path}, {m} labels in {labels_path}")
    pixels = _read_body(img_buf, images_path, (n, rows, cols), 16)
    labels = _read_body(lbl_buf, labels_path, (m,), 8).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if m else 1
    images = (pixels.astype(DTYPE) / DTYPE(255.0))[:, None, :, :]
    return Dataset(images, labels, class_count)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``[n, rows, cols]`` pixels and labels as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# --------------------------------------------------------------------------
# Synthetic prototypes
# --------------------------------------------------------------------------


def synth_patterns(
    classes: int, features: int, samples_per_class: int, noise: float, seed: int
) -> Dataset:
    """Class c lights feature block c at intensity 1; noise flips each feature.

    Samples come out class-major (all of class 0, then class 1, ...).
    """
    if not 1 <= classes <= features:
        raise DataError(f"need 1 <= classes <= features, got {classes} classes, {features} features")
    if not 0.0 <= noise <= 1.0:
        raise DataError(f"noise must lie in [0, 1], got {noise}")
    rng = np.random.default_rng(seed)
    block = features // classes
    protos = np.zeros((classes, features), dtype=DTYPE)
    for c in range(classes):
        protos[c, c * block : (c + 1) * block] = 1.0
    labels = np.repeat(np.arange(classes), samples_per_class)
    x = protos[labels]
    flips = rng.random(x.shape) < noise
    x = np.where(flips, 1.0 - x, x).astype(DTYPE)
    return Dataset(x.reshape(len(labels), 1, 1, features), labels, classes)


def train_val_split(ds: Dataset, rng: np.random.Generator, val_fraction: float = 0.1):
    """Shuffle, then hold out the last ``val_fraction`` by index."""
    order = rng.permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    cut = len(ds) - n_val
    return ds.subset(order[:cut]), ds.subset(order[cut:])


# --------------------------------------------------------------------------
# Encoding and batching
# --------------------------------------------------------------------------


def encode(images: np.ndarray, mode: str, timesteps: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``[batch, ...]`` images in [0, 1] -> ``[T, batch, features]`` inputs."""
    if timesteps < 1:
        raise DataError(f"timesteps must be >= 1, got {timesteps}")
    flat = np.asarray(images, dtype=DTYPE).reshape(len(images), -1)
    if mode == "direct":
        return np.ascontiguousarray(np.broadcast_to(flat, (timesteps,) + flat.shape))
    if mode == "rate":
        if rng is None:
            raise DataError("rate encoding needs an rng")
        return (rng.random((timesteps,) + flat.shape) < flat).astype(DTYPE)
    raise DataError(f"unknown encoding {mode!r}; expected 'direct' or 'rate'")


def iter_batches(
    ds: Dataset, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` minibatches; shuffled when ``rng`` is given."""
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]
