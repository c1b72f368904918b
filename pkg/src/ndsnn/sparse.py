"""Masked layers, ERK density allocation, CSR storage and the memory model."""

from __future__ import annotations

import math
import struct
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .tensor import DTYPE, as_tensor, conv_output_size

CSR_MAGIC = b"NDSN"
_CSR_HEADER = struct.Struct("<4sIIQ")


def round_half_up(x: float) -> int:
    # the epsilon absorbs binary noise such as 0.19 * 1000 = 190.00000000000003
    # or 2.4999999999999996 standing in for an exact half
    return int(math.floor(x + 0.5 + 1e-9))


def target_active(size: int, sparsity: float) -> int:
    """Number of active weights a layer of ``size`` holds at ``sparsity``."""
    return min(size, max(0, round_half_up((1.0 - sparsity) * size)))


@dataclass(frozen=True)
class LayerDims:
    """Fan-in, fan-out and kernel extent of one layer, as used by ERK."""

    n_in: int
    n_out: int
    kernel_h: int = 1
    kernel_w: int = 1
    kind: str = "linear"

    @property
    def size(self) -> int:
        return self.n_in * self.n_out * self.kernel_h * self.kernel_w

    def erk_scale(self) -> float:
        if self.kind == "conv":
            num = self.n_in + self.n_out + self.kernel_w + self.kernel_h
            return 1.0 - num / (self.n_in * self.n_out * self.kernel_w * self.kernel_h)
        return 1.0 - (self.n_in + self.n_out) / (self.n_in * self.n_out)


@dataclass
class MaskedLayer:
    """Dense weights plus a 0/1 mask of the same shape.

    Linear weights are ``[n_out, n_in]``; conv weights are ``[F, C, K, K]``
    and consume inputs of shape ``in_shape = (C, H, W)``.
    """

    weights: np.ndarray
    mask: np.ndarray
    kind: str = "linear"
    in_shape: tuple = ()
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if self.weights.shape != self.mask.shape:
            raise DimensionError(f"weights {self.weights.shape} and mask {self.mask.shape} differ")
        if self.kind not in ("linear", "conv"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "linear":
            if self.weights.ndim != 2:
                raise DimensionError(f"linear weights must be 2-D, got {self.weights.shape}")
            self.in_shape = (self.weights.shape[1],)
        else:
            if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
                raise DimensionError(f"conv weights must be [F, C, K, K], got {self.weights.shape}")
            self.in_shape = tuple(int(s) for s in self.in_shape)
            if len(self.in_shape) != 3 or self.in_shape[0] != self.weights.shape[1]:
                raise DimensionError(
                    f"conv in_shape {self.in_shape} does not match kernel {self.weights.shape}"
                )
            self.out_shape  # validates geometry
        self.apply_mask()

    @property
    def out_shape(self) -> tuple:
        if self.kind == "linear":
            return (self.weights.shape[0],)
        f, _, k, _ = self.weights.shape
        _, h, w = self.in_shape
        return (
            f,
            conv_output_size(h, k, self.stride, self.padding),
            conv_output_size(w, k, self.stride, self.padding),
        )

    @property
    def in_features(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_features(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def size(self) -> int:
        return int(self.weights.size)

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def density(self) -> float:
        return self.active_count / self.size

    @property
    def matrix_shape(self) -> tuple[int, int]:
        """2-D view: one row per output unit (filter)."""
        return self.weights.shape[0], self.size // self.weights.shape[0]

    @property
    def dims(self) -> LayerDims:
        if self.kind == "linear":
            n_out, n_in = self.weights.shape
            return LayerDims(n_in, n_out)
        f, c, kh, kw = self.weights.shape
        return LayerDims(c, f, kh, kw, kind="conv")

    def apply_mask(self) -> None:
        # assignment rather than multiplication: no -0.0 at inactive positions
        self.weights[self.mask == 0] = 0

    def effective(self) -> np.ndarray:
        return np.where(self.mask != 0, self.weights, self.weights.dtype.type(0))


def linear_layer(n_in: int, n_out: int, rng: np.random.Generator | None = None) -> MaskedLayer:
    w = np.zeros((n_out, n_in), dtype=DTYPE)
    layer = MaskedLayer(w, np.ones_like(w, dtype=np.uint8))
    if rng is not None:
        init_weights(layer, rng)
    return layer


def conv_layer(
    in_shape: Sequence[int],
    filters: int,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
    rng: np.random.Generator | None = None,
) -> MaskedLayer:
    w = np.zeros((filters, in_shape[0], kernel, kernel), dtype=DTYPE)
    layer = MaskedLayer(w, np.ones_like(w, dtype=np.uint8), "conv", tuple(in_shape), stride, padding)
    if rng is not None:
        init_weights(layer, rng)
    return layer


def init_weights(layer: MaskedLayer, rng: np.random.Generator, gain: float = 1.0) -> None:
    """Uniform init scaled by the *active* fan-in, then masked.

    Scaling by the sparse fan-in keeps membrane drive comparable across
    densities; at density 1 this is the usual ``sqrt(3 / fan_in)`` bound.
    """
    fan_in = layer.size // layer.weights.shape[0]
    eff_fan_in = max(1.0, fan_in * layer.density)
    bound = gain * math.sqrt(3.0 / eff_fan_in)
    layer.weights[...] = rng.uniform(-bound, bound, size=layer.weights.shape)
    layer.apply_mask()


# --------------------------------------------------------------------------
# ERK allocation
# --------------------------------------------------------------------------


@dataclass
class ErkAllocation:
    per_layer_density: list[float]
    global_sparsity: float
    sizes: list[int] = field(default_factory=list)

    @property
    def per_layer_sparsity(self) -> list[float]:
        return [1.0 - d for d in self.per_layer_density]

    @property
    def active_counts(self) -> list[int]:
        return [target_active(n, s) for n, s in zip(self.sizes, self.per_layer_sparsity)]


def erk_allocate(layers: Sequence[LayerDims], global_sparsity: float) -> ErkAllocation:
    """Spread ``(1 - global_sparsity) * sum(N_l)`` active weights across layers.

    Density of layer l is ``eps * scale_l``; layers whose density would
    exceed 1 are made dense and ``eps`` is re-solved over the others.
    """
    if not 0.0 <= global_sparsity < 1.0:
        raise ConfigError(f"global sparsity must lie in [0, 1), got {global_sparsity}")
    if not layers:
        raise ConfigError("ERK needs at least one layer")
    sizes = [d.size for d in layers]
    scales = [d.erk_scale() for d in layers]
    for i, s in enumerate(scales):
        if s <= 0:
            raise ConfigError(f"layer {i} ({layers[i]}) is too small for ERK scaling (scale {s:.4g})")
    budget = (1.0 - global_sparsity) * sum(sizes)
    dense: set[int] = set()
    while True:
        rest = [i for i in range(len(layers)) if i not in dense]
        if not rest:
            break
        remaining = budget - sum(sizes[i] for i in dense)
        eps = remaining / sum(scales[i] * sizes[i] for i in rest)
        over = {i for i in rest if eps * scales[i] > 1.0}
        if not over:
            break
        dense |= over
    densities = [1.0 if i in dense else eps * scales[i] for i in range(len(layers))]
    if not rest and budget < sum(sizes) - 1e-9:
        raise ConfigError("ERK allocation failed: every layer capped before meeting the budget")
    return ErkAllocation(densities, global_sparsity, sizes)


def random_masks(
    alloc: ErkAllocation, shapes: Sequence[tuple], rng: np.random.Generator
) -> list[np.ndarray]:
    """Uniformly random masks with exactly ``alloc.active_counts[l]`` ones."""
    masks = []
    for shape, size, count in zip(shapes, alloc.sizes, alloc.active_counts):
        if int(np.prod(shape)) != size:
            raise DimensionError(f"shape {shape} does not hold {size} weights")
        flat = np.zeros(size, dtype=np.uint8)
        flat[rng.choice(size, size=count, replace=False)] = 1
        masks.append(flat.reshape(shape))
    return masks


# --------------------------------------------------------------------------
# CSR
# --------------------------------------------------------------------------


@dataclass
class CsrMatrix:
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    rows: int
    cols: int

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=DTYPE)
        self.validate()

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def validate(self) -> None:
        rp, ci = self.row_ptr, self.col_idx
        if self.rows < 0 or self.cols < 0:
            raise FormatError(f"negative extents {self.rows}x{self.cols}")
        if rp.shape != (self.rows + 1,):
            raise FormatError(f"row_ptr has length {rp.size}, expected {self.rows + 1}")
        if rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise FormatError("row_ptr must start at 0 and be nondecreasing")
        if rp[-1] != self.values.size or ci.size != self.values.size:
            raise FormatError(
                f"row_ptr end {rp[-1]}, col_idx {ci.size} and values {self.values.size} disagree"
            )
        if ci.size and (ci.min() < 0 or ci.max() >= self.cols):
            raise FormatError(f"column index outside [0, {self.cols})")
        for r in range(self.rows):
            if np.any(np.diff(ci[rp[r] : rp[r + 1]]) <= 0):
                raise FormatError(f"column indices of row {r} are not strictly increasing")

    def to_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(values, support)`` as dense 2-D arrays."""
        dense = np.zeros((self.rows, self.cols), dtype=DTYPE)
        support = np.zeros((self.rows, self.cols), dtype=np.uint8)
        row_of = np.repeat(np.arange(self.rows), np.diff(self.row_ptr))
        dense[row_of, self.col_idx] = self.values
        support[row_of, self.col_idx] = 1
        return dense, support

    def to_bytes(self) -> bytes:
        if self.rows >= 2**32 or self.cols >= 2**32:
            raise FormatError("matrix too large for u32 extents")
        return b"".join(
            [
                _CSR_HEADER.pack(CSR_MAGIC, self.rows, self.cols, self.nnz),
                self.row_ptr.astype("<u8").tobytes(),
                self.col_idx.astype("<u4").tobytes(),
                self.values.astype("<f4").tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CsrMatrix":
        if len(buf) < _CSR_HEADER.size:
            raise FormatError(f"truncated header at offset {len(buf)}")
        magic, rows, cols, nnz = _CSR_HEADER.unpack_from(buf, 0)
        if magic != CSR_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0")
        off = _CSR_HEADER.size
        parts = []
        for dtype, count in (("<u8", rows + 1), ("<u4", nnz), ("<f4", nnz)):
            nbytes = np.dtype(dtype).itemsize * count
            if off + nbytes > len(buf):
                raise FormatError(f"truncated body at offset {off}, need {nbytes} more bytes")
            parts.append(np.frombuffer(buf, dtype=dtype, count=count, offset=off))
            off += nbytes
        if off != len(buf):
            raise FormatError(f"{len(buf) - off} trailing bytes at offset {off}")
        row_ptr, col_idx, values = parts
        return cls(row_ptr.astype(np.int64), col_idx.astype(np.int64), values.astype(DTYPE), rows, cols)


def to_csr(layer: MaskedLayer) -> CsrMatrix:
    """CSR of the active support; active weights that are exactly 0 are kept."""
    rows, cols = layer.matrix_shape
    mask2d = layer.mask.reshape(rows, cols)
    vals2d = layer.effective().reshape(rows, cols)
    r, c = np.nonzero(mask2d)
    row_ptr = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=rows), out=row_ptr[1:])
    return CsrMatrix(row_ptr, c, vals2d[r, c], rows, cols)


def from_csr(m: CsrMatrix, shape: Sequence[int], kind: str = "linear", **layer_kwargs) -> MaskedLayer:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != m.rows * m.cols or shape[0] != m.rows:
        raise FormatError(f"CSR {m.rows}x{m.cols} cannot be viewed as {shape}")
    dense, support = m.to_dense()
    return MaskedLayer(dense.reshape(shape), support.reshape(shape), kind, **layer_kwargs)


def write_csr(path: str | Path, m: CsrMatrix) -> None:
    Path(path).write_bytes(m.to_bytes())


def read_csr(path: str | Path) -> CsrMatrix:
    return CsrMatrix.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Memory footprint
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FootprintParams:
    n: int
    sparsity: float
    timesteps: int
    b_w: int = 32
    b_idx: int = 32

    def __post_init__(self):
        if self.n <= 0 or self.timesteps <= 0 or self.b_w <= 0 or self.b_idx <= 0:
            raise ConfigError("footprint parameters must be positive")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ConfigError(f"sparsity must lie in [0, 1], got {self.sparsity}")


def memory_footprint_bits(p: FootprintParams) -> float:
    """Weights plus per-timestep gradients plus one index per nonzero.

    The density is taken as the decimal the caller wrote (0.95 -> 1/20), so
    the result is the exactly rounded value rather than 1 - 0.95 in binary.
    """
    density = 1 - Fraction(repr(float(p.sparsity)))
    return float(density * ((1 + p.timesteps) * p.n * p.b_w + p.n * p.b_idx))


def memory_footprint_bits_exact(p: FootprintParams, filters: Sequence[int]) -> float:
    """Approximate footprint plus the CSR row pointers, ``F_l + 1`` per layer."""
    return memory_footprint_bits(p) + sum((f + 1) * p.b_idx for f in filters)
