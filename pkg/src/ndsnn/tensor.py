"""Dense float32 kernels used by the rest of the package.

Tensors are plain ``numpy.ndarray`` objects with dtype float32 in C
(row-major) order. float64 arrays are passed through unchanged so that
gradient checks can run in double precision. Index sets are sorted 1-D
int64 arrays of flat positions.
"""

from __future__ import annotations

import numpy as np

from .errors import CountError, DimensionError, ConfigError

DTYPE = np.float32


def as_tensor(x, dtype=None) -> np.ndarray:
    if dtype is None:
        dtype = np.float64 if isinstance(x, np.ndarray) and x.dtype == np.float64 else DTYPE
    return np.ascontiguousarray(x, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1 or padding < 0:
        raise ConfigError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    span = size + 2 * padding - kernel
    if span < 0:
        raise ConfigError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ConfigError(
            f"output size not exact: ({size}+2*{padding}-{kernel}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def conv2d_batch(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate a batch ``[B, C, H, W]`` with ``[F, C, K, K]`` filters."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    batch, _, h, w = x.shape
    f, _, kh, kw = kernel.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    dt = np.result_type(x, kernel)
    out = np.zeros((batch, f, oh, ow), dtype=dt)
    # one shifted view per kernel tap; accumulate its channel contraction
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += np.einsum("bchw,fc->bfhw", patch, kernel[:, :, i, j], dtype=dt)
    return out


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Single-sample cross-correlation: ``[C, H, W]`` input, ``[F, H', W']`` output."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects [C, H, W] input, got {x.shape}")
    return conv2d_batch(x[None], kernel, stride, padding)[0]


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray, stride: int = 1, padding: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``conv2d_batch`` w.r.t. its input and its kernel."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    grad_out = as_tensor(grad_out)
    dt = np.result_type(x, kernel, grad_out)
    _, _, h, w = x.shape
    _, _, kh, kw = kernel.shape
    oh, ow = grad_out.shape[2:]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    grad_x = np.zeros(x.shape, dtype=dt)
    grad_k = np.zeros(kernel.shape, dtype=dt)
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * oh, stride)
            cols = slice(j, j + stride * ow, stride)
            grad_k[:, :, i, j] = np.einsum("bfhw,bchw->fc", grad_out, x[:, :, rows, cols], dtype=dt)
            grad_x[:, :, rows, cols] += np.einsum("bfhw,fc->bchw", grad_out, kernel[:, :, i, j], dtype=dt)
    if padding:
        grad_x = grad_x[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(grad_x), grad_k


def _candidates(size: int, among) -> np.ndarray:
    if among is None:
        return np.arange(size, dtype=np.int64)
    idx = np.asarray(among, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise CountError(f"index set out of range for tensor of size {size}")
    if np.unique(idx).size != idx.size:
        raise CountError("index set contains duplicates")
    return idx


def _select(t: np.ndarray, k: int, among, largest: bool) -> np.ndarray:
    flat = np.asarray(t).ravel()
    cand = _candidates(flat.size, among)
    if k < 0 or k > cand.size:
        raise CountError(f"cannot select {k} of {cand.size} candidates")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    mag = np.abs(flat[cand].astype(np.float64))
    key = -mag if largest else mag
    # lexsort: last key is primary; ties go to the lower flat index
    order = np.lexsort((cand, key))
    return np.sort(cand[order[:k]])


def top_k_abs(t: np.ndarray, k: int, among=None) -> np.ndarray:
    """Flat positions of the ``k`` largest ``|t|`` within ``among`` (all if None)."""
    return _select(t, k, among, largest=True)


def bottom_k_abs(t: np.ndarray, k: int, among=None) -> np.ndarray:
    """Flat positions of the ``k`` smallest ``|t|`` within ``among`` (all if None)."""
    return _select(t, k, among, largest=False)
