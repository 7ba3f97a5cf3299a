"""Deterministic NCHW kernels.

Tensors are plain ``numpy`` arrays of rank 4 laid out (batch, channels,
height, width).  Storage is float32; a float64 input switches the kernel to
double precision (used by gradient checks only).

Reductions run in a fixed order so repeated evaluation is bit-identical:
convolutions accumulate tap by tap, kernel row outermost, then kernel
column, with the input-channel sum of each tap done as one matrix product.
Bias is added after the last tap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "Conv2dParams",
    "as_tensor",
    "conv2d",
    "maxpool2x2",
    "transposed_conv2x2",
    "concat_channels",
    "relu",
    "dense",
    "softmax",
    "sigmoid",
    "conv_output_size",
]


def _compute_dtype(*arrays):
    return np.float64 if any(np.asarray(a).dtype == np.float64 for a in arrays) else np.float32


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a contiguous rank-4 array (float32 unless float64 given)."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 NCHW tensor, got shape {arr.shape}")
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


@dataclass(frozen=True)
class Conv2dParams:
    """Convolution parameters; ``weight`` is (outC, inC, kH, kW)."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weight)
        b = np.asarray(self.bias)
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be (outC, inC, kH, kW), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match outC={w.shape[0]}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, params: Conv2dParams) -> np.ndarray:
    """2-D cross-correlation with zero padding."""
    dtype = _compute_dtype(x, params.weight)
    x = as_tensor(x, dtype)
    n, c, h, w = x.shape
    oc, ic, kh, kw = params.weight.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels, kernel expects {ic}")
    s, p = params.stride, params.padding
    oh = conv_output_size(h, kh, s, p)
    ow = conv_output_size(w, kw, s, p)
    if oh < 1 or ow < 1:
        raise ShapeError(f"non-positive output size {oh}x{ow} for input {h}x{w}")

    # (kH, kW, outC, inC) so each tap is a contiguous matrix for BLAS
    taps = np.ascontiguousarray(np.transpose(params.weight, (2, 3, 0, 1)), dtype=dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    out = np.zeros((n, oc, oh * ow), dtype=dtype)
    for ky in range(kh):
        for kx in range(kw):
            window = xp[:, :, ky : ky + s * (oh - 1) + 1 : s, kx : kx + s * (ow - 1) + 1 : s]
            cols = np.ascontiguousarray(window).reshape(n, c, oh * ow)
            out += np.matmul(taps[ky, kx], cols)
    out += np.asarray(params.bias, dtype=dtype)[None, :, None]
    return out.reshape(n, oc, oh, ow)


def maxpool2x2(x) -> np.ndarray:
    """Non-overlapping 2x2 max pooling."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def transposed_conv2x2(x, params: Conv2dParams) -> np.ndarray:
    """Stride-2 2x2 transposed convolution (learned upsampling).

    ``params.weight`` uses the same (outC, inC, kH, kW) layout as
    :func:`conv2d`.  Output element (2i+ky, 2j+kx) receives exactly one
    scatter from input element (i, j), so there is no overlap to order.
    """
    if params.kernel_size != (2, 2) or params.stride != 2 or params.padding != 0:
        raise ShapeError(
            "transposed_conv2x2 requires a 2x2 kernel, stride 2, padding 0; got "
            f"kernel {params.kernel_size}, stride {params.stride}, padding {params.padding}"
        )
    dtype = _compute_dtype(x, params.weight)
    x = as_tensor(x, dtype)
    n, c, h, w = x.shape
    oc, ic = params.out_channels, params.in_channels
    if c != ic:
        raise ShapeError(f"input has {c} channels, kernel expects {ic}")
    flat = x.reshape(n, c, h * w)
    bias = np.asarray(params.bias, dtype=dtype)[None, :, None, None]
    out = np.empty((n, oc, 2 * h, 2 * w), dtype=dtype)
    for ky in range(2):
        for kx in range(2):
            tap = np.ascontiguousarray(params.weight[:, :, ky, kx], dtype=dtype)
            out[:, :, ky::2, kx::2] = np.matmul(tap, flat).reshape(n, oc, h, w) + bias
    return out


def concat_channels(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def dense(x, weight, bias) -> np.ndarray:
    """``weight @ x + bias`` for a vector, or row-wise for a (batch, in) matrix."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense weight {weight.shape} does not accept input of length {x.shape[-1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense bias {bias.shape} does not match {weight.shape[0]} outputs")
    dtype = _compute_dtype(x, weight)
    return np.matmul(x.astype(dtype, copy=False), weight.astype(dtype, copy=False).T) + bias.astype(dtype)


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis, computed after subtracting the max."""
    z = np.asarray(logits)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
