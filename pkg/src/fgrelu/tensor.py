"""Dense tensor kernels.

Tensors are plain row-major ``numpy.ndarray`` objects.  Every kernel here
checks shapes explicitly and never broadcasts, except tensor-with-scalar
elementwise operations.  Convolution and pooling kernels accept either a
single sample ``(C, H, W)`` or a batch ``(N, C, H, W)``.

No function mutates its inputs.
"""

from __future__ import annotations

from typing import Callable, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError

DEFAULT_DTYPE = np.float64

Scalar = Union[int, float, np.floating]


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous floating array (float64 unless told)."""
    return np.ascontiguousarray(x, dtype=dtype or DEFAULT_DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a`` (n x k) and ``b`` (k x m)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _batched(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name}: expected (C,H,W) or (N,C,H,W) input, got {x.shape}")


def same_padding(k: int) -> tuple[int, int]:
    """Split ``k - 1`` padding rows into (before, after); extra goes after."""
    total = k - 1
    return total // 2, total - total // 2


def _pad(x: np.ndarray, padding: str, k: int) -> tuple[np.ndarray, tuple[int, int]]:
    if padding == "valid":
        return x, (0, 0)
    if padding == "same":
        lo, hi = same_padding(k)
        return np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi))), (lo, hi)
    raise ParameterError(f"padding must be 'valid' or 'same', got {padding!r}")


def conv_output_size(h: int, k: int, stride: int, padding: str = "valid") -> int:
    h_pad = h + (k - 1 if padding == "same" else 0)
    return (h_pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view; no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1,
           padding: str = "valid") -> np.ndarray:
    """Cross-correlate ``x`` with ``kernels`` of shape (C_out, C_in, k, k)."""
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be >= 1, got {stride}")
    xb, single = _batched(x, "conv2d")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"conv2d: kernels must be (C_out, C_in, k, k), got {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    if xb.shape[1] != c_in:
        raise DimensionError(
            f"conv2d: input has {xb.shape[1]} channels, kernels {kernels.shape} expect {c_in}")
    xp, _ = _pad(xb, padding, k)
    if k > xp.shape[2] or k > xp.shape[3]:
        raise DimensionError(
            f"conv2d: kernel {k}x{k} larger than padded input {xp.shape[2]}x{xp.shape[3]}")
    win = _windows(xp, k, stride)
    n, _, ho, wo = win.shape[:4]
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, C_out)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_transpose(x: np.ndarray, kernels: np.ndarray, stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`conv2d` (valid padding).

    ``kernels`` has shape (C_in, C_out, k, k) where C_in is the channel
    count of ``x``; this is the same tensor layout as the kernel of the
    convolution whose gradient this computes.  Output spatial size is
    ``(H - 1) * stride + k``.
    """
    if stride < 1:
        raise ParameterError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    xb, single = _batched(x, "conv2d_transpose")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(
            f"conv2d_transpose: kernels must be (C_in, C_out, k, k), got {kernels.shape}")
    c_in, c_out, k, _ = kernels.shape
    if xb.shape[1] != c_in:
        raise DimensionError(
            f"conv2d_transpose: input has {xb.shape[1]} channels, kernels {kernels.shape} "
            f"expect {c_in}")
    n, _, h, w = xb.shape
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k
    cols = np.tensordot(xb, kernels, axes=([1], [0]))  # (N, H, W, C_out, k, k)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # (N, C_out, k, k, H, W)
    out = np.zeros((n, c_out, ho, wo), dtype=np.result_type(xb, kernels))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, i, j]
    return out[0] if single else out


def conv2d_backward(grad: np.ndarray, x: np.ndarray, kernels: np.ndarray, stride: int,
                    padding: str) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. its input and kernels (batched)."""
    k = kernels.shape[2]
    xp, (lo, _) = _pad(x, padding, k)
    win = _windows(xp, k, stride)
    d_kernels = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C_in, k, k)
    d_xp = conv2d_transpose(grad, kernels, stride)
    # rows/cols dropped by the floor in the output size receive no gradient
    full = np.zeros(xp.shape, dtype=d_xp.dtype)
    full[:, :, :d_xp.shape[2], :d_xp.shape[3]] = d_xp
    h, w = x.shape[2], x.shape[3]
    d_x = full[:, :, lo:lo + h, lo:lo + w]
    return np.ascontiguousarray(d_x), d_kernels


def conv2d_transpose_backward(grad: np.ndarray, x: np.ndarray, kernels: np.ndarray,
                              stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_transpose` w.r.t. its input and kernels (batched)."""
    k = kernels.shape[2]
    d_x = conv2d(grad, kernels, stride, "valid")
    win = _windows(grad, k, stride)  # (N, C_out, H, W, k, k)
    d_kernels = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_in, C_out, k, k)
    return d_x, d_kernels


def max_pool2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and, per output element, the row-major index
    (0..3) of the winning element inside its window.  Ties go to the
    lowest index.  Odd trailing rows/columns are dropped.
    """
    xb, single = _batched(x, "max_pool2d")
    n, c, h, w = xb.shape
    if h < 2 or w < 2:
        raise DimensionError(f"max_pool2d: spatial dims {h}x{w} smaller than the 2x2 window")
    ho, wo = h // 2, w // 2
    win = xb[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if single:
        return out[0], idx[0]
    return out, idx


def max_pool2d_backward(grad: np.ndarray, idx: np.ndarray, input_shape) -> np.ndarray:
    if len(input_shape) == 3:
        return max_pool2d_backward(grad[None], idx[None], (1,) + tuple(input_shape))[0]
    n, c, h, w = input_shape
    ho, wo = grad.shape[2], grad.shape[3]
    win = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    out = np.zeros(input_shape, dtype=grad.dtype)
    out[:, :, :2 * ho, :2 * wo] = win
    return out


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: np.ndarray, b: Union[np.ndarray, Scalar, Callable]) -> np.ndarray:
    """Pointwise ``add``/``sub``/``mul``/``scale``/``map``.

    Binary tensor operations require equal shapes; a Python or numpy scalar
    ``b`` is the only broadcast allowed.  ``map`` applies the callable ``b``.
    """
    if op == "map":
        if not callable(b):
            raise ParameterError("elementwise map needs a callable")
        return np.asarray(b(a))
    if op == "scale":
        if not np.isscalar(b):
            raise ParameterError("elementwise scale needs a scalar factor")
        return a * b
    if op not in _BINARY:
        raise ParameterError(f"unknown elementwise op {op!r}")
    if np.isscalar(b):
        return _BINARY[op](a, b)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return _BINARY[op](a, b)
