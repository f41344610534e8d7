"""Dense array kernels, seeded randomness and forward/backward primitives.

Arrays are plain ``numpy.ndarray`` objects. Two precision modes are
supported: ``float32`` (training default) and ``float64`` (verification).
Convolution uses the cross-correlation convention (no kernel flip) with
valid padding.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


def resolve_dtype(precision) -> np.dtype:
    """Map ``32``/``64`` (or a numpy dtype) to a floating dtype."""
    if precision in (32, "32", None):
        return np.dtype(np.float32)
    if precision in (64, "64"):
        return np.dtype(np.float64)
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision: {precision!r}")
    return dt


def make_rng(seed, *stream) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and an optional stream key.

    Distinct stream keys (e.g. ``("shuffle", round, epoch)``) give
    independent generators, so callers never share mutable RNG state.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in stream:
        if isinstance(part, str):
            key.append(int.from_bytes(part.encode()[:8].ljust(8, b"\0"), "little"))
        else:
            key.append(int(part))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) strided view; no copy
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Patch matrix of a batch: ``(N, C*kh*kw, H'*W')``, contiguous."""
    win = _windows(x, kh, kw, stride)
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c * kh * kw, ho * wo)


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1,
           return_cols: bool = False):
    """Valid cross-correlation of ``x`` with ``kernels``.

    ``x`` is ``(C_in, H, W)`` or a batch ``(N, C_in, H, W)``; ``kernels`` is
    ``(C_out, C_in, kH, kW)``. The output has spatial extent
    ``floor((H - kH) / stride) + 1`` (same for the width). With
    ``return_cols`` the patch matrix is returned too, for reuse by
    :func:`conv2d_backward`.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"bad conv operands {x.shape}, {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise DimensionError(f"kernel expects {ci} channels, input has {c}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    cols = im2col(x, kh, kw, stride)
    out = np.matmul(kernels.reshape(co, -1), cols).reshape(n, co, ho, wo)
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, upstream: np.ndarray,
                    stride: int = 1, need_input_grad: bool = True, cols=None):
    """Gradients of a batched :func:`conv2d` w.r.t. kernels and input.

    ``cols`` is the patch matrix from the forward pass (recomputed if None).
    Returns ``(d_kernels, d_input)``; ``d_input`` is None when not requested.
    """
    co, ci, kh, kw = kernels.shape
    n, _, ho, wo = upstream.shape
    if cols is None:
        cols = im2col(x, kh, kw, stride)
    up = upstream.reshape(n, co, ho * wo)
    d_kernels = np.matmul(up, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
    if not need_input_grad:
        return d_kernels, None
    # per-offset input contributions, then scatter-add back onto the input grid
    contrib = np.matmul(kernels.reshape(co, -1).T, up).reshape(n, ci, kh, kw, ho, wo)
    d_x = np.zeros(x.shape, dtype=np.result_type(x, upstream))
    for i in range(kh):
        for j in range(kw):
            d_x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                contrib[:, :, i, j]
    return d_kernels, d_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is 0
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    z = np.asarray(logits)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def sample_simplex(dim: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw uniformly from the probability simplex of dimension ``dim``.

    Independent unit-exponential draws normalized by their sum, which is a
    Dirichlet(1, ..., 1) sample. With ``size`` given, returns a
    ``(size, dim)`` array of independent draws.
    """
    if dim < 1:
        raise ValueError("simplex dimension must be >= 1")
    e = rng.standard_exponential((1 if size is None else size, dim))
    # all-zero rows have probability zero but would divide by zero
    bad = e.sum(axis=1) == 0
    while np.any(bad):
        e[bad] = rng.standard_exponential((int(bad.sum()), dim))
        bad = e.sum(axis=1) == 0
    w = e / e.sum(axis=1, keepdims=True)
    return w[0] if size is None else w
