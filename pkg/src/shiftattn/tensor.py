"""Dense array primitives used by the attention kernels.

Tensors are plain :class:`numpy.ndarray` values in row-major layout with the
sequence axis second-to-last.  The helpers here validate shapes and keep a
single floating precision per computation.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

PRECISIONS = {"double": np.float64, "single": np.float32}

# Masked logits are pushed to this value; exp() of it underflows to exactly 0.
MASK_VALUE = -1e30


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ConfigError(ValueError):
    """A configuration constraint (divisibility, parity, range) is violated."""


class NumericError(ArithmeticError):
    """NaN (or another non-finite value) reached a kernel."""


def as_tensor(x, precision: str = "double") -> np.ndarray:
    try:
        dtype = PRECISIONS[precision]
    except KeyError:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}") from None
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 0 or 0 in arr.shape:
        raise ShapeError(f"tensor dimensions must all be >= 1, got shape {arr.shape}")
    return arr


def precision_of(*tensors: np.ndarray) -> str:
    """Return the shared precision name, refusing silent mixing."""
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise ShapeError(f"mixed precisions in one computation: {sorted(str(d) for d in dtypes)}")
    dtype = dtypes.pop()
    for name, dt in PRECISIONS.items():
        if dtype == dt:
            return name
    raise ShapeError(f"unsupported dtype {dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def softmax_lastdim(t: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Stable softmax of ``scale * t`` along the last axis.

    Slices made entirely of :data:`MASK_VALUE` come back as all zeros.
    """
    if not np.isfinite(scale):
        raise NumericError(f"softmax scale must be finite, got {scale}")
    if np.isnan(t).any():
        raise NumericError("NaN in softmax input")
    masked = t <= MASK_VALUE
    logits = np.where(masked, MASK_VALUE, t * scale)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    e[masked] = 0.0
    denom = e.sum(axis=-1, keepdims=True)
    dead = denom == 0.0
    return np.where(dead, 0.0, e / np.where(dead, 1.0, denom)).astype(t.dtype, copy=False)


def _check_bhnd(t: np.ndarray) -> int:
    if t.ndim != 4:
        raise ShapeError(f"expected a [B,H,N,D] tensor, got shape {t.shape}")
    return t.shape[2]


def roll_seq(t: np.ndarray, shift: int) -> np.ndarray:
    """Circular right shift along the sequence axis: ``out[..., j, :] = t[..., (j - shift) % N, :]``."""
    n = _check_bhnd(t)
    if not 0 <= shift < n:
        raise ConfigError(f"shift must lie in [0, {n}), got {shift}")
    if shift == 0:
        return t.copy()
    return np.concatenate([t[:, :, n - shift:], t[:, :, : n - shift]], axis=2)


def chunk_reshape(t: np.ndarray, w: int) -> np.ndarray:
    n = _check_bhnd(t)
    if w < 1 or n % w:
        raise ConfigError(f"window {w} must divide sequence length {n}")
    b, h, _, d = t.shape
    return t.reshape(b, h, n // w, w, d)


def chunk_flatten(t: np.ndarray) -> np.ndarray:
    """Inverse of :func:`chunk_reshape`."""
    if t.ndim != 5:
        raise ShapeError(f"expected a [B,H,M,W,D] tensor, got shape {t.shape}")
    b, h, m, w, d = t.shape
    return t.reshape(b, h, m * w, d)


def _check_index(idx: Sequence[int], n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise IndexError("index list must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"index out of range [0, {n}): {idx.tolist()}")
    if np.any(np.diff(idx) <= 0):
        raise IndexError("index list must be strictly increasing")
    return idx


def gather_seq(t: np.ndarray, idx: Sequence[int]) -> np.ndarray:
    n = _check_bhnd(t)
    return t[:, :, _check_index(idx, n)]


def scatter_seq(t: np.ndarray, idx: Sequence[int], n: int) -> np.ndarray:
    """Place rows of ``t`` at ``idx`` in a zero tensor of sequence length ``n``."""
    _check_bhnd(t)
    idx = _check_index(idx, n)
    if len(idx) != t.shape[2]:
        raise ShapeError(f"{len(idx)} indices for {t.shape[2]} rows")
    out = np.zeros(t.shape[:2] + (n, t.shape[3]), dtype=t.dtype)
    out[:, :, idx] = t
    return out
