"""Dense float32 kernels for the toy transformer.

Matrices and vectors are plain ``np.ndarray`` objects with dtype float32.
Every kernel is a pure function of its inputs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DTYPE = np.float32

# ops counted per softmax score: max, subtract, exp, sum, divide
SOFTMAX_FLOPS_PER_SCORE = 5


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class FlopCounter:
    """Accumulates floating point operation counts by tag.

    Only active inside :func:`count_flops`; kernels call :func:`record`.
    """

    def __init__(self) -> None:
        self.counts: dict[str, int] = {}

    def add(self, tag: str, n: int) -> None:
        self.counts[tag] = self.counts.get(tag, 0) + int(n)

    def total(self) -> int:
        return sum(self.counts.values())


_active_counter: FlopCounter | None = None


@contextmanager
def count_flops():
    """Context manager yielding a :class:`FlopCounter` that sees every tagged kernel call."""
    global _active_counter
    prev = _active_counter
    counter = FlopCounter()
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = prev


def record(tag: str | None, n: int) -> None:
    if tag is not None and _active_counter is not None:
        _active_counter.add(tag, n)


def as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray, tag: str | None = None) -> np.ndarray:
    """Matrix product of ``a[m, k]`` and ``b[k, n]`` in float32.

    A 1-D ``a`` is treated as a single row. ``tag`` labels the work for
    :func:`count_flops` (2 flops per multiply-add).
    """
    a = as_f32(a)
    b = as_f32(b)
    if b.ndim != 2 or a.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    rows = 1 if a.ndim == 1 else a.shape[0]
    record(tag, 2 * rows * a.shape[-1] * b.shape[1])
    return np.matmul(a, b).astype(DTYPE, copy=False)


def causal_softmax_rows(scores: np.ndarray, scale: float, offset: int = 0,
                        tag: str | None = None) -> np.ndarray:
    """Row-wise softmax of ``scale * scores`` under a causal mask.

    Row ``r`` attends to columns ``0..r + offset``; everything to the right is
    exactly zero. ``offset`` lets a block of trailing rows (decode) reuse the
    same kernel: a single row of length T uses ``offset = T - 1``.
    """
    s = as_f32(scores)
    if s.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got {s.shape}")
    if offset == 0 and s.shape[0] != s.shape[1]:
        raise ShapeError(f"scores must be square, got {s.shape}")
    if np.isnan(s).any():
        raise ValueError("NaN in attention scores")
    n_rows, n_cols = s.shape
    record(tag, SOFTMAX_FLOPS_PER_SCORE * n_rows * n_cols)
    r = np.arange(n_rows)[:, None] + offset
    c = np.arange(n_cols)[None, :]
    allowed = c <= r
    z = np.where(allowed, s * DTYPE(scale), -np.inf).astype(DTYPE)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(allowed, np.exp(z), DTYPE(0.0))
    return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE, copy=False)


def rmsnorm(v: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """Scale the last axis of ``v`` to unit root-mean-square, then multiply by ``gain``."""
    v = as_f32(v)
    gain = as_f32(gain)
    if v.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rmsnorm length mismatch: {v.shape[-1]} vs {gain.shape[-1]}")
    ms = np.mean(v * v, axis=-1, keepdims=True)
    denom = np.sqrt(ms + DTYPE(eps))
    # all-zero input stays zero even with eps = 0
    out = np.divide(v, denom, out=np.zeros_like(v), where=denom > 0)
    return (out * gain).astype(DTYPE, copy=False)


def rope_angles(positions, dim: int, theta_base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``[len(positions), dim // 2]``."""
    if dim % 2:
        raise ShapeError(f"rotary dimension must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    k = np.arange(dim // 2, dtype=np.float64)
    inv_freq = theta_base ** (-2.0 * k / dim)
    ang = pos * inv_freq[None, :]
    return np.cos(ang).astype(DTYPE), np.sin(ang).astype(DTYPE)


def rope_apply(x: np.ndarray, position, theta_base: float) -> np.ndarray:
    """Rotate consecutive pairs ``(x[2k], x[2k+1])`` by ``position / theta_base**(2k/dim)``.

    ``x`` may be a single head vector (``position`` an int) or an array
    ``[..., T, dim]`` with ``position`` a length-T sequence.
    """
    x = as_f32(x)
    dim = x.shape[-1]
    if dim % 2:
        raise ShapeError(f"rotary dimension must be even, got {dim}")
    scalar = np.ndim(position) == 0
    cos, sin = rope_angles(np.atleast_1d(position), dim, theta_base)
    if scalar:
        cos, sin = cos[0], sin[0]
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def silu(x: np.ndarray) -> np.ndarray:
    x = as_f32(x)
    return (x / (DTYPE(1.0) + np.exp(-x))).astype(DTYPE, copy=False)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the last axis, computed in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
