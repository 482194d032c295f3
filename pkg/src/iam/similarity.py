"""Similarity between causal attention matrices.

All reductions run in float64: argmax selection over hundreds of nearly
uniform matrices must not flip on float32 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from iam.numerics import ShapeError


class DomainError(ValueError):
    """Metric undefined for the given input (zero or constant vector)."""


@dataclass(frozen=True)
class SimilarityMetric:
    """Which score ranks candidate matrices.

    ``kind`` is one of ``cosine``, ``minkowski``, ``pearson`` or
    ``cosine_norm``. ``cosine_norm`` ranks exactly like cosine; the
    difference is applied when the chosen matrix is substituted (see
    :func:`norm_compensation_scale`).
    """

    kind: str = "cosine"
    p: float = 2.0

    KINDS = ("cosine", "minkowski", "pearson", "cosine_norm")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown metric {self.kind!r}")
        if self.kind == "minkowski" and self.p < 1:
            raise ValueError("Minkowski p must be >= 1")

    @classmethod
    def parse(cls, name: str) -> "SimilarityMetric":
        """CLI names: cosine, minkowski1, minkowski2, pearson, cosine-norm."""
        if name.startswith("minkowski"):
            return cls("minkowski", float(name[len("minkowski"):] or 2))
        return cls(name.replace("-", "_"))

    @property
    def name(self) -> str:
        if self.kind == "minkowski":
            return f"minkowski{self.p:g}"
        return self.kind.replace("_", "-")

    @property
    def ranks_by_cosine(self) -> bool:
        return self.kind in ("cosine", "cosine_norm")


COSINE = SimilarityMetric("cosine")


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = _vec(x), _vec(y)
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    return x, y


def flatten_lower_triangular(a) -> np.ndarray:
    """Row-major concatenation of entries ``(r, c)`` with ``c <= r``."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    return a[np.tril_indices(a.shape[0])]


def cosine(x, y) -> float:
    x, y = _pair(x, y)
    nx_, ny_ = np.linalg.norm(x), np.linalg.norm(y)
    if nx_ == 0 or ny_ == 0:
        raise DomainError("cosine of a zero vector")
    return float(np.clip(x @ y / (nx_ * ny_), -1.0, 1.0))


def minkowski(x, y, p: float) -> float:
    if p < 1:
        raise ValueError("Minkowski p must be >= 1")
    x, y = _pair(x, y)
    return float(np.sum(np.abs(x - y) ** p) ** (1.0 / p))


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    if x.size < 2:
        raise DomainError("Pearson needs at least two elements")
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt(xc @ xc) * np.sqrt(yc @ yc)
    if den == 0:
        raise DomainError("Pearson of a constant vector")
    return float(np.clip(xc @ yc / den, -1.0, 1.0))


def trace_cosine(a, b) -> float:
    """``Tr(A^T B) / (||A||_F ||B||_F)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    den = np.linalg.norm(a) * np.linalg.norm(b)
    if den == 0:
        raise DomainError("zero matrix")
    # Tr(A^T B) is the sum of elementwise products
    return float(np.clip(np.einsum("ij,ij->", a, b) / den, -1.0, 1.0))


def attention_similarity(a, b, metric: SimilarityMetric = COSINE) -> float:
    """Score of ``b`` as a stand-in for ``a``; larger is always better.

    Minkowski distances come back negated.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if metric.ranks_by_cosine:
        return trace_cosine(a, b)
    x, y = flatten_lower_triangular(a), flatten_lower_triangular(b)
    if metric.kind == "minkowski":
        return -minkowski(x, y, metric.p)
    return pearson(x, y)


def truncate_for_similarity(a, tau_t: int) -> np.ndarray:
    """Leading ``tau_t x tau_t`` block of ``a`` (attention among the first tokens)."""
    if tau_t < 1:
        raise ValueError("tau_t must be >= 1")
    a = np.asarray(a)
    n = min(a.shape[-1], tau_t)
    return a[..., :n, :n]


def batch_similarity(large: np.ndarray, small: np.ndarray, metric: SimilarityMetric = COSINE) -> np.ndarray:
    """Vectorised :func:`attention_similarity` for every pair.

    ``large`` is ``[m, N, N]``, ``small`` is ``[n, N, N]``; the result is ``[m, n]``.
    """
    large = np.asarray(large)
    small = np.asarray(small)
    if large.shape[1:] != small.shape[1:]:
        raise ShapeError(f"matrix size mismatch: {large.shape[1:]} vs {small.shape[1:]}")
    n = large.shape[-1]
    rows, cols = np.tril_indices(n)
    x = large[:, rows, cols].astype(np.float64)
    y = small[:, rows, cols].astype(np.float64)
    if metric.kind == "pearson":
        x = x - x.mean(axis=1, keepdims=True)
        y = y - y.mean(axis=1, keepdims=True)
    if metric.kind == "minkowski":
        out = np.empty((x.shape[0], y.shape[0]))
        for i in range(x.shape[0]):
            out[i] = -np.sum(np.abs(x[i][None, :] - y) ** metric.p, axis=1) ** (1.0 / metric.p)
        return out
    nx_ = np.linalg.norm(x, axis=1)
    ny_ = np.linalg.norm(y, axis=1)
    if (nx_ == 0).any() or (ny_ == 0).any():
        raise DomainError(f"{metric.name} undefined for a zero/constant matrix")
    return np.clip((x @ y.T) / np.outer(nx_, ny_), -1.0, 1.0)


def norm_compensation_scale(a, b) -> float:
    """Factor ``||A||_2 / ||A'||_2`` applied to a substituted matrix ``A'``."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64))
                 / np.linalg.norm(np.asarray(b, dtype=np.float64)))
