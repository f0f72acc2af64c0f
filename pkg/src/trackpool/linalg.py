"""Dense numerical kernel shared by every other module.

Matrices and vectors are plain float64 numpy arrays. The functions here add
shape validation and the numerically stable variants the rest of the package
relies on.
"""
from __future__ import annotations

import numpy as np

LAYER_NORM_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return _check_finite(a @ b, "matmul")


def softmax(v) -> np.ndarray:
    v = as_vector(v)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def row_softmax(m) -> np.ndarray:
    m = as_matrix(m)
    if m.shape[1] == 0:
        raise ValueError("row_softmax of a matrix with no columns")
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("row_softmax input must be finite")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(v, gain, bias, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize ``v`` to zero mean / unit variance, then apply ``gain * x + bias``."""
    v = as_vector(v, "v")
    gain = np.broadcast_to(np.asarray(gain, dtype=np.float64), v.shape) if np.ndim(gain) == 0 else as_vector(gain, "gain")
    bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), v.shape) if np.ndim(bias) == 0 else as_vector(bias, "bias")
    if gain.shape != v.shape or bias.shape != v.shape:
        raise ShapeError(f"layer_norm dims differ: v {v.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    centered = v - v.mean()
    return gain * centered / np.sqrt((centered**2).mean() + eps) + bias


def l2_norm(a) -> float:
    return float(np.sqrt(np.sum(as_vector(a) ** 2)))


def cosine_similarity(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"vector dims differ: {a.shape} vs {b.shape}")
    na, nb = l2_norm(a), l2_norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_distance(a, b) -> float:
    return 1.0 - cosine_similarity(a, b)


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm; zero rows raise."""
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"row {int(bad[0])} has zero norm")
    return m / norms[:, None]


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    an = normalize_rows(a)
    bn = an if b is None else normalize_rows(b)
    return np.clip(an @ bn.T, -1.0, 1.0)
