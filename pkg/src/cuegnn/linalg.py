"""Dense double-precision kernels shared by the model, training and data layers.

Everything here is a thin, shape-checked wrapper around numpy. All inputs are
coerced to ``float64``; all functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "as_matrix",
    "as_vector",
    "matvec",
    "relu",
    "sigmoid",
    "tanh",
    "softmax_stable",
    "hadamard",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, raising ShapeError otherwise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array, raising ShapeError otherwise."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product ``m @ v``.

    ``m`` is (rows, cols) and ``v`` has length cols; returns length rows.
    """
    m = as_matrix(m, "m")
    v = as_vector(v, "v")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(
            f"matvec dimension mismatch: matrix {m.shape} vs vector {v.shape}"
        )
    return m @ v


def relu(v) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def sigmoid(v) -> np.ndarray:
    """Elementwise logistic function, computed without overflow for large |x|."""
    x = np.asarray(v, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(v) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(np.asarray(v, dtype=np.float64))


def softmax_stable(logits) -> np.ndarray:
    """Softmax over the last axis with max-subtraction.

    Accepts a vector or a matrix of row-wise logits; entries of magnitude 1e3
    do not overflow. Each output row sums to 1 within 1e-12.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ShapeError(f"softmax_stable requires non-empty logits, got shape {x.shape}")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two equal-length vectors."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"hadamard length mismatch: {a.shape} vs {b.shape}")
    return a * b
