"""Dense float64 buffers and the handful of primitives the optimizers need.

A buffer is a plain ``numpy.ndarray`` of dtype float64. The helpers here add
the shape checks the rest of the package relies on; no broadcasting is done.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Optional

import numpy as np

COSINE_EPS = 1e-12


class ShapeMismatchError(ValueError):
    """Two buffers that must agree in shape do not."""


class NonFiniteError(ValueError):
    """A buffer holds NaN or inf where finite values are required."""


def as_buffer(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shape {a.shape} != {b.shape}")


def check_finite(x: np.ndarray, name: str = "buffer") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.isfinite(x))
        raise NonFiniteError(
            f"{name}: {bad.size} non-finite entries (first at flat index {bad[0]}, "
            f"value {x.reshape(-1)[bad[0]]!r})"
        )


def elementwise(op: Callable, a, b=None) -> np.ndarray:
    """Apply ``op`` entrywise to ``a`` (and ``b`` when given)."""
    a = as_buffer(a)
    if b is None:
        return np.asarray(op(a), dtype=np.float64).reshape(a.shape)
    b = as_buffer(b)
    check_same_shape(a, b, "elementwise")
    return np.asarray(op(a, b), dtype=np.float64).reshape(a.shape)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two flattened buffers.

    Returns 0.0 when either norm is below ``COSINE_EPS`` so that diagnostic
    streams never abort on a zero vector.
    """
    a = as_buffer(a)
    b = as_buffer(b)
    check_same_shape(a, b, "cosine_similarity")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < COSINE_EPS or nb < COSINE_EPS:
        return 0.0
    c = float(np.dot(a.ravel(), b.ravel()) / (na * nb))
    return min(1.0, max(-1.0, c))


def matmul(a, b) -> np.ndarray:
    a = as_buffer(a)
    b = as_buffer(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def zeros_like(x: np.ndarray) -> np.ndarray:
    return np.zeros(np.shape(x), dtype=np.float64)


def digest(x: np.ndarray, extra: Optional[bytes] = None) -> str:
    """Hex sha256 of the buffer's shape and raw bytes."""
    h = hashlib.sha256()
    arr = np.ascontiguousarray(x, dtype=np.float64)
    h.update(repr(arr.shape).encode())
    h.update(arr.tobytes())
    if extra:
        h.update(extra)
    return h.hexdigest()
