"""Public tensor primitives.

Arrays are float64, C-contiguous, row-major throughout the package.  The
wrappers here validate shapes and delegate to the active kernel backend;
see stunmoe._pykernels for the reduction-order contract that makes results
independent of the backend and of thread count.
"""

import numpy as np

from stunmoe.backend import active_backend
from stunmoe.errors import ArgumentError, ShapeError


def as_array(x, name="array"):
    a = np.ascontiguousarray(x, dtype=np.float64)
    return a


def as_matrix(x, name="matrix"):
    a = as_array(x, name)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected 2 dimensions, got {a.ndim}")
    return a


def as_vector(x, name="vector"):
    a = as_array(x, name)
    if a.ndim != 1:
        raise ShapeError(f"{name}: expected 1 dimension, got {a.ndim}")
    return a


def check_finite(a, name="array"):
    if not np.isfinite(a).all():
        raise ShapeError(f"{name}: contains non-finite entries")
    return a


def matmul(a, b):
    """Matrix product with a fixed ascending-k accumulation order."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]})"
        )
    return active_backend().matmul(a, b)


def softmax(v):
    """Max-shifted softmax; the denominator is a left-to-right sum."""
    v = as_vector(v, "v")
    if v.size == 0:
        raise ShapeError("softmax: empty vector")
    return active_backend().softmax(v)


def topk(v, k):
    """Indices of the k largest entries, value-descending, ties -> lower index."""
    v = as_vector(v, "v")
    if not 1 <= k <= v.size:
        raise ArgumentError(f"topk: k={k} outside [1, {v.size}]")
    return [int(i) for i in active_backend().topk(v, k)]


def frobenius_norm(t):
    """Frobenius norm over the row-major flattening of any array."""
    t = as_array(t, "t")
    return float(active_backend().frobenius(np.ravel(t)))
