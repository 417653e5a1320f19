"""Dense tensor/matrix/vector algebra on float64 numpy arrays.

Conventions, fixed across the whole package:
  * everything is float64; no other dtype is ever produced,
  * Tensor3 values are C-ordered 3-way arrays (last axis fastest),
  * there is no implicit broadcasting -- mismatched shapes raise ShapeError.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "as_f64",
    "check_finite",
    "mode_product",
    "outer_product",
    "full_bilinear",
    "matvec",
    "matmul",
    "elementwise_product",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def as_f64(x) -> np.ndarray:
    """Coerce to a C-ordered float64 array (no copy when already one)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def _require(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


def mode_product(tensor: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """Contract `axis` of a 3-way tensor against the rows of `mat`.

    result[..., j, ...] = sum_d tensor[..., d, ...] * mat[d, j], so the
    tensor's `axis` (1, 2 or 3, one-based) of size mat.shape[0] is replaced
    by one of size mat.shape[1].
    """
    tensor = as_f64(tensor)
    mat = as_f64(mat)
    _require(tensor.ndim == 3, f"mode product needs a 3-way tensor, got ndim={tensor.ndim}")
    _require(mat.ndim == 2, f"mode product needs a matrix, got ndim={mat.ndim}")
    _require(axis in (1, 2, 3), f"axis must be 1, 2 or 3, got {axis}")
    k = axis - 1
    _require(
        mat.shape[0] == tensor.shape[k],
        f"axis {axis}: tensor has size {tensor.shape[k]} but matrix has {mat.shape[0]} rows",
    )
    out = np.tensordot(tensor, mat, axes=([k], [0]))
    return np.ascontiguousarray(np.moveaxis(out, -1, k))


def outer_product(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rank-one matrix u v^T."""
    u = as_f64(u)
    v = as_f64(v)
    _require(u.ndim == 1 and v.ndim == 1, "outer product needs two vectors")
    return np.outer(u, v)


def full_bilinear(tensor: np.ndarray, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Contract the first two axes of a 3-way tensor against q and v.

    result[k] = sum_{i,j} tensor[i,j,k] * q[i] * v[j].
    """
    tensor = as_f64(tensor)
    q = as_f64(q)
    v = as_f64(v)
    _require(tensor.ndim == 3, "full_bilinear needs a 3-way tensor")
    _require(
        tensor.shape[0] == q.shape[0],
        f"axis 1: tensor has size {tensor.shape[0]} but q has length {q.shape[0]}",
    )
    _require(
        tensor.shape[1] == v.shape[0],
        f"axis 2: tensor has size {tensor.shape[1]} but v has length {v.shape[0]}",
    )
    return np.einsum("ijk,i,j->k", tensor, q, v)


def matvec(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    mat = as_f64(mat)
    x = as_f64(x)
    _require(mat.ndim == 2 and x.ndim == 1, "matvec needs a matrix and a vector")
    _require(
        mat.shape[1] == x.shape[0],
        f"matvec: matrix has {mat.shape[1]} columns but vector has length {x.shape[0]}",
    )
    return mat @ x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_f64(a)
    b = as_f64(b)
    _require(a.ndim == 2 and b.ndim == 2, "matmul needs two matrices")
    _require(
        a.shape[1] == b.shape[0],
        f"matmul: left has {a.shape[1]} columns but right has {b.shape[0]} rows",
    )
    return a @ b


def elementwise_product(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = as_f64(u)
    v = as_f64(v)
    _require(
        u.shape == v.shape,
        f"elementwise product needs equal shapes, got {u.shape} and {v.shape}",
    )
    return u * v
