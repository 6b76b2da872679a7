"""Elementary vector operations used throughout the toolkit.

Arrays are plain numpy float64 ndarrays; everything here treats them as
immutable values.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonFiniteError, ZeroNormError


def as_vector(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def cosine(u, v) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    The dot product is computed once, so the result is symmetric in its
    arguments by construction.  Raises :class:`ZeroNormError` when either
    vector has zero norm; the caller decides how to treat such pairs.
    """
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise ValueError(f"vectors differ in length: {u.size} vs {v.size}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine undefined for a zero-norm vector")
    c = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, c))


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Independent oracle for the analytic backward pass: perturbs one
    coordinate at a time, so cost is 2*len(theta) evaluations of ``f``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = as_vector(theta).copy()
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        orig = theta[k]
        theta[k] = orig + eps
        f_plus = float(f(theta))
        theta[k] = orig - eps
        f_minus = float(f(theta))
        theta[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"probe at coordinate {k} evaluated to a non-finite value")
        grad[k] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN/Inf")
    return arr
