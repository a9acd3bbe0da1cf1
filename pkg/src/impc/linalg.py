"""Dense LU solve with partial pivoting.

Vectors and matrices throughout the package are plain float64 numpy arrays;
this module adds the one factorization the solvers need and the dimension
checks that numpy's broadcasting would otherwise skip.
"""

from __future__ import annotations

import numpy as np

PIVOT_TOL = 1e-12


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, row: int, pivot: float):
        super().__init__(f"matrix is singular to working precision: pivot {pivot:.3e} at row {row}")
        self.row = row
        self.pivot = pivot


def as_matrix(a, name: str = "A") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (LU, perm) with unit-lower L and U packed into one array."""
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise ValueError(f"LU needs a square matrix, got {a.shape}")
    lu = a.copy()
    perm = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) < PIVOT_TOL:
            raise SingularMatrixError(k, float(lu[p, k]))
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm


def lu_solve(lu: np.ndarray, perm: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = lu.shape[0]
    y = np.array(b, dtype=float)[perm]
    for i in range(1, n):
        y[i] -= lu[i, :i] @ y[:i]
    for i in range(n - 1, -1, -1):
        y[i] = (y[i] - lu[i, i + 1:] @ y[i + 1:]) / lu[i, i]
    return y


def solve_linear(a, b, refine: int = 1) -> np.ndarray:
    """Solve ``a @ x = b`` for square, full-rank ``a``.

    ``b`` may be a vector or a matrix of right-hand sides. One round of
    iterative refinement is applied by default, which keeps the residual
    within ``1e-9 * (1 + |b|_inf)`` for the moderately conditioned systems
    built by the MPC and KKT code.
    """
    a = as_matrix(a)
    b = np.asarray(b, dtype=float)
    if b.ndim not in (1, 2) or b.shape[0] != a.shape[0]:
        raise ValueError(f"shape mismatch: A is {a.shape}, b is {b.shape}")
    lu, perm = lu_factor(a)
    x = lu_solve(lu, perm, b)
    for _ in range(refine):
        x += lu_solve(lu, perm, b - a @ x)
    return x
