"""Small dense linear-algebra and derivative-checking helpers.

Everything in this package operates on tiny dense systems (state dim <= 10,
control dim <= 2, a handful of constraints), so plain LAPACK-backed dense
routines are used throughout; there is no sparse path.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

# Pivot magnitudes below this are treated as exact singularity.  Doubles have
# ~1e-16 relative precision; 1e-12 leaves headroom for accumulated roundoff.
PIVOT_TOL = 1e-12


class SingularMatrixError(np.linalg.LinAlgError):
    """A pivot fell below PIVOT_TOL; the system is (numerically) singular."""


def solve_linear(M, r):
    """Solve M s = r via partially pivoted LU factorization.

    `r` may be a vector or a matrix of stacked right-hand-side columns.
    Raises SingularMatrixError when any pivot magnitude drops below
    PIVOT_TOL, which downstream signals a degenerate KKT system.
    """
    M = np.asarray(M, dtype=float)
    r = np.asarray(r, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if r.shape[0] != M.shape[0]:
        raise ValueError(f"rhs length {r.shape[0]} != matrix size {M.shape[0]}")
    if M.shape[0] == 0:
        return np.zeros_like(r)
    with warnings.catch_warnings():
        # exact zeros on the LU diagonal are reported via SingularMatrixError
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(M, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < PIVOT_TOL:
        raise SingularMatrixError(
            f"pivot below {PIVOT_TOL:g} during LU of {M.shape[0]}x{M.shape[1]} matrix"
        )
    return lu_solve((lu, piv), r, check_finite=False)


def kron(a, b):
    """Kronecker product; shape (ra*rb, ca*cb)."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def finite_diff_grad(f, v, eps=1e-6):
    """Central-difference gradient of a scalar function at v.

    The workhorse oracle for every analytic derivative in this package:
    (f(v + eps*e_i) - f(v - eps*e_i)) / (2 eps) per coordinate.
    """
    v = np.asarray(v, dtype=float)
    grad = np.zeros_like(v)
    for i in range(v.size):
        step = np.zeros_like(v)
        step[i] = eps
        grad[i] = (f(v + step) - f(v - step)) / (2.0 * eps)
    return grad


def finite_diff_jac(f, v, eps=1e-6):
    """Central-difference Jacobian of a vector-valued function at v."""
    v = np.asarray(v, dtype=float)
    cols = []
    for i in range(v.size):
        step = np.zeros_like(v)
        step[i] = eps
        cols.append((np.asarray(f(v + step)) - np.asarray(f(v - step))) / (2.0 * eps))
    return np.stack(cols, axis=-1)
