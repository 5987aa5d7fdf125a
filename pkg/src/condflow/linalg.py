"""Small dense linear algebra on float64 arrays.

Everything here operates on plain numpy arrays; the differentiable wrappers
live in :mod:`condflow.tensor`. The matrices involved are channel-mixing
weights, so sizes stay small (a few dozen at most) and a straightforward
LU decomposition with partial pivoting is both fast enough and easy to audit.
"""

from __future__ import annotations

import numpy as np

# Pivot magnitudes below this are treated as exact singularity. Chosen well
# below every log-det tolerance used by the verification suites.
PIVOT_TOL = 1e-12


class SingularMatrixError(ValueError):
    """Raised when a pivot falls below PIVOT_TOL during factorization."""


def lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """LU-factorize a square matrix with partial pivoting.

    Returns ``(lu, perm, sign)`` where ``lu`` packs the unit-lower and upper
    triangular factors, ``perm`` is the row permutation applied to ``a``
    (``a[perm] == L @ U``), and ``sign`` is the permutation's signature.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    perm = np.arange(n)
    sign = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_TOL:
            raise SingularMatrixError(
                f"matrix is singular to working precision (pivot {a[p, k]:.3e} "
                f"at column {k})"
            )
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    return a, perm, sign


def slogdet(a: np.ndarray) -> tuple[float, float]:
    """Sign and log of the absolute determinant, via LU.

    Raises SingularMatrixError for matrices with a pivot below PIVOT_TOL.
    """
    lu, _, sign = lu_factor(a)
    diag = np.diag(lu)
    sign *= float(np.prod(np.sign(diag)))
    return sign, float(np.sum(np.log(np.abs(diag))))


def lu_solve(lu: np.ndarray, perm: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` given the packed LU factors of ``A``.

    ``b`` may carry multiple right-hand sides as columns.
    """
    x = np.array(b, dtype=np.float64)[perm]
    n = lu.shape[0]
    for k in range(1, n):  # forward substitution, unit lower triangle
        x[k] -= lu[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):  # back substitution
        x[k] -= lu[k, k + 1:] @ x[k + 1:]
        x[k] /= lu[k, k]
    return x


def inverse(a: np.ndarray) -> np.ndarray:
    """Matrix inverse via LU solves against the identity."""
    lu, perm, _ = lu_factor(a)
    return lu_solve(lu, perm, np.eye(lu.shape[0]))
