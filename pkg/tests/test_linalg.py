"""LU factorization, log-determinant, solve, and inverse.

Oracles: a cofactor-expansion determinant (independent recursion, usable
up to n=6 or so) and numpy.linalg for larger sizes. The package's own
routines never call numpy.linalg, so the comparison is meaningful.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from condflow.linalg import (PIVOT_TOL, SingularMatrixError, inverse,
                             lu_factor, lu_solve, slogdet)


def det_cofactor(a: np.ndarray) -> float:
    """Determinant by first-row cofactor expansion. O(n!) but independent."""
    n = a.shape[0]
    if n == 1:
        return float(a[0, 0])
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(a, 0, axis=0), j, axis=1)
        total += (-1.0) ** j * a[0, j] * det_cofactor(minor)
    return total


class TestSlogdet:
    def test_matches_cofactor_expansion_small(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 7))
            a = rng.normal(size=(n, n))
            want = det_cofactor(a)
            sign, logabs = slogdet(a)
            assert sign == np.sign(want)
            assert_allclose(logabs, np.log(abs(want)), rtol=1e-9)

    def test_matches_numpy_larger(self):
        rng = np.random.default_rng(1)
        for n in (8, 12, 16, 24):
            a = rng.normal(size=(n, n))
            want_sign, want_log = np.linalg.slogdet(a)
            sign, logabs = slogdet(a)
            assert sign == want_sign
            assert_allclose(logabs, want_log, rtol=1e-9)

    def test_identity(self):
        sign, logabs = slogdet(np.eye(5))
        assert sign == 1.0
        assert logabs == 0.0

    def test_singular_raises(self):
        a = np.ones((3, 3))
        with pytest.raises(SingularMatrixError):
            slogdet(a)

    def test_near_singular_below_pivot_threshold(self):
        a = np.diag([1.0, 1.0, PIVOT_TOL / 10])
        with pytest.raises(SingularMatrixError):
            slogdet(a)


class TestFactorSolveInverse:
    def test_factorization_reconstructs(self):
        rng = np.random.default_rng(2)
        for n in (1, 2, 5, 9):
            a = rng.normal(size=(n, n))
            lu, perm, sign = lu_factor(a)
            lower = np.tril(lu, -1) + np.eye(n)
            upper = np.triu(lu)
            assert_allclose(lower @ upper, a[perm], atol=1e-12)
            assert sign in (1.0, -1.0)

    def test_solve_residual(self):
        rng = np.random.default_rng(3)
        for n in (2, 6, 11):
            a = rng.normal(size=(n, n))
            b = rng.normal(size=n)
            lu, perm, _ = lu_factor(a)
            x = lu_solve(lu, perm, b)
            assert_allclose(a @ x, b, atol=1e-9)

    def test_solve_multiple_rhs(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 5))
        b = rng.normal(size=(5, 3))
        lu, perm, _ = lu_factor(a)
        x = lu_solve(lu, perm, b)
        assert_allclose(a @ x, b, atol=1e-9)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(5)
        for n in (1, 3, 7, 12):
            a = rng.normal(size=(n, n))
            assert_allclose(a @ inverse(a), np.eye(n), atol=1e-9)
            assert_allclose(inverse(a) @ a, np.eye(n), atol=1e-9)

    def test_permutation_matrix_exact(self):
        p = np.eye(4)[[2, 0, 3, 1]]
        sign, logabs = slogdet(p)
        assert abs(sign) == 1.0
        assert logabs == 0.0
        assert_allclose(inverse(p), p.T, atol=0)

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            lu_factor(np.ones((2, 3)))
