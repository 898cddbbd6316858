"""Sparse LU, dense solves and SVD with explicit failure modes.

Thin wrappers over SuperLU (scipy) and LAPACK (numpy/scipy) that enforce
the residual and singularity contracts used by the solvers.
"""
from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

PIVOT_TOL = 1e-14


class SingularMatrixError(np.linalg.LinAlgError):
    """Structural or numerical singularity detected during factorisation."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


def as_csr(a) -> sp.csr_matrix:
    """Canonical CSR: sorted, duplicate-free column indices."""
    m = sp.csr_matrix(a)
    m.sum_duplicates()
    m.sort_indices()
    return m


class SparseLU:
    """Immutable sparse LU factorisation (threshold partial pivoting, SuperLU).

    ``solve(b, trans=True)`` solves with the transpose using the same
    factors, which the adjoint solves rely on.
    """

    def __init__(self, a):
        a = sp.csc_matrix(a)
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"square matrix required, got {a.shape}")
        self.shape = a.shape
        amax = abs(a).max() if a.nnz else 0.0
        if amax == 0.0:
            raise SingularMatrixError("zero matrix")
        try:
            self._lu = spla.splu(a, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01)
        except RuntimeError as exc:  # SuperLU reports exact singularity this way
            raise SingularMatrixError(str(exc)) from None
        piv = np.abs(self._lu.U.diagonal())
        if piv.size and piv.min() < PIVOT_TOL * amax:
            raise SingularMatrixError(
                f"pivot {piv.min():.3e} below {PIVOT_TOL:g} * max|A| = {PIVOT_TOL * amax:.3e}")

    def solve(self, b, trans: bool = False) -> np.ndarray:
        x = self._lu.solve(np.asarray(b, dtype=float), trans="T" if trans else "N")
        if not np.all(np.isfinite(x)):
            raise SingularMatrixError("non-finite solution")
        return x


def lu_solve(a, b) -> np.ndarray:
    """Solve ``a x = b`` for sparse ``a``."""
    return SparseLU(a).solve(b)


def residual_ok(a, x, b, rtol: float = 1e-10) -> bool:
    """Backward-error check ``|Ax-b|_inf <= rtol (|A|_inf |x|_inf + |b|_inf)``."""
    r = a @ x - b
    if sp.issparse(a):
        anorm = abs(a).sum(axis=1).max()
    else:
        anorm = np.abs(a).sum(axis=1).max()
    return bool(np.abs(r).max() <= rtol * (anorm * np.abs(x).max() + np.abs(b).max()))


class DenseLU:
    def __init__(self, a):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"square matrix required, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite matrix entries")
        amax = np.abs(a).max() if a.size else 0.0
        if amax == 0.0:
            raise SingularMatrixError("zero matrix")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            self._lu, self._piv = sla.lu_factor(a, check_finite=False)
        piv = np.abs(np.diag(self._lu))
        if piv.min() < PIVOT_TOL * amax:
            raise SingularMatrixError(
                f"pivot {piv.min():.3e} below {PIVOT_TOL:g} * max|A| = {PIVOT_TOL * amax:.3e}")

    def solve(self, b, trans: bool = False) -> np.ndarray:
        return sla.lu_solve((self._lu, self._piv), np.asarray(b, dtype=float),
                            trans=1 if trans else 0, check_finite=False)


def dense_solve(a, b) -> np.ndarray:
    return DenseLU(a).solve(b)


def svd(s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``S = U diag(sigma) V^T``; returns ``(U, sigma, V)``."""
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite entries")
    try:
        u, sigma, vt = np.linalg.svd(s, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD did not converge: {exc}") from None
    return u, sigma, vt.T
