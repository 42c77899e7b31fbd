"""Structured matrix kernels shared by the solvers and the CRB engine."""

from __future__ import annotations

import numpy as np
import scipy.linalg

from ._kernels import toeplitz_adjoint_kernel, toeplitz_kernel

HERMITIAN_TOL = 1e-10


class SolverError(RuntimeError):
    """Raised when a numerical subproblem cannot be solved."""


def hermitian_part(H):
    H = np.asarray(H)
    return (H + H.conj().T) / 2


def toeplitz(iota):
    """Hermitian Toeplitz matrix with first column ``iota`` (``iota[0]`` real)."""
    iota = np.asarray(iota, dtype=complex)
    return toeplitz_kernel(iota)


def toeplitz_adjoint(M, check=True):
    """Adjoint of :func:`toeplitz` under the real inner products.

    ``Re tr(Toep(x)^H M) == Re(x^H toeplitz_adjoint(M))`` for every generator
    ``x`` with real first entry.
    """
    M = np.asarray(M, dtype=complex)
    if check:
        scale = max(1.0, float(np.abs(M).max(initial=0.0)))
        if np.abs(M - M.conj().T).max(initial=0.0) > HERMITIAN_TOL * scale:
            raise ValueError("toeplitz_adjoint expects a Hermitian matrix")
    return toeplitz_adjoint_kernel(M)


def psd_project(H):
    """Frobenius-nearest PSD matrix (negative eigenvalues clipped to zero)."""
    H = hermitian_part(H)
    try:
        # only the positive part is needed; the iterates are typically low rank
        w, V = scipy.linalg.eigh(H, driver="evx", subset_by_value=(0.0, np.inf), check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"eigendecomposition failed: {exc}") from exc
    keep = w > 0
    if not keep.any():
        return np.zeros_like(H)
    Vk = V[:, keep]
    return hermitian_part((Vk * w[keep]) @ Vk.conj().T)


def pinv_rcond(A):
    return max(A.shape) * np.finfo(float).eps


def pinv(A):
    A = np.asarray(A, dtype=complex)
    if A.size == 0:
        return np.zeros(A.shape[::-1], complex)
    return np.linalg.pinv(A, rcond=pinv_rcond(A))


def col_projector(A):
    """Orthogonal projector ``A A^+`` onto the column space of ``A``."""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[1] == 0:
        n = A.shape[0]
        return np.zeros((n, n), complex)
    return A @ pinv(A)


def ridge_solve(A, b, lam):
    """``argmin ||b - A x||^2 + lam ||x||^2``."""
    A = np.asarray(A, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    k = A.shape[1]
    if k == 0:
        return np.zeros(0, complex)
    G = A.conj().T @ A + lam * np.eye(k)
    rhs = A.conj().T @ b
    if lam == 0:
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] <= pinv_rcond(A) * s[0]:
            raise SolverError("normal matrix is singular at lam=0")
    try:
        c = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"ridge normal matrix not positive definite: {exc}") from exc
    return np.linalg.solve(c.conj().T, np.linalg.solve(c, rhs))


class RidgeOperator:
    """Cached eigen-factorization of ``A^H A`` for repeated ridge solves."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=complex)
        self.k = self.A.shape[1]
        if self.k:
            s, V = np.linalg.eigh(hermitian_part(self.A.conj().T @ self.A))
            self.s = np.clip(s, 0.0, None)
            self.V = V
            self.AV = self.A @ V

    def solve(self, b, lam, scale=1.0):
        """``argmin scale ||b - A x||^2 + lam ||x||^2``."""
        if not self.k:
            return np.zeros(0, complex)
        rhs = self.AV.conj().T @ b
        return self.V @ (scale * rhs / (scale * self.s + lam))

    def residual_weight(self, lam):
        """``I - A (A^H A + lam I)^{-1} A^H``, the reduced quadratic after eliminating x."""
        n = self.A.shape[0]
        if not self.k:
            return np.eye(n, dtype=complex)
        W = (self.AV / (self.s + lam)) @ self.AV.conj().T
        return hermitian_part(np.eye(n) - W)
