"""Cramer-Rao bounds for the hybrid sparse/diffuse channel.

Parameters are complexified as ``theta = [f; alpha; gamma; conj(alpha); conj(gamma)]``
and the observation as ``h_aug = [h; conj(h)]``.  Under unitary pilots the
Fisher information is ``G / sigma^2 * U^H U`` with ``U = d h_aug / d theta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .linalg import SolverError, col_projector, hermitian_part
from .signal_model import build_diffuse_basis, steering_matrix, subcarrier_offsets

log = logging.getLogger(__name__)

COND_WARN = 1e12


def lambda_matrix(N):
    """Diagonal ``j 2 pi (k - (N-1)/2)``, so that ``d a(f)/df = Lambda a(f)``."""
    return np.diag(2j * np.pi * subcarrier_offsets(N))


def scaling_constant_cn(N):
    """``C_N = ||Lambda a(f)||_2 = sqrt(pi^2 N (N-1) (N+1) / 3)``."""
    return math.sqrt(math.pi**2 * N * (N - 1) * (N + 1) / 3)


def _check_dims(N, m, L):
    if 3 * m + 2 * L > 2 * N:
        raise ValueError(f"3m+2L = {3 * m + 2 * L} exceeds 2N = {2 * N}; FIM is singular")


def _blocks(f, alpha, N, L):
    f = np.atleast_1d(np.asarray(f, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=complex))
    if f.shape != alpha.shape:
        raise ValueError("f and alpha must have the same length")
    A = steering_matrix(f, N) if len(f) else np.zeros((N, 0), complex)
    Ap = (2j * np.pi * subcarrier_offsets(N))[:, None] * A * alpha[None, :]
    D = build_diffuse_basis(N, L)
    return A, Ap, D


def build_u_matrix(f, alpha, N, L):
    """``U = [[A', [A, D], 0], [conj A', 0, conj [A, D]]]`` (2N x (3m + 2L))."""
    A, Ap, D = _blocks(f, alpha, N, L)
    m = A.shape[1]
    _check_dims(N, m, L)
    B = np.hstack([A, D])
    Z = np.zeros_like(B)
    top = np.hstack([Ap, B, Z])
    bot = np.hstack([np.conj(Ap), Z, np.conj(B)])
    return np.vstack([top, bot])


def build_v_matrix(f, alpha, N, L):
    """Jacobian of ``[h_s; h_d; conj h_s; conj h_d]`` with respect to ``theta``."""
    A, Ap, D = _blocks(f, alpha, N, L)
    m = A.shape[1]
    V = np.zeros((4 * N, 3 * m + 2 * L), complex)
    V[:N, :m] = Ap
    V[:N, m:2 * m] = A
    V[N:2 * N, 2 * m:2 * m + L] = D
    V[2 * N:3 * N, :m] = np.conj(Ap)
    V[2 * N:3 * N, 2 * m + L:3 * m + L] = np.conj(A)
    V[3 * N:, 3 * m + L:] = np.conj(D)
    return V


@dataclass
class FimTheta:
    matrix: np.ndarray
    m: int
    L: int

    @property
    def ordering(self):
        m, L = self.m, self.L
        return {
            "f": slice(0, m),
            "alpha": slice(m, 2 * m),
            "gamma": slice(2 * m, 2 * m + L),
            "alpha_conj": slice(2 * m + L, 3 * m + L),
            "gamma_conj": slice(3 * m + L, 3 * m + 2 * L),
        }


def fim_theta(f, alpha, N, L, G=1, sigma=1.0):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    U = build_u_matrix(f, alpha, N, L)
    J = hermitian_part(U.conj().T @ U) * (G / sigma**2)
    return FimTheta(J, len(np.atleast_1d(f)), L)


def _inverse_hermitian(J):
    w, V = np.linalg.eigh(J)
    wmax = w.max() if len(w) else 1.0
    cond = wmax / w.min() if len(w) and w.min() > 0 else math.inf
    if not np.isfinite(cond) or w.min() <= len(w) * np.finfo(float).eps * wmax:
        raise SolverError(
            "FIM is singular: check 3m+2L <= 2N, alpha_i != 0 and distinct supports "
            f"(smallest eigenvalue {w.min() if len(w) else 0:.3e})"
        )
    if cond > COND_WARN:
        log.warning("FIM condition number %.3e", cond)
    return (V / w) @ V.conj().T, cond


@dataclass
class CrbReport:
    crb_f: np.ndarray
    crb_alpha: np.ndarray
    crb_gamma: np.ndarray
    cond: float
    bounds: "CrbEnvelope | None" = None
    channel_crb_trace: float = math.nan
    component_crb: "np.ndarray | None" = None


def crb_parameters(fim: FimTheta):
    """Diagonal of ``J^{-1}`` split into the f, alpha and gamma families."""
    Jinv, cond = _inverse_hermitian(fim.matrix)
    d = np.real(np.diag(Jinv))
    o = fim.ordering
    return CrbReport(d[o["f"]].copy(), d[o["alpha"]].copy(), d[o["gamma"]].copy(), cond)


@dataclass(frozen=True)
class CrbEnvelope:
    k_min: float
    k_max: float
    f_low: np.ndarray
    f_high: np.ndarray
    amp_low: float
    amp_high: float

    def contains(self, report: CrbReport, rtol=1e-9):
        lo = lambda v, b: np.all(v >= b * (1 - rtol))
        hi = lambda v, b: np.all(v <= b * (1 + rtol))
        return bool(
            lo(report.crb_f, self.f_low) and hi(report.crb_f, self.f_high)
            and lo(report.crb_alpha, self.amp_low) and hi(report.crb_alpha, self.amp_high)
            and lo(report.crb_gamma, self.amp_low) and hi(report.crb_gamma, self.amp_high)
        )


def envelope_constants(N, delta, G=1):
    nd = N * delta
    if nd <= 2:
        raise ValueError(f"envelope undefined for N*delta = {nd} <= 2")
    return 1.0 / (G * (1 + 2 / nd)), 1.0 / (G * (1 - 2 / nd))


def crb_bounds(N, delta, G, sigma, alpha):
    """Separation-dependent envelopes on CRB(f), CRB(alpha) and CRB(gamma)."""
    k_min, k_max = envelope_constants(N, delta, G)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=complex))
    base_f = sigma**2 / np.abs(alpha) ** 2 * 3 / (2 * math.pi**2 * N * (N - 1) * (N + 1))
    base_a = sigma**2 / N
    return CrbEnvelope(k_min, k_max, k_min * base_f, k_max * base_f, k_min * base_a, k_max * base_a)


def crb_channel(f, alpha, N, L, G=1, sigma=1.0):
    """``(sigma^2 / G) P_U`` and its trace ``(sigma^2 / G) rank(U)``."""
    U = build_u_matrix(f, alpha, N, L)
    P = hermitian_part(col_projector(U))
    M = (sigma**2 / G) * P
    return M, float(np.real(np.trace(M)))


def channel_error_bound(f, alpha, N, L, G=1, sigma=1.0):
    """Lower bound on ``E||h_hat - h||^2``: half the augmented trace."""
    return 0.5 * crb_channel(f, alpha, N, L, G, sigma)[1]


@dataclass
class ComponentCrb:
    matrix: np.ndarray
    sparse_trace: float
    diffuse_trace: float


def crb_components(f, alpha, N, L, G=1, sigma=1.0):
    """``(sigma^2 / G) V (U^H U)^{-1} V^H`` for the joint ``[h_s; h_d]`` estimator."""
    U = build_u_matrix(f, alpha, N, L)
    V = build_v_matrix(f, alpha, N, L)
    Minv, _ = _inverse_hermitian(hermitian_part(U.conj().T @ U))
    C = hermitian_part((sigma**2 / G) * V @ Minv @ V.conj().T)
    ts = float(np.real(np.trace(C[:N, :N])))
    td = float(np.real(np.trace(C[N:2 * N, N:2 * N])))
    return ComponentCrb(C, ts, td)


def block_sum_matrix(N):
    """``E`` with ``E [h_s; h_d; conj h_s; conj h_d] = [h; conj h]``."""
    I, Z = np.eye(N), np.zeros((N, N))
    return np.block([[I, I, Z, Z], [Z, Z, I, I]])


def crb_summary(f, alpha, N, L, G=1, sigma=1.0):
    """Per-parameter CRBs plus sparse/diffuse/channel traces from a single inversion.

    Cheaper than calling :func:`crb_components` since the 4N x 4N matrix is
    never formed.
    """
    U = build_u_matrix(f, alpha, N, L)
    V = build_v_matrix(f, alpha, N, L)
    m = len(np.atleast_1d(f))
    J = hermitian_part(U.conj().T @ U) * (G / sigma**2)
    Jinv, cond = _inverse_hermitian(J)
    d = np.real(np.diag(Jinv))
    # tr(V_blk J^{-1} V_blk^H) = sum((V_blk J^{-1}) * conj(V_blk))
    Vs, Vd = V[:N], V[N:2 * N]
    ts = float(np.real(np.sum((Vs @ Jinv) * np.conj(Vs))))
    td = float(np.real(np.sum((Vd @ Jinv) * np.conj(Vd))))
    Uh = U[:N]
    th = float(np.real(np.sum((Uh @ Jinv) * np.conj(Uh))))
    return dict(
        crb_f=d[:m], crb_alpha=d[m:2 * m], crb_gamma=d[2 * m:2 * m + L],
        sparse_trace=ts, diffuse_trace=td, channel_trace=th, cond=cond,
    )


@dataclass(frozen=True)
class InterlacingResult:
    smin_q0: float
    smax_q0: float
    smin_q1: float
    smax_q1: float

    @property
    def min_ok(self):
        return self.smin_q1 >= self.smin_q0 * (1 - 1e-12)

    @property
    def max_ok(self):
        return self.smax_q1 <= self.smax_q0 * (1 + 1e-12)


def interlacing_check(B0, B1):
    """Extreme singular values of ``Q0 = [sqrt2 B0, B1]`` and the conjugate-stacked ``Q1``."""
    B0 = np.asarray(B0, dtype=complex)
    B1 = np.asarray(B1, dtype=complex)
    N, k = B0.shape
    if B1.shape != (N, k):
        raise ValueError("B0 and B1 must have the same shape")
    if 2 * N < 3 * k:
        raise ValueError("interlacing requires 2N >= 3(m+L)")
    Q0 = np.hstack([math.sqrt(2) * B0, B1])
    Z = np.zeros_like(B0)
    Q1 = np.vstack([np.hstack([B0, B1, Z]), np.hstack([np.conj(B0), Z, np.conj(B1)])])
    s0 = np.linalg.svd(Q0, compute_uv=False)
    if Q0.shape[0] < Q0.shape[1] or s0[-1] <= max(Q0.shape) * np.finfo(float).eps * s0[0]:
        raise ValueError("Q0 must have full column rank")
    s1 = np.linalg.svd(Q1, compute_uv=False)
    return InterlacingResult(float(s0[-1]), float(s0[0]), float(s1[-1]), float(s1[0]))
