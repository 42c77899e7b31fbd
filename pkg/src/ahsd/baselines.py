"""Reference estimators: vanilla ANM, genie-aided ridge demixing and LS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import col_projector
from .solver import SolverOptions, solve_anm  # noqa: F401  (re-exported)


@dataclass(frozen=True)
class GenieResult:
    h_s_ge: np.ndarray
    h_d_ge: np.ndarray
    mu: float

    @property
    def h(self):
        return self.h_s_ge + self.h_d_ge


GENIE_MU_RULES = ("lmmse", "hals")


def genie_mu(N, sigma, expected_gamma_energy, L=None, rule="hals"):
    """Genie ridge weight.

    ``rule="hals"`` reuses the HALS scale ``N sigma^2 / E||gamma||^2``;
    ``rule="lmmse"`` gives ``L sigma^2 / E||gamma||^2``, the exact LMMSE weight
    for i.i.d. coefficients of variance ``E||gamma||^2 / L`` (needs ``L``).
    """
    if expected_gamma_energy <= 0:
        raise ValueError("expected_gamma_energy must be positive")
    if rule == "hals":
        return N * sigma**2 / expected_gamma_energy
    if rule == "lmmse":
        if L is None:
            raise ValueError("rule='lmmse' needs L")
        return L * sigma**2 / expected_gamma_energy
    raise ValueError(f"unknown genie mu rule {rule!r}")


def genie_estimate(y_avg, A_true, D, mu):
    """Closed-form minimizer of ``||y - A c - D gamma||^2 + mu ||gamma||^2`` with the true support.

    ``h_d = D T^{-1} D^H P_perp y`` and ``h_s = P (y - h_d)`` with
    ``T = D^H P_perp D + mu I``.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    y_avg = np.asarray(y_avg, dtype=complex)
    N = len(y_avg)
    P = col_projector(A_true) if A_true is not None and np.size(A_true) else np.zeros((N, N), complex)
    Pp = np.eye(N) - P
    T = D.conj().T @ Pp @ D + mu * np.eye(D.shape[1])
    h_d = D @ np.linalg.solve(T, D.conj().T @ (Pp @ y_avg))
    h_s = P @ (y_avg - h_d)
    return GenieResult(h_s, h_d, float(mu))


def ls_estimate(y_avg):
    """Unstructured least-squares channel estimate (the averaged observation itself)."""
    return np.array(y_avg, dtype=complex, copy=True)


def anm_best_mse(y_avg, h_true, sigma, opts: SolverOptions = SolverOptions(), factor=1.5, max_probes=12):
    """ANM with ``tau`` picked to minimize the squared error against a known channel.

    Simulation-only: walks geometrically from ``sigma sqrt(N ln N)`` in the
    improving direction and stops at the first deterioration.
    Returns ``(solution, tau, probes)``.
    """
    y_avg = np.asarray(y_avg, dtype=complex)
    N = len(y_avg)
    tau0 = max(sigma * np.sqrt(N * np.log(N)), 1e-12 * np.linalg.norm(y_avg))

    def err(sol):
        e = h_true - sol.h_s
        return float(np.vdot(e, e).real)

    first = solve_anm(y_avg, tau0, opts)
    probes = [(tau0, err(first))]
    best, best_tau, best_err = first, tau0, probes[0][1]
    for direction in (1.0 / factor, factor):
        tau, warm = tau0, first
        improved = False
        while len(probes) < max_probes:
            tau *= direction
            sol = solve_anm(y_avg, tau, opts, init=warm)
            e = err(sol)
            probes.append((tau, e))
            if e >= best_err:
                break
            best, best_tau, best_err, warm, improved = sol, tau, e, sol, True
        if improved:
            break
    return best, best_tau, probes
