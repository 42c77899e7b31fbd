"""Support extraction from the dual polynomial, debiasing and truth matching."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .atomic import DEFAULT_GRID, local_maxima, merge_close
from .linalg import pinv
from .signal_model import canonical_freq, steering_matrix, wrap_distance

log = logging.getLogger(__name__)

PEAK_BAND = 1e-3
MERGE_RADIUS = 0.25      # in units of 1/N
BRUTE_FORCE_MAX = 8


@dataclass
class SupportEstimate:
    freqs: np.ndarray
    amps: np.ndarray
    kept: np.ndarray
    h_s_db: np.ndarray
    ill_conditioned: bool = False

    @property
    def est_count(self):
        return len(self.freqs)

    @property
    def kept_count(self):
        return int(np.count_nonzero(self.kept))


def extract_support(z, tau, eps=PEAK_BAND, grid_size=DEFAULT_GRID, merge_radius=MERGE_RADIUS):
    """Frequencies where ``|<z, a(f)>|`` reaches ``(1 - eps) tau``, sorted in (0, 1]."""
    z = np.asarray(z, dtype=complex)
    N = len(z)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not np.any(z):
        return np.zeros(0)
    # grid values may sit slightly under the peak; prefilter loosely
    f, v = local_maxima(z, grid_size, min_value=(1 - eps) * tau * 0.9)
    keep = v >= (1 - eps) * tau
    if not keep.any():
        return np.zeros(0)
    f, _ = merge_close(f[keep], v[keep], merge_radius / N)
    return np.sort(canonical_freq(f))


def debias(y_avg, gamma_hat, freqs, D=None):
    """Least-squares refit ``P_A (y - D gamma)`` on the estimated support.

    Returns ``(h_s_db, amps, ill_conditioned)``; ``ill_conditioned`` flags
    estimated frequencies closer than ``0.1 / N``.
    """
    y_avg = np.asarray(y_avg, dtype=complex)
    N = len(y_avg)
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    r = y_avg - (D @ gamma_hat if D is not None and len(gamma_hat) else 0)
    if len(freqs) == 0:
        return np.zeros(N, complex), np.zeros(0, complex), False
    ill = False
    if len(freqs) > 1:
        d = wrap_distance(freqs[:, None], freqs[None, :])
        ill = bool(d[~np.eye(len(freqs), dtype=bool)].min() * N < 0.1)
        if ill:
            log.warning("near-collinear support in debias (N*delta_hat < 0.1)")
    A = steering_matrix(freqs, N)
    amps = pinv(A) @ r
    return A @ amps, amps, ill


def threshold_support(freqs, amps, gamma_hat):
    """Keep estimates whose amplitude is at least ``max |gamma_hat|``."""
    amps = np.asarray(amps)
    thr = float(np.abs(gamma_hat).max()) if len(gamma_hat) else 0.0
    return np.abs(amps) >= thr


def reconcile_with_atoms(freqs, atoms, N, merge_radius=MERGE_RADIUS):
    """Replace dual-polynomial peaks by the solver's certified atoms.

    Every atom enters the support (so the sparse estimate lies in the span
    of the support); peaks within ``merge_radius / N`` of an atom are taken
    to be that atom, remaining peaks are kept as they are.
    """
    atoms = np.atleast_1d(np.asarray(atoms, dtype=float))
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if len(atoms) == 0:
        return freqs
    extra = [f for f in freqs if wrap_distance(f, atoms).min() >= merge_radius / N]
    return np.sort(canonical_freq(np.r_[atoms, extra]))


def support_and_debias(sol, y_avg, D=None, eps=PEAK_BAND, use_atoms=True):
    """Full post-processing chain for a solver output.

    With ``use_atoms`` a certified solution contributes its atomic
    decomposition to the support (see :func:`reconcile_with_atoms`).
    """
    gamma = sol.gamma if D is not None else np.zeros(0, complex)
    freqs = extract_support(sol.z, sol.tau, eps) if sol.tau > 0 else np.zeros(0)
    if use_atoms and sol.converged and len(sol.freqs):
        freqs = reconcile_with_atoms(freqs, sol.freqs, len(y_avg))
    h_db, amps, ill = debias(y_avg, gamma, freqs, D)
    kept = threshold_support(freqs, amps, gamma)
    return SupportEstimate(freqs, amps, kept, h_db, ill)


def _cost(freqs_est, f_true):
    return wrap_distance(np.asarray(freqs_est)[:, None], np.asarray(f_true)[None, :]) ** 2


def match_to_truth(freqs_est, kept, f_true):
    """Truth index assigned to each estimate (``-1`` for estimates not kept).

    Kept estimates are assigned injectively at minimal total squared wrap
    distance; when there are more kept estimates than truths, the surplus
    estimates fall back to their nearest truth.
    """
    freqs_est = np.atleast_1d(np.asarray(freqs_est, dtype=float))
    f_true = np.atleast_1d(np.asarray(f_true, dtype=float))
    kept = np.asarray(kept, dtype=bool)
    if len(f_true) == 0:
        raise ValueError("match_to_truth needs at least one true frequency")
    perm = -np.ones(len(freqs_est), dtype=int)
    idx = np.flatnonzero(kept)
    if len(idx) == 0:
        return perm
    C = _cost(freqs_est[idx], f_true)
    k, m = C.shape
    if max(k, m) <= BRUTE_FORCE_MAX:
        rows, cols = _brute_force_assignment(C)
    else:
        rows, cols = linear_sum_assignment(C)
    perm[idx[rows]] = cols
    if k > m:
        log.info("%d kept estimates for %d true spikes; surplus matched to nearest", k, m)
        rest = np.setdiff1d(np.arange(k), rows)
        perm[idx[rest]] = np.argmin(C[rest], axis=1)
    return perm


def _brute_force_assignment(C):
    k, m = C.shape
    best, best_pairs = np.inf, None
    if k <= m:
        for cols in itertools.permutations(range(m), k):
            c = C[np.arange(k), cols].sum()
            if c < best - 1e-18:
                best, best_pairs = c, (np.arange(k), np.array(cols))
    else:
        for rows in itertools.permutations(range(k), m):
            c = C[list(rows), np.arange(m)].sum()
            if c < best - 1e-18:
                best, best_pairs = c, (np.array(rows), np.arange(m))
        order = np.argsort(best_pairs[0])
        best_pairs = (best_pairs[0][order], best_pairs[1][order])
    return best_pairs


@dataclass(frozen=True)
class SeDecomposition:
    se_b: float
    se_db: float
    se_db_identity: float
    rel_err: float

    def holds(self, tol=1e-8):
        return self.rel_err <= tol


def se_decomposition_check(h_s_true, gamma_true, gamma_hat, freqs, noise_avg, y_avg, D, h_s_hat):
    """Biased/debiased squared-error identity ``SE_db = SE_b - ||P e_b||^2 + ||P n||^2``."""
    h_true = np.asarray(h_s_true) + D @ gamma_true
    D_gh = D @ gamma_hat if len(gamma_hat) else np.zeros_like(h_true)
    e_b = h_true - h_s_hat - D_gh
    se_b = float(np.vdot(e_b, e_b).real)
    N = len(h_true)
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if len(freqs):
        A = steering_matrix(freqs, N)
        P = A @ pinv(A)
    else:
        P = np.zeros((N, N), complex)
    e_db = h_true - P @ (y_avg - D_gh) - D_gh
    se_db = float(np.vdot(e_db, e_db).real)
    pe, pn = P @ e_b, P @ noise_avg
    ident = se_b - float(np.vdot(pe, pe).real) + float(np.vdot(pn, pn).real)
    rel = abs(se_db - ident) / max(se_db, se_b, 1e-300)
    return SeDecomposition(se_b, se_db, ident, rel)
