"""Dual polynomial evaluation, peak localization and the dual atomic norm.

For a residual ``z`` the dual polynomial is ``q(f) = a(f)^H z``; the dual
atomic norm is ``max_f |q(f)|``.
"""

from __future__ import annotations

import numpy as np

from .signal_model import canonical_freq, subcarrier_offsets, wrap_distance

DEFAULT_GRID = 2**14
NEWTON_MAX_ITERS = 30
NEWTON_FTOL = 1e-12


def dual_poly(z, f):
    """``q(f) = a(f)^H z`` and its first two derivatives in ``f``."""
    z = np.asarray(z, dtype=complex)
    k = subcarrier_offsets(len(z))
    f = np.atleast_1d(np.asarray(f, dtype=float))
    E = np.exp(-2j * np.pi * np.outer(f, k))
    w = -2j * np.pi * k
    return E @ z, E @ (w * z), E @ (w * w * z)


def dual_poly_grid(z, grid_size=DEFAULT_GRID):
    """``|q|`` on the uniform grid ``n / grid_size`` via a zero-padded FFT."""
    z = np.asarray(z, dtype=complex)
    M = max(int(grid_size), len(z))
    # a(f)^H z = exp(j pi (N-1) f) * sum_k z_k exp(-j 2 pi k f)
    return np.arange(M) / M, np.abs(np.fft.fft(z, M))


def _newton_refine(z, f0):
    """Maximize ``|q(f)|^2`` locally from each start point."""
    f = np.array(f0, dtype=float)
    q, _, _ = dual_poly(z, f)
    val = np.abs(q) ** 2
    active = np.ones(len(f), dtype=bool)
    for _ in range(NEWTON_MAX_ITERS):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        q, dq, d2q = dual_poly(z, f[idx])
        g1 = 2 * np.real(np.conj(q) * dq)
        g2 = 2 * (np.abs(dq) ** 2 + np.real(np.conj(q) * d2q))
        # fall back to a small gradient step away from concave regions
        step = np.where(g2 < 0, -g1 / np.where(g2 < 0, g2, -1.0), 1e-3 * np.sign(g1) / len(z))
        step = np.clip(step, -0.5 / len(z), 0.5 / len(z))
        for _halving in range(20):
            trial = f[idx] + step
            qt, _, _ = dual_poly(z, trial)
            vt = np.abs(qt) ** 2
            ok = vt >= val[idx] * (1 - 1e-15)
            if ok.all():
                break
            step = np.where(ok, step, step / 2)
        f[idx] = np.where(ok, trial, f[idx])
        val[idx] = np.where(ok, vt, val[idx])
        done = (np.abs(step) <= NEWTON_FTOL) | ~ok
        active[idx[done]] = False
    return np.mod(f, 1.0), np.sqrt(val)


def local_maxima(z, grid_size=DEFAULT_GRID, min_value=0.0):
    """Refined local maxima of ``|q|`` whose grid value exceeds ``min_value``."""
    grid, mag = dual_poly_grid(z, grid_size)
    left = np.roll(mag, 1)
    right = np.roll(mag, -1)
    peaks = np.flatnonzero((mag >= left) & (mag > right) & (mag >= min_value))
    if len(peaks) == 0:
        return np.zeros(0), np.zeros(0)
    f, v = _newton_refine(z, grid[peaks])
    return f, v


def dual_atomic_norm(z, grid_size=DEFAULT_GRID, return_freq=False, n_refine=4):
    """``max_f |<z, a(f)>|`` by dense grid search plus Newton refinement."""
    z = np.asarray(z, dtype=complex)
    if not np.any(z):
        return (0.0, 0.0) if return_freq else 0.0
    grid, mag = dual_poly_grid(z, grid_size)
    left, right = np.roll(mag, 1), np.roll(mag, -1)
    peaks = np.flatnonzero((mag >= left) & (mag > right))
    if len(peaks) == 0:
        peaks = np.array([int(np.argmax(mag))])
    top = peaks[np.argsort(mag[peaks])[::-1][:n_refine]]
    f, v = _newton_refine(z, grid[top])
    best = int(np.argmax(v))
    val = float(max(v[best], mag.max()))
    if return_freq:
        fbest = f[best] if v[best] >= mag.max() else grid[int(np.argmax(mag))]
        return val, float(canonical_freq(fbest))
    return val


def merge_close(freqs, values, radius):
    """Greedy merge of frequencies closer than ``radius``; keeps the larger value."""
    order = np.argsort(values)[::-1]
    kept = []
    for i in order:
        if all(wrap_distance(freqs[i], freqs[j]) >= radius for j in kept):
            kept.append(i)
    kept = np.array(sorted(kept, key=lambda i: canonical_freq(freqs[i])), dtype=int)
    return canonical_freq(freqs[kept]) if len(kept) else np.zeros(0), values[kept] if len(kept) else np.zeros(0)
