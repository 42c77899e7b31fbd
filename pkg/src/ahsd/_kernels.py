"""Toeplitz build/adjoint kernels (pure NumPy reference implementation)."""

from functools import lru_cache

import numpy as np

BACKEND = "numpy"


@lru_cache(maxsize=32)
def _lag_index(N):
    i = np.arange(N)
    lag = i[:, None] - i[None, :]
    return lag, (lag + N - 1).ravel()


def toeplitz_kernel(iota):
    N = len(iota)
    lag, _ = _lag_index(N)
    iota = iota.copy()
    iota[0] = iota[0].real
    ext = np.concatenate([np.conj(iota[:0:-1]), iota])
    return ext[lag + N - 1]


def toeplitz_adjoint_kernel(M):
    N = M.shape[0]
    _, flat = _lag_index(N)
    m = M.ravel()
    diag_re = np.bincount(flat, weights=m.real, minlength=2 * N - 1)
    diag_im = np.bincount(flat, weights=m.imag, minlength=2 * N - 1)
    diag = diag_re + 1j * diag_im
    low = diag[N - 1:]          # lag i - j = k >= 0
    up = diag[N - 1::-1]        # lag j - i = k >= 0
    g = low + np.conj(up)
    g[0] = diag[N - 1].real
    return g
