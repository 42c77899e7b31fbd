"""Hybrid sparse/diffuse channel model, OFDM pilots and measurement synthesis.

The channel frequency response over ``N`` (odd) subcarriers is

    h = A_f alpha + D gamma

where ``A_f`` stacks steering vectors at the off-grid path frequencies and
``D`` stacks steering vectors on the uniform diffuse grid ``r / L``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_REJECTION_ATTEMPTS = 100_000

QPSK = np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))


def _check_odd(N):
    if int(N) != N or N < 1 or N % 2 == 0:
        raise ValueError(f"N must be an odd positive integer, got {N!r}")
    return int(N)


def canonical_freq(f):
    """Map frequencies onto the torus representative in (0, 1]."""
    f = np.mod(np.asarray(f, dtype=float), 1.0)
    return np.where(f == 0.0, 1.0, f)


def wrap_distance(a, b):
    """Toroidal distance between frequencies ``a`` and ``b`` (broadcasts)."""
    d = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), 1.0)
    return np.minimum(d, 1.0 - d)


def subcarrier_offsets(N):
    """Symmetric integer offsets ``k - (N-1)/2`` for ``k = 0..N-1``."""
    N = _check_odd(N)
    return np.arange(N) - (N - 1) / 2


def build_steering(f, N):
    """Steering vector with entries ``exp(j 2 pi (k - (N-1)/2) f)``."""
    return np.exp(2j * np.pi * subcarrier_offsets(N) * float(f))


def steering_matrix(freqs, N):
    """N x k matrix whose columns are steering vectors at ``freqs``."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    phase = 2 * np.pi * np.outer(subcarrier_offsets(N), freqs)
    # cos/sin of the real phase is cheaper than exp of a complex argument
    out = np.empty(phase.shape, complex)
    np.cos(phase, out=out.real)
    np.sin(phase, out=out.imag)
    return out


def diffuse_grid(L):
    """Canonical grid frequencies of the diffuse taps, ``-r/L`` mapped to (0, 1]."""
    if int(L) != L or L < 1:
        raise ValueError(f"L must be a positive integer, got {L!r}")
    return canonical_freq(-np.arange(int(L)) / L)


def build_diffuse_basis(N, L):
    """Diffuse basis ``D = [a(0), a(-1/L), ..., a(-(L-1)/L)]``."""
    return steering_matrix(diffuse_grid(L), _check_odd(N))


@dataclass(frozen=True)
class ModelDims:
    N: int
    L: int
    m: int
    G: int = 1

    def __post_init__(self):
        _check_odd(self.N)
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.G < 1:
            raise ValueError("G must be >= 1")

    @property
    def n_params(self):
        """Number of real/complex unknowns ``3m + 2L`` in the complexified CRB."""
        return 3 * self.m + 2 * self.L

    def crb_identifiable(self):
        return self.n_params <= 2 * self.N


@dataclass(frozen=True)
class FadingConfig:
    omega: float
    beta: float
    delta_target: Optional[float] = None

    def __post_init__(self):
        if self.omega <= 0 or self.beta <= 0:
            raise ValueError("omega and beta must be positive")
        if self.delta_target is not None and not 0 < self.delta_target < 0.5:
            raise ValueError("delta_target must lie in (0, 1/2)")

    def gamma_variances(self, L):
        return self.beta * np.exp(-self.omega * np.arange(L))

    def expected_gamma_energy(self, L):
        return float(self.gamma_variances(L).sum())


@dataclass(frozen=True)
class SeparationReport:
    delta_s: float
    delta_sd: float
    delta: float


@dataclass(frozen=True)
class AhsdChannel:
    dims: ModelDims
    f: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    h_s: np.ndarray = field(repr=False)
    h_d: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)

    @classmethod
    def from_params(cls, f, alpha, gamma, N, G=1):
        f = canonical_freq(np.atleast_1d(np.asarray(f, dtype=float)))
        alpha = np.atleast_1d(np.asarray(alpha, dtype=complex))
        gamma = np.atleast_1d(np.asarray(gamma, dtype=complex))
        if f.shape != alpha.shape:
            raise ValueError("f and alpha must have the same length")
        if len(np.unique(f)) != len(f):
            raise ValueError("path frequencies must be distinct")
        dims = ModelDims(N=N, L=len(gamma), m=len(f), G=G)
        h_s = steering_matrix(f, N) @ alpha if len(f) else np.zeros(N, complex)
        h_d = build_diffuse_basis(N, dims.L) @ gamma
        return cls(dims, f, alpha, gamma, h_s, h_d, h_s + h_d)

    @property
    def separation(self):
        return min_separation(self.f, self.dims.L)


@dataclass(frozen=True)
class MeasurementSet:
    pilots: np.ndarray
    observations: np.ndarray
    y_avg: np.ndarray
    sigma: float

    @property
    def G(self):
        return self.pilots.shape[0]

    @property
    def noise_avg_std(self):
        """Per-entry standard deviation of the averaged, filtered noise."""
        return self.sigma / np.sqrt(self.G)


def min_separation(f, L):
    """Minimum wrap-around separations among spikes and to the diffuse grid."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    m = len(f)
    if m <= 1:
        delta_s = 0.5
    else:
        d = wrap_distance(f[:, None], f[None, :])
        delta_s = float(d[~np.eye(m, dtype=bool)].min())
    if m == 0:
        delta_sd = 0.5 / L
    else:
        grid = np.arange(L) / L
        delta_sd = float(wrap_distance(f[:, None], grid[None, :]).min())
    return SeparationReport(delta_s, delta_sd, min(delta_s, delta_sd))


def place_frequencies(rng, m, L, delta):
    """Place ``m`` spikes each exactly ``delta`` away from the diffuse grid.

    Spikes occupy distinct, non-adjacent grid cells so that the
    spike-to-spike spacing never drops below ``delta``.
    """
    if not 0 < delta <= 0.5 / L + 1e-15:
        raise ValueError(f"delta={delta} not attainable with L={L} (max {0.5 / L})")
    cells = _nonadjacent_cells(rng, m, L)
    if delta >= 0.5 / L - 1e-15:
        f = (cells + 0.5) / L
    else:
        sides = rng.choice([-1.0, 1.0], size=m)
        f = cells / L + sides * delta
    f = canonical_freq(f)
    rep = min_separation(f, L)
    if abs(rep.delta - delta) > 1e-12 * max(1.0, 1 / delta):
        raise RuntimeError(f"placement failed: got delta={rep.delta}, wanted {delta}")
    return np.sort(f)


def _nonadjacent_cells(rng, m, L):
    if m == 0:
        return np.zeros(0)
    if 2 * m > L:
        if m > L:
            raise ValueError(f"cannot place {m} spikes in {L} distinct grid cells")
        return rng.choice(L, size=m, replace=False).astype(float)
    for _ in range(MAX_REJECTION_ATTEMPTS):
        cells = np.sort(rng.choice(L, size=m, replace=False))
        gaps = np.diff(np.r_[cells, cells[0] + L])
        if m == 1 or gaps.min() >= 2:
            return cells.astype(float)
    raise RuntimeError("could not find non-adjacent grid cells")


def sample_frequencies(rng, m, L, delta_target=None):
    """Uniform frequencies in (0, 1], rejected until ``delta >= delta_target``.

    A target equal to the grid half-spacing ``1/(2L)`` can only be met with
    spikes exactly at cell midpoints, which are then drawn directly.
    """
    if delta_target is None or m == 0:
        return np.sort(canonical_freq(1.0 - rng.random(m)))
    if m * delta_target >= 0.5 + 1e-15 and m > 1:
        raise ValueError(f"delta_target={delta_target} infeasible for m={m}")
    if delta_target > 0.5 / L + 1e-15:
        raise ValueError(f"delta_target={delta_target} exceeds grid half-spacing 1/(2L)")
    if delta_target >= 0.5 / L - 1e-15:
        return place_frequencies(rng, m, L, 0.5 / L)
    for _ in range(MAX_REJECTION_ATTEMPTS):
        f = canonical_freq(1.0 - rng.random(m))
        if min_separation(f, L).delta >= delta_target:
            return np.sort(f)
    raise RuntimeError(
        f"rejection sampling failed after {MAX_REJECTION_ATTEMPTS} attempts "
        f"(m={m}, L={L}, delta_target={delta_target})"
    )


def complex_normal(rng, var, size=None):
    """Circular complex Gaussian draws with variance ``var``."""
    std = np.sqrt(np.asarray(var, dtype=float) / 2)
    shape = np.shape(var) if size is None else size
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def draw_channel(rng, dims: ModelDims, fading: FadingConfig, f=None):
    """Draw a Rayleigh-faded channel.

    Parameters
    ----------
    rng : numpy.random.Generator
    dims : ModelDims
    fading : FadingConfig
    f : array_like, optional
        Fixed path frequencies. When omitted they are sampled subject to
        ``fading.delta_target``.
    """
    if f is None:
        f = sample_frequencies(rng, dims.m, dims.L, fading.delta_target)
    f = canonical_freq(np.atleast_1d(np.asarray(f, dtype=float)))
    if len(f) != dims.m:
        raise ValueError(f"expected {dims.m} frequencies, got {len(f)}")
    # delay in tap units: tau / dT = (1 - f) L
    alpha = complex_normal(rng, np.exp(-fading.omega * (1.0 - f) * dims.L))
    gamma = complex_normal(rng, fading.gamma_variances(dims.L))
    return AhsdChannel.from_params(f, alpha, gamma, dims.N, dims.G)


def draw_pilots_and_observe(rng, channel: AhsdChannel, G, sigma):
    """QPSK pilots, noisy snapshots ``y_g = S_g h + n_g`` and their average."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    N = channel.dims.N
    pilots = QPSK[rng.integers(0, 4, size=(G, N))]
    noise = complex_normal(rng, sigma**2, size=(G, N))
    obs = pilots * channel.h[None, :] + noise
    y_avg = np.mean(np.conj(pilots) * obs, axis=0)
    return MeasurementSet(pilots, obs, y_avg, float(sigma))


def snr_db(channel_or_h, sigma, N=None):
    """``10 log10(||h||^2 / (N sigma^2))``; +inf when ``sigma == 0``."""
    h = channel_or_h.h if isinstance(channel_or_h, AhsdChannel) else np.asarray(channel_or_h)
    N = len(h) if N is None else N
    if sigma == 0:
        return np.inf
    return 10 * np.log10(np.vdot(h, h).real / (N * sigma**2))


def sigma_for_snr(channel_or_h, snr, N=None):
    """Noise standard deviation that realizes ``snr`` dB for this channel."""
    h = channel_or_h.h if isinstance(channel_or_h, AhsdChannel) else np.asarray(channel_or_h)
    N = len(h) if N is None else N
    return float(np.sqrt(np.vdot(h, h).real / (N * 10 ** (snr / 10))))
