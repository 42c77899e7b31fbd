import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ahsd.signal_model import (
    AhsdChannel, FadingConfig, ModelDims, build_diffuse_basis, build_steering, canonical_freq,
    diffuse_grid, draw_channel, draw_pilots_and_observe, min_separation, place_frequencies,
    sample_frequencies, sigma_for_snr, snr_db, steering_matrix, subcarrier_offsets, wrap_distance,
)

freqs = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)
odd_n = st.integers(min_value=0, max_value=60).map(lambda k: 2 * k + 1)


@given(freqs, odd_n)
def test_steering_norm_is_n(f, N):
    a = build_steering(f, N)
    assert abs(np.vdot(a, a).real - N) <= 1e-12 * N


@given(freqs, odd_n)
def test_steering_periodic(f, N):
    assert np.allclose(build_steering(f, N), build_steering(f + 1.0, N), atol=1e-9)


def test_steering_entries_direct():
    N, f = 9, 0.3137
    k = np.arange(N) - (N - 1) / 2
    assert np.allclose(build_steering(f, N), np.exp(2j * np.pi * k * f), atol=1e-14)
    assert np.array_equal(subcarrier_offsets(N), k)


def test_steering_rejects_even_n():
    with pytest.raises(ValueError):
        build_steering(0.1, 10)


def test_canonical_freq_range():
    f = canonical_freq(np.array([0.0, 1.0, -0.25, 2.5]))
    assert np.allclose(f, [1.0, 1.0, 0.75, 0.5])
    assert np.all((f > 0) & (f <= 1))


@given(freqs, freqs, freqs)
def test_wrap_distance_metric(a, b, c):
    dab, dba = wrap_distance(a, b), wrap_distance(b, a)
    assert dab == pytest.approx(dba, abs=1e-12)
    assert 0 <= dab <= 0.5 + 1e-12
    assert dab <= wrap_distance(a, c) + wrap_distance(c, b) + 1e-12


def test_diffuse_basis_gram_dirichlet():
    N, L = 101, 20
    D = build_diffuse_basis(N, L)
    G = D.conj().T @ D
    assert np.allclose(np.diag(G).real, N)
    g = diffuse_grid(L)
    k = subcarrier_offsets(N)
    # direct summation of the Dirichlet kernel for each pair
    for r, s in [(0, 1), (3, 7), (5, 19)]:
        ref = np.sum(np.exp(2j * np.pi * k * (g[s] - g[r])))
        assert abs(G[r, s] - ref) < 1e-10


def test_diffuse_basis_columns_are_grid_steering():
    N, L = 21, 5
    D = build_diffuse_basis(N, L)
    for r in range(L):
        assert np.allclose(D[:, r], build_steering(-r / L, N), atol=1e-12)


def test_channel_reconstruction_matches_direct_evaluation(rng):
    dims = ModelDims(21, 4, 2)
    ch = draw_channel(rng, dims, FadingConfig(0.05, 0.01))
    k = subcarrier_offsets(21)
    h_s = sum(a * np.exp(2j * np.pi * k * f) for f, a in zip(ch.f, ch.alpha))
    h_d = sum(g * np.exp(-2j * np.pi * k * r / 4) for r, g in enumerate(ch.gamma))
    assert np.allclose(ch.h_s, h_s, atol=1e-12)
    assert np.allclose(ch.h_d, h_d, atol=1e-12)
    assert np.allclose(ch.h, h_s + h_d, atol=1e-12)


def test_diffuse_variance_monte_carlo():
    fading = FadingConfig(0.05, 0.01)
    L = 6
    var = fading.gamma_variances(L)
    assert np.allclose(var, 0.01 * np.exp(-0.05 * np.arange(L)))
    r = np.random.default_rng(3)
    dims = ModelDims(13, L, 1)
    draws = np.array([draw_channel(r, dims, fading).gamma for _ in range(20000)])
    emp = np.mean(np.abs(draws) ** 2, axis=0)
    assert np.all(np.abs(emp / var - 1) < 0.05)


def test_diffuse_energy_vanishes_as_beta_shrinks():
    dims = ModelDims(21, 4, 2)
    means = []
    for beta in (1e-2, 1e-4, 1e-6):
        r = np.random.default_rng(5)
        means.append(np.mean([np.linalg.norm(draw_channel(r, dims, FadingConfig(0.05, beta)).h_d) ** 2
                              for _ in range(200)]))
    assert means[0] > means[1] > means[2]
    assert means[2] < 1e-3


def test_fading_requires_positive_parameters():
    with pytest.raises(ValueError):
        FadingConfig(0.05, 0.0)


def test_default_scenario_generating_law(rng):
    dims = ModelDims(101, 20, 4)
    ch = draw_channel(rng, dims, FadingConfig(0.05, 0.01, 1 / 40))
    rep = min_separation(ch.f, 20)
    assert rep.delta == pytest.approx(1 / 40, abs=1e-12)


def test_noiseless_observation_is_exact(rng):
    ch = draw_channel(rng, ModelDims(21, 4, 2, 3), FadingConfig(0.05, 0.01))
    meas = draw_pilots_and_observe(rng, ch, 3, 0.0)
    assert np.allclose(meas.y_avg, ch.h, atol=1e-12)
    assert np.allclose(np.abs(meas.pilots), 1.0)


def test_averaged_noise_variance():
    r = np.random.default_rng(11)
    N, G, sigma = 15, 100, 1.0
    ch = draw_channel(r, ModelDims(N, 2, 1, G), FadingConfig(0.05, 0.01))
    err = np.array([draw_pilots_and_observe(r, ch, G, sigma).y_avg - ch.h for _ in range(1000)])
    v = np.mean(np.abs(err) ** 2, axis=0)
    assert np.all(np.abs(v * G / sigma**2 - 1) < 0.1)


def test_snr_roundtrip():
    h = np.ones(11, complex)
    assert snr_db(h, 1.0) == pytest.approx(0.0)
    assert snr_db(10 * h, 1.0) == pytest.approx(20.0)
    s = sigma_for_snr(h * 3, 17.0)
    assert snr_db(h * 3, s) == pytest.approx(17.0)


def test_min_separation_report():
    rep = min_separation([0.1, 0.13, 0.9], 4)
    assert rep.delta_s == pytest.approx(0.03)
    assert rep.delta_sd == pytest.approx(0.1)  # 0.9 is 0.1 away from the grid point 1.0
    assert rep.delta == pytest.approx(0.03)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.floats(0.05, 1.0))
def test_place_frequencies_exact_delta(seed, m, frac):
    L = 10
    delta = frac * 0.5 / L
    f = place_frequencies(np.random.default_rng(seed), m, L, delta)
    assert len(f) == m
    assert min_separation(f, L).delta == pytest.approx(delta, rel=1e-9)


def test_place_frequencies_infeasible():
    with pytest.raises(ValueError):
        place_frequencies(np.random.default_rng(0), 4, 20, 4 / 101)


def test_sample_frequencies_meets_target(rng):
    f = sample_frequencies(rng, 3, 4, 0.02)
    assert min_separation(f, 4).delta >= 0.02


def test_model_dims_validation():
    with pytest.raises(ValueError):
        ModelDims(10, 2, 1)
    with pytest.raises(ValueError):
        ModelDims(11, 0, 1, 0)
    assert ModelDims(101, 20, 4).n_params == 3 * 4 + 2 * 20


def test_steering_matrix_full_rank_when_separated():
    N = 31
    f = np.array([0.1, 0.1 + 1.5 / N, 0.6])
    A = steering_matrix(f, N)
    assert np.linalg.svd(A, compute_uv=False).min() > 1e-3
