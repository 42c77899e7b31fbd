import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ahsd import postprocess, solver
from ahsd.crb import crb_parameters, fim_theta
from ahsd.postprocess import (
    debias, extract_support, match_to_truth, reconcile_with_atoms, se_decomposition_check,
    support_and_debias, threshold_support,
)
from ahsd.signal_model import (
    FadingConfig, ModelDims, build_diffuse_basis, draw_channel, draw_pilots_and_observe, sigma_for_snr,
    steering_matrix, wrap_distance,
)
from ahsd.atomic import dual_poly

from conftest import make_instance


def solved(seed, N=33, L=4, m=2, snr=25):
    ch, meas, D = make_instance(seed, N=N, L=L, m=m, snr=snr)
    hp = solver.select_hyperparams(N, meas.noise_avg_std, FadingConfig(0.05, 0.01).expected_gamma_energy(L))
    return ch, meas, D, hp, solver.solve_p1(meas.y_avg, D, hp)


def test_extracted_peaks_sit_in_the_band():
    ch, meas, D, hp, sol = solved(1)
    f = extract_support(sol.z, sol.tau)
    q, _, _ = dual_poly(sol.z, f)
    assert len(f) >= 1
    assert np.all(np.abs(q) >= (1 - postprocess.PEAK_BAND) * sol.tau)
    assert np.all(np.abs(q) <= (1 + 1e-6) * sol.tau)


def test_extract_support_of_zero_residual():
    assert len(extract_support(np.zeros(9, complex), 1.0)) == 0
    with pytest.raises(ValueError):
        extract_support(np.ones(9, complex), 0.0)


def test_end_to_end_frequencies_near_crb():
    r = np.random.default_rng(4)
    N, L, m = 101, 20, 2
    ch = draw_channel(r, ModelDims(N, L, m), FadingConfig(0.05, 0.01, 0.5 / L))
    sigma = sigma_for_snr(ch, 30)
    meas = draw_pilots_and_observe(r, ch, 1, sigma)
    D = build_diffuse_basis(N, L)
    e = FadingConfig(0.05, 0.01).expected_gamma_energy(L)
    _, sol, info = solver.tune_tau(meas.y_avg, D, m, 2 * e, sigma=meas.noise_avg_std)
    est = support_and_debias(sol, meas.y_avg, D)
    crb = crb_parameters(fim_theta(ch.f, ch.alpha, N, L, 1, sigma))
    assert est.est_count == 2
    err = wrap_distance(np.sort(est.freqs), np.sort(ch.f))
    order = np.argsort(ch.f)
    assert np.all(err <= 10 * np.sqrt(crb.crb_f[order]))


def test_debias_residual_orthogonal_to_support():
    ch, meas, D, hp, sol = solved(2)
    est = support_and_debias(sol, meas.y_avg, D)
    A = steering_matrix(est.freqs, len(meas.y_avg))
    res = meas.y_avg - D @ sol.gamma - est.h_s_db
    assert np.abs(A.conj().T @ res).max() <= 1e-8 * np.linalg.norm(meas.y_avg)


def test_debias_flags_near_collinear_support():
    y = np.ones(21, complex)
    _, _, ill = debias(y, np.zeros(0), [0.3, 0.3 + 0.01 / 21])
    assert ill
    h, amps, ill = debias(y, np.zeros(0), [])
    assert not ill and len(amps) == 0 and not np.any(h)


def test_threshold_support():
    kept = threshold_support([0.1, 0.2, 0.3], np.array([1.0, 0.05, 0.2]), np.array([0.1, -0.2j]))
    assert kept.tolist() == [True, False, True]


def test_reconcile_with_atoms():
    f = reconcile_with_atoms([0.1, 0.5001, 0.8], [0.5, 0.9], 101)
    assert np.allclose(f, [0.1, 0.5, 0.8, 0.9])


def brute_cost(C):
    k, m = C.shape
    best = np.inf
    if k <= m:
        for cols in itertools.permutations(range(m), k):
            best = min(best, C[np.arange(k), cols].sum())
    else:
        for rows in itertools.permutations(range(k), m):
            best = min(best, C[list(rows), np.arange(m)].sum())
    return best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_matching_is_cost_minimal(seed, k, m):
    r = np.random.default_rng(seed)
    fe, ft = r.random(k), r.random(m)
    perm = match_to_truth(fe, np.ones(k, bool), ft)
    C = wrap_distance(fe[:, None], ft[None, :]) ** 2
    injective = perm[perm >= 0][:min(k, m)]
    rows = np.flatnonzero(perm >= 0)
    # the injective part realizes the brute-force optimum
    if k <= m:
        assert len(set(perm)) == k
        assert C[rows, perm[rows]].sum() == pytest.approx(brute_cost(C), abs=1e-14)
    else:
        assert set(perm) == set(range(m))
    assert len(injective) == min(k, m)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matching_cost_invariant_to_order(seed):
    r = np.random.default_rng(seed)
    fe, ft = r.random(5), r.random(5)
    p1 = match_to_truth(fe, np.ones(5, bool), ft)
    order = r.permutation(5)
    p2 = match_to_truth(fe[order], np.ones(5, bool), ft)
    c1 = (wrap_distance(fe, ft[p1]) ** 2).sum()
    c2 = (wrap_distance(fe[order], ft[p2]) ** 2).sum()
    assert c1 == pytest.approx(c2, abs=1e-14)


def test_matching_large_uses_hungarian():
    r = np.random.default_rng(0)
    ft = np.sort(r.random(12))
    fe = ft + 1e-4
    perm = match_to_truth(fe, np.ones(12, bool), ft)
    assert np.array_equal(perm, np.arange(12))


def test_unkept_estimates_are_unmatched():
    perm = match_to_truth([0.1, 0.5], [True, False], [0.11, 0.49])
    assert perm.tolist() == [0, -1]


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_se_identity(seed):
    ch, meas, D, hp, sol = solved(seed)
    est = support_and_debias(sol, meas.y_avg, D)
    se = se_decomposition_check(ch.h_s, ch.gamma, sol.gamma, est.freqs, meas.y_avg - ch.h,
                                meas.y_avg, D, sol.h_s)
    assert se.holds(1e-8)
    # the identity output is the debiased error computed directly
    h_db = est.h_s_db + D @ sol.gamma
    assert se.se_db == pytest.approx(np.linalg.norm(ch.h - h_db) ** 2, rel=1e-9)
