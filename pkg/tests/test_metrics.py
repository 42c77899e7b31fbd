import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ahsd import metrics


def test_nmse_and_mse():
    t = np.array([1 + 1j, 2, -1j])
    e = t + np.array([0.1, -0.1j, 0.2])
    assert metrics.nmse(t, e) == pytest.approx((0.01 + 0.01 + 0.04) / (2 + 4 + 1))
    assert metrics.nmse(t, t) == 0
    assert metrics.mse(t, e) == pytest.approx(0.06 / 3)
    with pytest.raises(ValueError):
        metrics.nmse(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        metrics.nmse(t, t[:2])


def _wrap(a, b):
    d = abs(a - b) % 1.0
    return min(d, 1 - d)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 6))
def test_thresholded_mse_brute_force(seed, m, k):
    r = np.random.default_rng(seed)
    tf, ta = r.random(m), r.standard_normal(m) + 1j * r.standard_normal(m)
    ef, ea = r.random(k), r.standard_normal(k) + 1j * r.standard_normal(k)
    kept = r.random(k) < 0.6
    perm = np.where(kept, r.integers(0, m, k), -1)
    sf = sa = 0.0
    for i in range(k):
        if kept[i]:
            sf += _wrap(ef[i], tf[perm[i]]) ** 2
            sa += abs(ea[i] - ta[perm[i]]) ** 2
    mf, ma = metrics.thresholded_mse(ef, ea, kept, tf, ta, perm)
    assert mf == pytest.approx(sf / k, abs=1e-15)
    assert ma == pytest.approx(sa / k, rel=1e-12, abs=1e-15)
    crb_f, crb_a = r.random(m), r.random(m)
    cf, ca = metrics.thresholded_crb(kept, perm, crb_f, crb_a)
    assert cf == pytest.approx(sum(crb_f[perm[i]] for i in range(k) if kept[i]) / k, abs=1e-15)
    assert ca == pytest.approx(sum(crb_a[perm[i]] for i in range(k) if kept[i]) / k, abs=1e-15)


def test_thresholded_mse_empty_and_wrap():
    assert all(math.isnan(v) for v in metrics.thresholded_mse([], [], [], [0.1], [1], []))
    assert metrics.thresholded_mse([0.5], [1], [False], [0.1], [1], [-1]) == (0.0, 0.0)
    mf, _ = metrics.thresholded_mse([0.99], [1], [True], [0.01], [1], [0])
    assert mf == pytest.approx(0.02**2)


def _tm(nm, th, kept, est):
    return metrics.TrialMetrics(nm, nm, nm, nm, th, th, th / 2, th / 2, kept, est)


def test_aggregate_hand_computed():
    trials = [_tm(0.1, 1.0, 1, 2), _tm(0.2, 2.0, 3, 3), _tm(0.6, 4.0, 0, 1)]
    row = metrics.aggregate_weighted(trials)
    assert row.nmse_h == pytest.approx(0.3)
    # kept-weighted: (1*1 + 3*2) / 4; the zero-kept trial carries no weight
    assert row.mse_th_f == pytest.approx(7 / 4)
    assert row.crb_th_alpha == pytest.approx(7 / 8)
    assert row.retained_fraction == pytest.approx(4 / 6)
    assert row.n_trials == 3


def test_aggregate_nan_and_empty():
    trials = [_tm(0.1, math.nan, 0, 0), metrics.TrialMetrics(math.nan, 0.2, 0.2, 0.2)]
    row = metrics.aggregate_weighted(trials)
    assert row.nmse_h == pytest.approx(0.1)
    assert math.isnan(row.mse_th_f) and math.isnan(row.retained_fraction)
    with pytest.raises(ValueError):
        metrics.aggregate_weighted([])
    with pytest.raises(ValueError):
        metrics.TrialMetrics(0, 0, 0, 0, kept_count=2, est_count=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_aggregate_permutation_invariant_bitwise(seed):
    r = np.random.default_rng(seed)
    trials = []
    for _ in range(int(r.integers(1, 12))):
        est = int(r.integers(0, 5))
        trials.append(_tm(float(r.random()), float(r.random() * 1e-3), int(r.integers(0, est + 1)), est))
    shuffled = trials[:]
    random.Random(seed).shuffle(shuffled)
    a, b = metrics.aggregate_weighted(trials).as_dict(), metrics.aggregate_weighted(shuffled).as_dict()
    for key in a:
        assert (a[key] == b[key]) or (math.isnan(a[key]) and math.isnan(b[key]))


def test_metric_names():
    assert metrics.metric_names()[:2] == ["nmse_h", "nmse_hs"]
