"""Per-trial error metrics and their Monte Carlo aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .signal_model import wrap_distance


def nmse(truth, est):
    truth = np.asarray(truth)
    est = np.asarray(est)
    if truth.shape != est.shape:
        raise ValueError("truth and estimate shapes differ")
    den = float(np.vdot(truth, truth).real)
    if den == 0:
        raise ValueError("NMSE undefined for a zero reference; use mse instead")
    e = truth - est
    return float(np.vdot(e, e).real) / den


def mse(truth, est):
    e = np.asarray(truth) - np.asarray(est)
    return float(np.vdot(e, e).real) / max(e.size, 1)


def thresholded_mse(est_f, est_alpha, kept, truth_f, truth_alpha, perm):
    """Frequency and amplitude errors over kept, matched estimates divided by ``|T_hat|``.

    Returns ``(nan, nan)`` when there are no estimates at all.
    """
    est_f = np.atleast_1d(np.asarray(est_f, dtype=float))
    n_est = len(est_f)
    if n_est == 0:
        return math.nan, math.nan
    kept = np.asarray(kept, dtype=bool)
    perm = np.asarray(perm, dtype=int)
    idx = np.flatnonzero(kept & (perm >= 0))
    if len(idx) == 0:
        return 0.0, 0.0
    truth_f = np.asarray(truth_f, dtype=float)
    truth_alpha = np.asarray(truth_alpha, dtype=complex)
    ef = float(np.sum(wrap_distance(est_f[idx], truth_f[perm[idx]]) ** 2)) / n_est
    ea = float(np.sum(np.abs(np.asarray(est_alpha)[idx] - truth_alpha[perm[idx]]) ** 2)) / n_est
    return ef, ea


def thresholded_crb(kept, perm, crb_f, crb_alpha):
    """CRB counterpart of :func:`thresholded_mse` over the same kept set and matching."""
    kept = np.asarray(kept, dtype=bool)
    n_est = len(kept)
    if n_est == 0:
        return math.nan, math.nan
    perm = np.asarray(perm, dtype=int)
    idx = np.flatnonzero(kept & (perm >= 0))
    if len(idx) == 0:
        return 0.0, 0.0
    return (float(np.sum(np.asarray(crb_f)[perm[idx]])) / n_est,
            float(np.sum(np.asarray(crb_alpha)[perm[idx]])) / n_est)


@dataclass(frozen=True)
class TrialMetrics:
    nmse_h: float
    nmse_hs: float
    nmse_hd: float
    mse_gamma: float
    mse_th_f: float = math.nan
    mse_th_alpha: float = math.nan
    crb_th_f: float = math.nan
    crb_th_alpha: float = math.nan
    kept_count: int = 0
    est_count: int = 0

    def __post_init__(self):
        if self.kept_count > self.est_count:
            raise ValueError("kept_count cannot exceed est_count")


# threshold metrics are weighted by kept_count; the rest are plain means
THRESHOLD_FIELDS = ("mse_th_f", "mse_th_alpha", "crb_th_f", "crb_th_alpha")
PLAIN_FIELDS = ("nmse_h", "nmse_hs", "nmse_hd", "mse_gamma")


@dataclass(frozen=True)
class SweepRow:
    nmse_h: float
    nmse_hs: float
    nmse_hd: float
    mse_gamma: float
    mse_th_f: float
    mse_th_alpha: float
    crb_th_f: float
    crb_th_alpha: float
    retained_fraction: float
    n_trials: int

    def as_dict(self):
        return asdict(self)


def aggregate_weighted(trials: Sequence[TrialMetrics]) -> SweepRow:
    if len(trials) == 0:
        raise ValueError("no valid trials to aggregate")
    out = {}
    for name in PLAIN_FIELDS:
        vals = np.array([getattr(t, name) for t in trials], dtype=float)
        # math.fsum keeps the sum independent of trial order
        out[name] = math.fsum(vals) / len(vals) if np.all(np.isfinite(vals)) else _finite_mean(vals)
    w = np.array([t.kept_count for t in trials], dtype=float)
    valid = np.array([t.est_count > 0 for t in trials]) & (w > 0)
    for name in THRESHOLD_FIELDS:
        vals = np.array([getattr(t, name) for t in trials], dtype=float)
        sel = valid & np.isfinite(vals)
        if sel.any():
            out[name] = math.fsum(w[sel] * vals[sel]) / math.fsum(w[sel])
        else:
            out[name] = math.nan
    n_est = sum(t.est_count for t in trials)
    n_kept = sum(t.kept_count for t in trials)
    out["retained_fraction"] = n_kept / n_est if n_est else math.nan
    out["n_trials"] = len(trials)
    return SweepRow(**out)


def _finite_mean(vals):
    vals = vals[np.isfinite(vals)]
    return math.fsum(vals) / len(vals) if len(vals) else math.nan


def metric_names():
    return [f.name for f in fields(TrialMetrics)]
