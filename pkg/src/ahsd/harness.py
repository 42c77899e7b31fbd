"""Monte Carlo experiment harness: configuration, sweeps, CSV output and trace files."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import baselines, crb, metrics, postprocess, solver
from .linalg import pinv
from .signal_model import (
    AhsdChannel, FadingConfig, ModelDims, build_diffuse_basis, complex_normal, draw_channel,
    draw_pilots_and_observe, min_separation, place_frequencies, sigma_for_snr, steering_matrix,
)

log = logging.getLogger(__name__)

ESTIMATORS = ("hals_p1", "hals_p2", "anm", "genie", "ls")
SCENARIOS = ("snr_sweep", "separation_sweep", "order_sweep", "trace_eval")
ANM_TUNING = ("oracle", "support", "rule")
METRIC_COLUMNS = ("nmse_h", "nmse_hs", "nmse_hd", "mse_gamma", "mse_th_f", "mse_th_alpha",
                  "crb_th_f", "crb_th_alpha", "retained_fraction", "failure_count")
CRB_COLUMNS = ("crb_nmse_h", "crb_nmse_hs", "crb_nmse_hd", "crb_f", "crb_alpha", "crb_gamma",
               "env_k_min", "env_k_max", "crb_envelope_ok", "se_identity_max_rel")


@dataclass
class ExperimentConfig:
    N: int = 101
    L: int = 20
    m: int = 4
    G: int = 1
    omega: float = 0.05
    beta: float = 0.01
    delta: Optional[float] = None
    delta_list: tuple = ()
    m_list: tuple = ()
    snr_db_list: tuple = (0.0, 10.0, 20.0, 30.0)
    trials_channel: int = 50
    trials_noise: int = 100
    seed: int = 1
    tau_scale: float = 1.0
    lam_scale: float = 1.0
    ed_headroom: float = 2.0
    tune_tau: bool = True
    tune_target: str = "estimate"
    anm_tuning: str = "oracle"
    genie_mu_rule: str = "lmmse"
    estimators: tuple = ("hals_p2", "anm", "genie", "ls")
    scenario: str = "snr_sweep"
    admm_max_iters: int = 100
    admm_eps_abs: float = 1e-5
    admm_eps_rel: float = 1e-4
    trace_path: Optional[str] = None
    L_hat: Optional[int] = None
    trace_ed_fraction: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self):
        ModelDims(self.N, self.L, self.m, self.G)
        FadingConfig(self.omega, self.beta)
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if not self.estimators:
            raise ValueError("estimator list is empty")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ValueError(f"unknown estimators {sorted(bad)}")
        if self.anm_tuning not in ANM_TUNING:
            raise ValueError(f"anm_tuning must be one of {ANM_TUNING}")
        if self.tune_target not in solver.TUNE_TARGETS:
            raise ValueError(f"tune_target must be one of {solver.TUNE_TARGETS}")
        if self.genie_mu_rule not in baselines.GENIE_MU_RULES:
            raise ValueError(f"genie_mu_rule must be one of {baselines.GENIE_MU_RULES}")
        if not self.snr_db_list:
            raise ValueError("snr_db_list is empty")
        if self.trials_channel < 1 or self.trials_noise < 1:
            raise ValueError("trial counts must be positive")
        if self.scenario == "separation_sweep" and not self.delta_list:
            raise ValueError("separation_sweep needs delta_list")
        if self.scenario == "order_sweep" and not self.m_list:
            raise ValueError("order_sweep needs m_list")
        if self.scenario == "trace_eval" and not self.trace_path:
            raise ValueError("trace_eval needs trace_path")

    @property
    def fading(self):
        return FadingConfig(self.omega, self.beta)

    def solver_options(self):
        return solver.SolverOptions(max_iters=self.admm_max_iters, eps_abs=self.admm_eps_abs,
                                    eps_rel=self.admm_eps_rel)

    def points(self):
        """Scenario points as ``(m, delta, snr_db)`` tuples in output order."""
        if self.scenario == "snr_sweep":
            return [(self.m, self.delta, float(s)) for s in self.snr_db_list]
        if self.scenario == "separation_sweep":
            return [(self.m, float(d), float(s)) for d in self.delta_list for s in self.snr_db_list]
        if self.scenario == "order_sweep":
            return [(int(m), self.delta, float(s)) for m in self.m_list for s in self.snr_db_list]
        return [(0, None, float(s)) for s in self.snr_db_list]


# ----------------------------------------------------------------------------
# config files


def _convert(tp, raw):
    raw = raw.strip()
    if tp in ("int", int):
        return int(raw)
    if tp in ("float", float):
        return float(raw)
    if tp in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


_LIST_TYPES = {"delta_list": float, "m_list": int, "snr_db_list": float, "estimators": str}
_OPTIONAL = {"delta": float, "trace_path": str, "L_hat": int}


def parse_config_text(text, **overrides):
    """Parse flat ``key=value`` lines (``#`` comments, comma-separated lists)."""
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            if key in _LIST_TYPES:
                values[key] = tuple(_convert(_LIST_TYPES[key], v) for v in raw.split(",") if v.strip())
            elif key in _OPTIONAL:
                values[key] = None if raw.lower() in ("", "none") else _convert(_OPTIONAL[key], raw)
            else:
                values[key] = _convert(types[key], raw)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), **overrides)


def format_config(cfg: ExperimentConfig):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# trace files


def ingest_trace(path, L_hat=None):
    """Read a measured frequency response.

    Format: first line ``N=<int>[,Lhat=<int>]`` then ``N`` lines ``idx,re,im``.
    An even ``N`` is reduced to odd by dropping the last subcarrier.
    Returns ``(y_avg, N, L_hat, D_hat)``.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("N="):
        raise ValueError(f"{path}: missing header line 'N=<int>[,Lhat=<int>]'")
    header = {}
    for part in lines[0].split(","):
        if "=" not in part:
            raise ValueError(f"{path}:1: malformed header field {part!r}")
        k, v = part.split("=", 1)
        header[k.strip()] = v.strip()
    try:
        N = int(header["N"])
        hdr_L = int(header["Lhat"]) if "Lhat" in header else None
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}:1: bad header {lines[0]!r}") from exc
    rows = lines[1:]
    if len(rows) != N:
        raise ValueError(f"{path}: header says N={N} but found {len(rows)} rows")
    y = np.empty(N, complex)
    for i, ln in enumerate(rows):
        parts = ln.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{i + 2}: expected 'idx,re,im', got {ln!r}")
        try:
            idx, re, im = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ValueError(f"{path}:{i + 2}: {exc}") from exc
        if not 0 <= idx < N:
            raise ValueError(f"{path}:{i + 2}: index {idx} out of range")
        y[idx] = complex(re, im)
    if N % 2 == 0:
        log.warning("%s: even N=%d, dropping the last subcarrier", path, N)
        y, N = y[:-1], N - 1
    L_hat = L_hat if L_hat is not None else (hdr_L if hdr_L is not None else N)
    return y, N, int(L_hat), build_diffuse_basis(N, int(L_hat))


def write_trace(path, h, L_hat=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"N={len(h)}" + (f",Lhat={L_hat}" if L_hat is not None else "") + "\n")
        for i, v in enumerate(h):
            fh.write(f"{i},{float(v.real)!r},{float(v.imag)!r}\n")


# ----------------------------------------------------------------------------
# trials


def _channel_seed(cfg, point_idx, c):
    # snr sweeps reuse the same channels at every SNR (common random numbers)
    if cfg.scenario == "snr_sweep":
        return np.random.SeedSequence([cfg.seed, c])
    return np.random.SeedSequence([cfg.seed, point_idx, c])


def _noise_seed(cfg, point_idx, c, n):
    return np.random.SeedSequence([cfg.seed, point_idx, c, n, 1])


def _draw_point_channel(cfg, m, delta, rng):
    dims = ModelDims(cfg.N, cfg.L, m, cfg.G)
    if cfg.scenario == "separation_sweep":
        f = place_frequencies(rng, m, cfg.L, delta)
        return draw_channel(rng, dims, cfg.fading, f=f)
    fading = FadingConfig(cfg.omega, cfg.beta, delta)
    return draw_channel(rng, dims, fading)


def _amps_on(freqs, h_s, N):
    if len(freqs) == 0:
        return np.zeros(0, complex)
    return pinv(steering_matrix(freqs, N)) @ h_s


def _trial_metrics(ch: AhsdChannel, h_s_hat, gamma_hat, D, freqs, amps, kept, crb_f, crb_a):
    h_d_hat = D @ gamma_hat if len(gamma_hat) else np.zeros(ch.dims.N, complex)
    h_hat = h_s_hat + h_d_hat
    nm_hs = metrics.nmse(ch.h_s, h_s_hat) if np.any(ch.h_s) else math.nan
    nm_hd = metrics.nmse(ch.h_d, h_d_hat) if np.any(ch.h_d) else math.nan
    gam = gamma_hat if len(gamma_hat) else np.zeros(ch.dims.L, complex)
    if ch.dims.m and len(freqs):
        perm = postprocess.match_to_truth(freqs, kept, ch.f)
        mf, ma = metrics.thresholded_mse(freqs, amps, kept, ch.f, ch.alpha, perm)
        cf, ca = metrics.thresholded_crb(kept, perm, crb_f, crb_a)
    else:
        mf = ma = cf = ca = math.nan
    return metrics.TrialMetrics(
        nmse_h=metrics.nmse(ch.h, h_hat), nmse_hs=nm_hs, nmse_hd=nm_hd,
        mse_gamma=metrics.mse(ch.gamma, gam), mse_th_f=mf, mse_th_alpha=ma,
        crb_th_f=cf, crb_th_alpha=ca, kept_count=int(np.count_nonzero(kept)), est_count=len(freqs),
    )


def _run_hals(cfg, est_name, y, D, sig_avg, m, h_true, opts):
    fading = cfg.fading
    e_gamma = fading.expected_gamma_energy(D.shape[1])
    hp = solver.select_hyperparams(len(y), sig_avg, e_gamma, cfg.tau_scale, cfg.lam_scale, cfg.ed_headroom)
    kind = "p2" if est_name == "hals_p2" else "p1"
    if cfg.tune_tau and m > 0:
        _, sol, info = solver.tune_tau(y, D, m, hp.e_d, opts, tau0=hp.tau, estimator=kind, lam=hp.lam,
                                       target=cfg.tune_target)
    elif kind == "p2":
        sol = solver.solve_p2(y, D, hp.tau, hp.e_d, opts)
    else:
        sol = solver.solve_p1(y, D, hp, opts)
    return sol


def _run_anm(cfg, y, sig_avg, m, h_true, opts):
    N = len(y)
    tau0 = cfg.tau_scale * sig_avg * math.sqrt(N * math.log(N))
    if cfg.anm_tuning == "oracle" and h_true is not None:
        sol, _, _ = baselines.anm_best_mse(y, h_true, sig_avg * cfg.tau_scale, opts)
    elif cfg.anm_tuning == "support" and m > 0:
        _, sol, _ = solver.tune_tau(y, None, m, 0.0, opts, tau0=tau0, estimator="anm",
                                     target=cfg.tune_target)
    else:
        sol = solver.solve_anm(y, max(tau0, 1e-12 * np.linalg.norm(y)), opts)
    return sol


def run_trial(cfg: ExperimentConfig, point_idx, c, n):
    """One (channel, noise) draw at one scenario point; returns a plain dict."""
    m, delta, snr = cfg.points()[point_idx]
    ch = _draw_point_channel(cfg, m, delta, np.random.default_rng(_channel_seed(cfg, point_idx, c)))
    rng_n = np.random.default_rng(_noise_seed(cfg, point_idx, c, n))
    sigma = sigma_for_snr(ch, snr)
    meas = draw_pilots_and_observe(rng_n, ch, cfg.G, sigma)
    y = meas.y_avg
    sig_avg = meas.noise_avg_std
    N, L = cfg.N, cfg.L
    D = build_diffuse_basis(N, L)
    opts = cfg.solver_options()
    out = {"metrics": {}, "failed": {}, "crb": {}, "se_rel": math.nan}

    if ch.dims.crb_identifiable() and np.all(np.abs(ch.alpha) > 0):
        cs = crb.crb_summary(ch.f, ch.alpha, N, L, cfg.G, sigma)
        crb_f, crb_a = cs["crb_f"], cs["crb_alpha"]
        hn = float(np.vdot(ch.h, ch.h).real)
        hs = float(np.vdot(ch.h_s, ch.h_s).real)
        hd = float(np.vdot(ch.h_d, ch.h_d).real)
        env_ok, kmin, kmax = math.nan, math.nan, math.nan
        sep = min_separation(ch.f, L).delta
        if N * sep > 2 and m > 0:
            kmin, kmax = crb.envelope_constants(N, sep, cfg.G)
            env = crb.crb_bounds(N, sep, cfg.G, sigma, ch.alpha)
            rep = crb.CrbReport(crb_f, crb_a, cs["crb_gamma"], cs["cond"])
            env_ok = float(env.contains(rep))
        out["crb"] = dict(
            crb_nmse_h=cs["channel_trace"] / hn,
            crb_nmse_hs=cs["sparse_trace"] / hs if hs > 0 else math.nan,
            crb_nmse_hd=cs["diffuse_trace"] / hd if hd > 0 else math.nan,
            crb_f=float(np.mean(crb_f)) if m else math.nan,
            crb_alpha=float(np.mean(crb_a)) if m else math.nan,
            crb_gamma=float(np.mean(cs["crb_gamma"])),
            env_k_min=kmin, env_k_max=kmax, crb_envelope_ok=env_ok,
        )
    else:
        crb_f = crb_a = np.full(m, math.nan)

    noise_avg = y - ch.h
    for name in cfg.estimators:
        try:
            if name in ("hals_p1", "hals_p2"):
                sol = _run_hals(cfg, name, y, D, sig_avg, m, ch.h, opts)
                est = postprocess.support_and_debias(sol, y, D)
                tm = _trial_metrics(ch, est.h_s_db, sol.gamma, D, est.freqs, est.amps, est.kept, crb_f, crb_a)
                se = postprocess.se_decomposition_check(ch.h_s, ch.gamma, sol.gamma, est.freqs,
                                                        noise_avg, y, D, sol.h_s)
                out["se_rel"] = max(se.rel_err, out["se_rel"]) if not math.isnan(out["se_rel"]) else se.rel_err
            elif name == "anm":
                sol = _run_anm(cfg, y, sig_avg, m, ch.h, opts)
                freqs = postprocess.extract_support(sol.z, sol.tau) if sol.tau > 0 else np.zeros(0)
                amps = _amps_on(freqs, sol.h_s, N)
                kept = np.ones(len(freqs), dtype=bool)
                tm = _trial_metrics(ch, sol.h_s, np.zeros(0), D, freqs, amps, kept, crb_f, crb_a)
            elif name == "genie":
                mu = baselines.genie_mu(N, sig_avg, cfg.fading.expected_gamma_energy(L), L, cfg.genie_mu_rule)
                A = steering_matrix(ch.f, N) if m else np.zeros((N, 0), complex)
                ge = baselines.genie_estimate(y, A, D, mu)
                gamma_ge = pinv(D) @ ge.h_d_ge
                amps = _amps_on(ch.f, ge.h_s_ge, N) if m else np.zeros(0, complex)
                kept = postprocess.threshold_support(ch.f, amps, gamma_ge)
                tm = _trial_metrics(ch, ge.h_s_ge, gamma_ge, D, ch.f if m else np.zeros(0), amps, kept,
                                    crb_f, crb_a)
            else:
                h_ls = baselines.ls_estimate(y)
                tm = metrics.TrialMetrics(metrics.nmse(ch.h, h_ls), math.nan, math.nan, math.nan)
            out["metrics"][name] = tm
        except Exception as exc:  # recorded, never aborts the sweep
            log.warning("trial (%d,%d,%d) %s failed: %s", point_idx, c, n, name, exc)
            out["failed"][name] = f"{type(exc).__name__}: {exc}"
    return out


def _run_trace_trial(cfg: ExperimentConfig, point_idx, n, h_clean, D):
    _, _, snr = cfg.points()[point_idx]
    N = len(h_clean)
    rng_n = np.random.default_rng(_noise_seed(cfg, point_idx, 0, n))
    sigma = sigma_for_snr(h_clean, snr)
    y = h_clean + complex_normal(rng_n, sigma**2 / cfg.G, size=N)
    sig_avg = sigma / math.sqrt(cfg.G)
    e_gamma = cfg.trace_ed_fraction * float(np.vdot(h_clean, h_clean).real) / N
    opts = cfg.solver_options()
    out = {"metrics": {}, "failed": {}, "crb": {}, "se_rel": math.nan}
    for name in cfg.estimators:
        try:
            if name in ("hals_p1", "hals_p2"):
                hp = solver.select_hyperparams(N, sig_avg, e_gamma, cfg.tau_scale, cfg.lam_scale, cfg.ed_headroom)
                if name == "hals_p2":
                    sol = solver.solve_p2(y, D, hp.tau, hp.e_d, opts)
                else:
                    sol = solver.solve_p1(y, D, hp, opts)
                est = postprocess.support_and_debias(sol, y, D)
                h_hat = est.h_s_db + D @ sol.gamma
            elif name == "anm":
                sub = dataclasses.replace(cfg, anm_tuning="rule" if cfg.anm_tuning == "support" else cfg.anm_tuning)
                h_hat = _run_anm(sub, y, sig_avg, 0, h_clean, opts).h_s
            elif name == "genie":
                raise ValueError("genie needs the true support, unavailable for measured traces")
            else:
                h_hat = baselines.ls_estimate(y)
            out["metrics"][name] = metrics.TrialMetrics(metrics.nmse(h_clean, h_hat), math.nan, math.nan, math.nan)
        except Exception as exc:
            log.warning("trace trial (%d,%d) %s failed: %s", point_idx, n, name, exc)
            out["failed"][name] = f"{type(exc).__name__}: {exc}"
    return out


def _task(args):
    cfg, p, c, n, trace = args
    if trace is not None:
        return _run_trace_trial(cfg, p, n, *trace)
    return run_trial(cfg, p, c, n)


# ----------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    config: ExperimentConfig
    columns: list
    rows: list = field(default_factory=list)

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def _columns(cfg):
    cols = ["scenario", "point", "m", "delta", "n_delta", "snr_db"]
    for est in cfg.estimators:
        cols += [f"{est}_{c}" for c in METRIC_COLUMNS]
    cols += list(CRB_COLUMNS)
    cols += ["n_trials"]
    return cols


def run_sweep(cfg: ExperimentConfig, workers=1, progress=None):
    """Run every scenario point; the result does not depend on ``workers``."""
    points = cfg.points()
    trace = None
    if cfg.scenario == "trace_eval":
        h_clean, N, L_hat, D_hat = ingest_trace(cfg.trace_path, cfg.L_hat)
        trace = (h_clean, D_hat)
        tasks = [(cfg, p, 0, n, trace) for p in range(len(points)) for n in range(cfg.trials_noise)]
        keys = [(p, 0, n) for p in range(len(points)) for n in range(cfg.trials_noise)]
    else:
        keys = [(p, c, n) for p in range(len(points))
                for c in range(cfg.trials_channel) for n in range(cfg.trials_noise)]
        tasks = [(cfg, p, c, n, None) for p, c, n in keys]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    else:
        results = []
        for i, t in enumerate(tasks):
            results.append(_task(t))
            if progress:
                progress(i + 1, len(tasks))
    by_point = {}
    for key, res in zip(keys, results):
        by_point.setdefault(key[0], []).append(res)

    table = SweepResult(cfg, _columns(cfg))
    for p, (m, delta, snr) in enumerate(points):
        trials = by_point.get(p, [])
        row = [cfg.scenario, p, m,
               math.nan if delta is None else delta,
               math.nan if delta is None else cfg.N * delta, snr]
        for est in cfg.estimators:
            ok = [t["metrics"][est] for t in trials if est in t["metrics"]]
            n_fail = sum(1 for t in trials if est in t["failed"])
            if ok:
                agg = metrics.aggregate_weighted(ok)
                row += [agg.nmse_h, agg.nmse_hs, agg.nmse_hd, agg.mse_gamma, agg.mse_th_f,
                        agg.mse_th_alpha, agg.crb_th_f, agg.crb_th_alpha, agg.retained_fraction, n_fail]
            else:
                row += [math.nan] * (len(METRIC_COLUMNS) - 1) + [n_fail]
        for col in CRB_COLUMNS[:-1]:
            vals = [t["crb"][col] for t in trials if col in t["crb"]]
            if col == "crb_envelope_ok":
                row.append(float(min(vals)) if vals and not any(math.isnan(v) for v in vals) else math.nan)
            else:
                row.append(math.fsum(vals) / len(vals) if vals else math.nan)
        se = [t["se_rel"] for t in trials if not math.isnan(t["se_rel"])]
        row.append(max(se) if se else math.nan)
        row.append(len(trials))
        table.rows.append(row)
    return table


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return "%.17e" % v


def emit_csv(table: SweepResult, path):
    if not table.rows:
        raise ValueError("empty table")
    if not table.config.estimators:
        raise ValueError("empty estimator list")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(table.columns) + "\n")
        for row in table.rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    """Parse an emitted CSV back into ``(columns, rows)`` with floats where possible."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    cols = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        if not ln:
            continue
        vals = []
        for v in ln.split(","):
            try:
                vals.append(float(v))
            except ValueError:
                vals.append(v)
        rows.append(vals)
    return cols, rows


def default_workers():
    return max(1, (os.cpu_count() or 1))
