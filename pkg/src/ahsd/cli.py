"""Command line entry point: ``ahsd {simulate,sweep,crb,trace}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import time

import numpy as np

from . import crb, harness, postprocess, solver
from .signal_model import (
    FadingConfig, ModelDims, build_diffuse_basis, draw_channel, draw_pilots_and_observe,
    min_separation, sigma_for_snr,
)

log = logging.getLogger("ahsd")


def _load(args, **extra):
    over = dict(seed=args.seed, **extra)
    if args.config:
        return harness.load_config(args.config, **over)
    return harness.ExperimentConfig(**{k: v for k, v in over.items() if v is not None})


def cmd_simulate(args):
    cfg = _load(args)
    m = cfg.m
    snr = cfg.snr_db_list[-1] if args.snr is None else args.snr
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    ch = draw_channel(rng, ModelDims(cfg.N, cfg.L, m, cfg.G), FadingConfig(cfg.omega, cfg.beta, cfg.delta))
    sigma = sigma_for_snr(ch, snr)
    meas = draw_pilots_and_observe(rng, ch, cfg.G, sigma)
    D = build_diffuse_basis(cfg.N, cfg.L)
    hp = solver.select_hyperparams(cfg.N, meas.noise_avg_std, cfg.fading.expected_gamma_energy(cfg.L),
                                   cfg.tau_scale, cfg.lam_scale, cfg.ed_headroom)
    t0 = time.perf_counter()
    sol = solver.solve_p1(meas.y_avg, D, hp, solver.SolverOptions())
    dt = time.perf_counter() - t0
    rep = solver.check_optimality(sol, meas.y_avg, D, hp)
    est = postprocess.support_and_debias(sol, meas.y_avg, D)
    h_hat = est.h_s_db + D @ sol.gamma
    sep = min_separation(ch.f, cfg.L)
    print(f"N={cfg.N} L={cfg.L} m={m} snr={snr:g} dB sigma={sigma:.6g} N*delta={cfg.N * sep.delta:.4g}")
    print(f"tau={hp.tau:.6g} lam={hp.lam:.6g} admm_iters={sol.iters} certified={sol.converged} time={dt:.2f}s")
    print(f"true f:      {np.array2string(np.sort(ch.f), precision=6)}")
    print(f"estimated f: {np.array2string(est.freqs, precision=6)} kept={est.kept.astype(int).tolist()}")
    print(f"primal={sol.primal_obj:.10g} dual={sol.dual_obj:.10g} gap={sol.gap:.3e}")
    print(f"KKT: dual-norm excess={rep.dual_norm_excess:.3e} ridge={rep.ridge_residual:.3e} "
          f"complementarity={rep.complementarity:.3e}")
    nm = float(np.linalg.norm(ch.h - h_hat) ** 2 / np.linalg.norm(ch.h) ** 2)
    nls = float(np.linalg.norm(ch.h - meas.y_avg) ** 2 / np.linalg.norm(ch.h) ** 2)
    print(f"NMSE(h): hals={nm:.4e} ls={nls:.4e}")
    if ch.dims.crb_identifiable():
        cs = crb.crb_summary(ch.f, ch.alpha, cfg.N, cfg.L, cfg.G, sigma)
        print(f"normalized channel CRB={cs['channel_trace'] / np.linalg.norm(ch.h) ** 2:.4e}")
    return 0


def cmd_sweep(args):
    cfg = _load(args)
    workers = args.workers or 1
    t0 = time.perf_counter()

    def progress(i, n):
        if args.verbose and (i == n or i % max(1, n // 20) == 0):
            print(f"  {i}/{n} trials", file=sys.stderr)

    table = harness.run_sweep(cfg, workers=workers, progress=progress)
    out = args.out or "sweep.csv"
    harness.emit_csv(table, out)
    print(f"wrote {len(table.rows)} rows to {out} in {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_crb(args):
    cfg = _load(args)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    ch = draw_channel(rng, ModelDims(cfg.N, cfg.L, cfg.m, cfg.G), FadingConfig(cfg.omega, cfg.beta, cfg.delta))
    sigma = args.sigma
    if sigma is None:
        sigma = sigma_for_snr(ch, cfg.snr_db_list[-1])
    fim = crb.fim_theta(ch.f, ch.alpha, cfg.N, cfg.L, cfg.G, sigma)
    rep = crb.crb_parameters(fim)
    _, tr = crb.crb_channel(ch.f, ch.alpha, cfg.N, cfg.L, cfg.G, sigma)
    comp = crb.crb_summary(ch.f, ch.alpha, cfg.N, cfg.L, cfg.G, sigma)
    sep = min_separation(ch.f, cfg.L).delta
    lines = [f"N={cfg.N} L={cfg.L} m={cfg.m} G={cfg.G} sigma={sigma:.6g} N*delta={cfg.N * sep:.6g}",
             f"FIM condition number {rep.cond:.4e}",
             f"channel CRB trace={tr:.10g} error bound={tr / 2:.10g}",
             f"sparse sub-trace={comp['sparse_trace']:.10g} diffuse sub-trace={comp['diffuse_trace']:.10g}"]
    env = None
    if cfg.N * sep > 2:
        env = crb.crb_bounds(cfg.N, sep, cfg.G, sigma, ch.alpha)
        lines.append(f"envelope K_min={env.k_min:.6g} K_max={env.k_max:.6g} contained={env.contains(rep)}")
    else:
        lines.append("envelope undefined (N*delta <= 2)")
    for i, (f, a) in enumerate(zip(ch.f, ch.alpha)):
        extra = f" in [{env.f_low[i]:.3e}, {env.f_high[i]:.3e}]" if env else ""
        lines.append(f"  f={f:.6f} |alpha|={abs(a):.4f} CRB(f)={rep.crb_f[i]:.4e}{extra} CRB(alpha)={rep.crb_alpha[i]:.4e}")
    lines.append(f"  CRB(gamma): min={rep.crb_gamma.min():.4e} max={rep.crb_gamma.max():.4e}")
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("family,index,crb,env_low,env_high\n")
            for i in range(cfg.m):
                lo = env.f_low[i] if env else math.nan
                hi = env.f_high[i] if env else math.nan
                fh.write(f"f,{i},{rep.crb_f[i]:.17e},{lo:.17e},{hi:.17e}\n")
            for fam, vals in (("alpha", rep.crb_alpha), ("gamma", rep.crb_gamma)):
                lo = env.amp_low if env else math.nan
                hi = env.amp_high if env else math.nan
                for i, v in enumerate(vals):
                    fh.write(f"{fam},{i},{v:.17e},{lo:.17e},{hi:.17e}\n")
    return 0


def cmd_trace(args):
    extra = {"scenario": "trace_eval"}
    if args.trace:
        extra["trace_path"] = args.trace
    if args.config:
        cfg = harness.load_config(args.config, seed=args.seed, **extra)
    else:
        if not args.trace:
            raise SystemExit("trace: need --trace PATH or a config with trace_path")
        cfg = harness.ExperimentConfig(estimators=("hals_p2", "anm", "ls"), trials_noise=10,
                                       **{k: v for k, v in dict(seed=args.seed, **extra).items() if v is not None})
    if cfg.scenario != "trace_eval":
        cfg = dataclasses.replace(cfg, scenario="trace_eval")
    y, N, L_hat, _ = harness.ingest_trace(cfg.trace_path, cfg.L_hat)
    print(f"trace {cfg.trace_path}: N={N} L_hat={L_hat} ||h||^2={np.vdot(y, y).real:.6g}")
    table = harness.run_sweep(cfg, workers=args.workers or 1)
    out = args.out or "trace.csv"
    harness.emit_csv(table, out)
    for row in table.rows:
        snr = row[table.columns.index("snr_db")]
        parts = [f"{e}={row[table.columns.index(e + '_nmse_h')]:.4e}" for e in cfg.estimators]
        print(f"snr={snr:g} dB  " + " ".join(parts))
    print(f"wrote {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ahsd", description="Hybrid sparse/diffuse channel estimation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value configuration file")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")

    sp = sub.add_parser("simulate", help="solve one random instance and print diagnostics")
    common(sp)
    sp.add_argument("--snr", type=float, help="SNR in dB (default: last configured value)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="run a configured scenario sweep and write CSV")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("crb", help="Cramer-Rao bound report for one channel draw")
    common(sp)
    sp.add_argument("--sigma", type=float, help="noise standard deviation (default: from SNR)")
    sp.set_defaults(func=cmd_crb)

    sp = sub.add_parser("trace", help="evaluate estimators on a measured trace file")
    common(sp)
    sp.add_argument("--trace", help="trace file path (overrides trace_path)")
    sp.set_defaults(func=cmd_trace)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
