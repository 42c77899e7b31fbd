"""Timing of the hot kernels and of one full Monte Carlo trial.

    python benchmarks/bench_kernels.py [--N 101] [--repeat 50]

Also reports the share of trial time spent in the Toeplitz kernels, which
is what a compiled backend for ``ahsd._kernels`` could accelerate.
"""

import argparse
import cProfile
import pstats
import timeit

import numpy as np

from ahsd import _kernels, harness, linalg, solver
from ahsd.signal_model import FadingConfig, ModelDims, build_diffuse_basis, draw_channel, draw_pilots_and_observe, sigma_for_snr


def bench(label, fn, repeat):
    t = min(timeit.repeat(fn, number=1, repeat=repeat))
    print(f"{label:<34s} {t * 1e3:9.3f} ms")
    return t


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--N", type=int, default=101)
    p.add_argument("--L", type=int, default=20)
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args()
    N, L = args.N, args.L
    r = np.random.default_rng(0)
    print(f"backend={_kernels.BACKEND} N={N} L={L}")

    iota = r.standard_normal(N) + 1j * r.standard_normal(N)
    M = linalg.toeplitz(iota)
    bench("toeplitz build", lambda: linalg.toeplitz(iota), args.repeat)
    bench("toeplitz adjoint", lambda: linalg.toeplitz_adjoint(M, check=False), args.repeat)
    X = r.standard_normal((N + 1, 4)) + 1j * r.standard_normal((N + 1, 4))
    H = X @ X.conj().T - 0.1 * np.eye(N + 1)
    bench("psd_project (low rank)", lambda: linalg.psd_project(H), args.repeat)
    bench("eigh full (reference)", lambda: np.linalg.eigh(H), args.repeat)

    ch = draw_channel(r, ModelDims(N, L, 4), FadingConfig(0.05, 0.01, 0.5 / L))
    meas = draw_pilots_and_observe(r, ch, 1, sigma_for_snr(ch, 20.0))
    D = build_diffuse_basis(N, L)
    hp = solver.select_hyperparams(N, meas.noise_avg_std, FadingConfig(0.05, 0.01).expected_gamma_energy(L))
    bench("solve_p1 (default options)", lambda: solver.solve_p1(meas.y_avg, D, hp), 3)

    cfg = harness.ExperimentConfig(N=N, L=L, m=4, delta=0.5 / L, snr_db_list=(20.0,), trials_channel=1,
                                   trials_noise=1)
    t_trial = bench("harness trial (all estimators)", lambda: harness.run_trial(cfg, 0, 0, 0), 3)

    prof = cProfile.Profile()
    prof.runcall(harness.run_trial, cfg, 0, 0, 0)
    stats = pstats.Stats(prof)
    kern = sum(v[3] for k, v in stats.stats.items() if k[0].endswith("_kernels.py"))
    eig = sum(v[3] for k, v in stats.stats.items() if k[2] in ("eigh", "_evr", "cho_factor", "svd"))
    total = stats.total_tt
    print(f"toeplitz kernels share of trial   {100 * kern / total:6.2f} %")
    print(f"eigh/cholesky/svd share of trial  {100 * eig / total:6.2f} %")


if __name__ == "__main__":
    main()
