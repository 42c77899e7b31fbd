"""HALS estimators over the Toeplitz-PSD cone.

Atomic norm convention: ``||x||_A = min 1/2 (t + iota_0)`` subject to
``[[Toep(iota), x], [x^H, t]] >= 0``, so that every steering vector has unit
atomic norm.  With this convention the regularized problem is

    min_{h_s, gamma} 1/2 ||y - h_s - D gamma||^2 + tau ||h_s||_A + lam/2 ||gamma||^2

Each solve runs a consensus ADMM on the SDP form and then refines the
atomic decomposition read off the ADMM iterate until the optimality
conditions are certified (dual polynomial bounded by ``tau`` everywhere,
equal to ``tau`` in modulus on the support).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg
from scipy import optimize

from .atomic import DEFAULT_GRID, dual_atomic_norm, dual_poly, local_maxima, merge_close
from .linalg import RidgeOperator, SolverError, hermitian_part, psd_project, toeplitz, toeplitz_adjoint
from .signal_model import canonical_freq, steering_matrix, subcarrier_offsets, wrap_distance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    rho: float = 1.0
    max_iters: int = 50_000
    eps_abs: float = 1e-7
    eps_rel: float = 1e-6
    adaptive_rho: bool = True
    rho_min: float = 1e-4
    rho_max: float = 1e4
    polish: bool = True
    grid_size: int = DEFAULT_GRID
    certify_tol: float = 1e-9
    max_refine_rounds: int = 40

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("eps_abs and eps_rel must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rho <= 0:
            raise ValueError("rho must be positive")


FAST_OPTIONS = SolverOptions(eps_abs=1e-5, eps_rel=1e-4, max_iters=400)


@dataclass(frozen=True)
class Hyperparams:
    tau: float
    lam: float
    e_d: float

    def __post_init__(self):
        if self.tau < 0 or self.lam < 0 or self.e_d < 0:
            raise ValueError("hyperparameters must be nonnegative")


@dataclass
class HalsSolution:
    h_s: np.ndarray
    gamma: np.ndarray
    t: float
    iota: np.ndarray
    z: np.ndarray
    primal_obj: float
    dual_obj: float
    gap: float
    iters: int
    converged: bool
    tau: float = 0.0
    lam: float = math.inf
    problem: str = "p1"
    freqs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    admm_value: float = math.nan
    admm_converged: bool = False
    dual_norm: float = math.nan
    certificate: Optional[np.ndarray] = None
    e_d: float = math.nan
    admm_state: Optional[dict] = field(default=None, repr=False)

    @property
    def atomic_value(self):
        """``||h_s||_A`` as carried by the SDP variables, ``(t + iota_0) / 2``."""
        return 0.5 * (self.t + float(np.real(self.iota[0])))

    @property
    def gamma_energy(self):
        return float(np.vdot(self.gamma, self.gamma).real)


# ----------------------------------------------------------------------------
# hyperparameters


def select_hyperparams(N, sigma, expected_gamma_energy, tau_scale=1.0, lam_scale=1.0, headroom=2.0):
    """Scale rules ``tau ~ sigma sqrt(N ln N)`` and ``lam ~ N sigma^2 / E||gamma||^2``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if expected_gamma_energy <= 0:
        raise ValueError("expected_gamma_energy must be positive")
    tau = tau_scale * sigma * math.sqrt(N * math.log(N)) if N > 1 else 0.0
    lam = lam_scale * N * sigma**2 / expected_gamma_energy
    return Hyperparams(tau=tau, lam=lam, e_d=expected_gamma_energy * headroom)


# ----------------------------------------------------------------------------
# objectives and diagnostics


def primal_objective(y_avg, h_s, gamma, D, tau, lam, atomic_value):
    r = y_avg - h_s - (D @ gamma if len(gamma) else 0)
    val = 0.5 * np.vdot(r, r).real + tau * atomic_value
    if len(gamma):
        val += 0.5 * lam * np.vdot(gamma, gamma).real
    return float(val)


def dual_objective(z, y_avg, D, lam):
    """``1/2 ||y||^2 - 1/2 ||y - z||^2 - 1/(2 lam) ||D^H z||^2``."""
    z = np.asarray(z, dtype=complex)
    y_avg = np.asarray(y_avg, dtype=complex)
    val = 0.5 * np.vdot(y_avg, y_avg).real - 0.5 * np.linalg.norm(y_avg - z) ** 2
    if D is not None and D.shape[1]:
        if lam <= 0:
            raise ValueError("lam must be positive")
        if math.isfinite(lam):
            val -= 0.5 / lam * np.linalg.norm(D.conj().T @ z) ** 2
    return float(val)


def duality_gap(sol: HalsSolution):
    return sol.primal_obj - sol.dual_obj


@dataclass(frozen=True)
class OptimalityReport:
    dual_norm_excess: float
    ridge_residual: float
    complementarity: float
    dual_norm: float
    atomic_value: float

    def passes(self, tau, tol=1e-5):
        return (
            self.dual_norm_excess <= tol * tau
            and self.ridge_residual <= tol * max(1.0, tau)
            and self.complementarity <= tol * max(tau * self.atomic_value, tau)
        )


def check_optimality(sol: HalsSolution, y_avg, D, hp: Hyperparams, grid_size=DEFAULT_GRID):
    """Residuals of the three first-order optimality conditions of the regularized problem.

    Returns ``||z||*_A - tau``, ``||D^H z - lam gamma||`` and
    ``|Re<z, h_s> - tau ||h_s||_A|`` for ``z = y - h_s - D gamma``.
    """
    z = y_avg - sol.h_s - (D @ sol.gamma if D is not None and D.shape[1] else 0)
    dn = dual_atomic_norm(z, grid_size)
    if D is not None and D.shape[1] and math.isfinite(hp.lam):
        ridge = float(np.linalg.norm(D.conj().T @ z - hp.lam * sol.gamma))
    else:
        ridge = 0.0
    av = sol.atomic_value
    comp = abs(float(np.vdot(sol.h_s, z).real) - hp.tau * av)
    return OptimalityReport(dn - hp.tau, ridge, comp, dn, av)


# ----------------------------------------------------------------------------
# ADMM over the (N+1) x (N+1) Toeplitz-PSD cone


def _assemble(u, x, t):
    N = len(x)
    S = np.empty((N + 1, N + 1), complex)
    S[:N, :N] = toeplitz(u)
    S[:N, N] = x
    S[N, :N] = np.conj(x)
    S[N, N] = t
    return S


def _admm(y, ridge: RidgeOperator, tau, lam, mode, opts: SolverOptions, state=None):
    """Consensus ADMM; ``mode`` is one of ``"p1"``, ``"anm"``, ``"p0"``."""
    N = len(y)
    n = N + 1
    weights = 2.0 * (N - np.arange(N))
    weights[0] = N
    D = ridge.A
    if state is None:
        Z = np.zeros((n, n), complex)
        Lam = np.zeros((n, n), complex)
        rho = opts.rho
    else:
        Z, Lam, rho = state["Z"].copy(), state["Lam"].copy(), state["rho"]
    gamma = np.zeros(ridge.k, complex)
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        W = Z + Lam / rho
        W0 = W[:N, :N]
        w1 = 0.5 * (W[:N, N] + np.conj(W[N, :N]))
        wnn = float(np.real(W[N, N]))
        t = wnn - tau / (2 * rho)
        g = toeplitz_adjoint(hermitian_part(W0), check=False)
        u = g / weights
        u[0] = (g[0].real - tau / (2 * rho)) / N
        if mode == "p1":
            c = 2 * rho / (1 + 2 * rho)
            gamma = ridge.solve(y - w1, lam, scale=c)
            x = (y - D @ gamma + 2 * rho * w1) / (1 + 2 * rho)
        elif mode == "anm":
            x = (y + 2 * rho * w1) / (1 + 2 * rho)
        elif mode == "p0":
            gamma = ridge.solve(y - w1, 0.0) if ridge.k else gamma
            x = y - (D @ gamma if ridge.k else 0)
        else:
            raise ValueError(mode)
        S = _assemble(u, x, t)
        Z_old = Z
        Z = psd_project(S - Lam / rho)
        R = Z - S
        Lam = Lam + rho * R
        if not np.isfinite(Lam).all():
            raise SolverError(f"ADMM diverged (NaN/inf) at iteration {it}")
        r_pri = np.linalg.norm(R)
        r_dual = rho * np.linalg.norm(Z - Z_old)
        eps_pri = opts.eps_abs * n + opts.eps_rel * max(np.linalg.norm(Z), np.linalg.norm(S))
        eps_dual = opts.eps_abs * n + opts.eps_rel * np.linalg.norm(Lam)
        if r_pri <= eps_pri and r_dual <= eps_dual:
            converged = True
            break
        if opts.adaptive_rho:
            if r_pri > 10 * r_dual and rho < opts.rho_max:
                rho = min(2 * rho, opts.rho_max)
            elif r_dual > 10 * r_pri and rho > opts.rho_min:
                rho = max(rho / 2, opts.rho_min)
    return dict(x=x, gamma=gamma, t=t, u=u, Z=Z, Lam=Lam, rho=rho, iters=it, converged=converged)


# ----------------------------------------------------------------------------
# certified refinement of the atomic decomposition


class _Reduced:
    """Regularized problem with the diffuse part eliminated.

    ``phi(f, c) = 1/2 r^H W r + tau sum |c_i|`` with ``r = y - A_f c`` and
    ``W = I - D (D^H D + lam I)^{-1} D^H``; ``z = W r`` is the HALS residual.
    """

    def __init__(self, y, ridge: RidgeOperator, tau, lam):
        self.y = y
        self.N = len(y)
        self.ridge = ridge
        self.tau = tau
        self.lam = lam
        # W is the identity without a diffuse part; None skips the products
        self.W = ridge.residual_weight(lam) if ridge.k and math.isfinite(lam) else None
        self.k_off = subcarrier_offsets(self.N)

    def _w(self, x):
        return x if self.W is None else self.W @ x

    def residual(self, f, c):
        r = self.y - steering_matrix(f, self.N) @ c if len(f) else self.y.copy()
        return self._w(r)

    def value(self, f, c):
        r = self.y - steering_matrix(f, self.N) @ c if len(f) else self.y
        return float(0.5 * np.vdot(r, self._w(r)).real + self.tau * np.abs(c).sum())

    def lasso(self, f, c0=None, iters=3000, tol=1e-13):
        """Coefficients for fixed frequencies (FISTA on the complex lasso)."""
        A = steering_matrix(f, self.N)
        WA = self._w(A)
        G = hermitian_part(A.conj().T @ WA)
        b = WA.conj().T @ self.y
        Lg = max(float(np.linalg.eigvalsh(G).max()), 1e-12)
        c = np.zeros(len(f), complex) if c0 is None else c0.astype(complex)
        v, tk = c.copy(), 1.0
        thr = self.tau / Lg
        for _ in range(iters):
            w = v - (G @ v - b) / Lg
            mag = np.abs(w)
            c_new = np.where(mag > thr, (1 - thr / np.maximum(mag, 1e-300)) * w, 0)
            tk_new = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
            v = c_new + ((tk - 1) / tk_new) * (c_new - c)
            delta = np.abs(c_new - c).max(initial=0.0)
            c, tk = c_new, tk_new
            if delta <= tol * max(1.0, np.abs(c).max(initial=0.0)):
                break
        return c

    def _unpack(self, p, f_ref):
        k = len(f_ref)
        f = f_ref + p[:k] / self.N
        c = p[k:2 * k] + 1j * p[2 * k:]
        return f, c

    def grad_hess(self, p, f_ref, hess=True):
        """Gradient and exact Hessian of ``phi`` in ``p = (N (f - f_ref), Re c, Im c)``."""
        f, c = self._unpack(p, f_ref)
        N, k = self.N, len(f)
        w = 2j * np.pi * self.k_off
        A = steering_matrix(f, N)
        LA = w[:, None] * A
        z = self._w(self.y - A @ c)
        dq = LA.conj().T @ z
        # d r / d p: scaled frequency, real and imaginary coefficient parts
        J = np.hstack([-(LA * c) / N, -A, -1j * A])
        mag = np.abs(c)
        sgn = c / np.maximum(mag, 1e-300)
        g = np.real(J.conj().T @ z)
        g[k:2 * k] += self.tau * sgn.real
        g[2 * k:] += self.tau * sgn.imag
        if not hess:
            return g, None
        H = np.real(J.conj().T @ self._w(J))
        d2q = (w[:, None] * LA).conj().T @ z
        i = np.arange(k)
        H[i, i] += -np.real(c * np.conj(d2q)) / N**2
        H[i, k + i] += -dq.real / N
        H[k + i, i] += -dq.real / N
        H[i, 2 * k + i] += -dq.imag / N
        H[2 * k + i, i] += -dq.imag / N
        curv = self.tau / np.maximum(mag, 1e-300) ** 3
        x, yv = c.real, c.imag
        H[k + i, k + i] += curv * yv * yv
        H[2 * k + i, 2 * k + i] += curv * x * x
        H[k + i, 2 * k + i] += -curv * x * yv
        H[2 * k + i, k + i] += -curv * x * yv
        return g, 0.5 * (H + H.T)

    def grad(self, p, f_ref):
        return self.grad_hess(p, f_ref, hess=False)[0]

    def newton(self, f, c, max_iters=100, gtol=1e-12):
        """Damped Newton iterations on (f, Re c, Im c) for a fixed set of atoms."""
        f_ref = np.array(f, dtype=float)
        k = len(f_ref)
        if k == 0:
            return f_ref, c
        p = np.concatenate([np.zeros(k), c.real, c.imag])
        gscale = max(self.tau, 1e-300)
        val = self.value(*self._unpack(p, f_ref))
        for _ in range(max_iters):
            g, H = self.grad_hess(p, f_ref)
            if np.abs(g).max() <= gtol * gscale:
                break
            d = _newton_direction(H, g)
            slope = float(g @ d)
            tiny = 1e-15 * max(abs(val), 1e-300)
            if -slope <= tiny:
                break
            step, accepted = 1.0, False
            for _ls in range(30):
                if -step * slope <= tiny:
                    break       # predicted decrease is below roundoff
                p_new = p + step * d
                f_new, c_new = self._unpack(p_new, f_ref)
                if np.abs(c_new).min() > 0:
                    v_new = self.value(f_new, c_new)
                    if v_new <= val + 1e-4 * step * slope:
                        accepted = True
                        break
                step /= 2
            if not accepted:
                break
            decrease = val - v_new
            p, val = p_new, v_new
            if decrease <= 1e-16 * max(abs(val), 1e-300) and step < 1:
                break
        return self._unpack(p, f_ref)


def _newton_direction(H, g):
    dg = np.diag(H)
    if dg.min() > 0:
        try:
            cf = scipy.linalg.cho_factor(H, check_finite=False)
            d = -scipy.linalg.cho_solve(cf, g, check_finite=False)
            if np.isfinite(d).all() and g @ d < 0:
                return d
        except np.linalg.LinAlgError:
            pass
    evals, evecs = np.linalg.eigh(H)
    floor = 1e-10 * max(np.abs(evals).max(), 1e-300)
    # flip and floor negative curvature so d is a descent direction
    return -evecs @ ((evecs.T @ g) / np.maximum(np.abs(evals), floor))


def _prune(f, c, N, scale):
    keep = np.abs(c) > 1e-12 * scale
    f, c = canonical_freq(f[keep]), c[keep]
    if len(f) > 1:
        order = np.argsort(f)
        f, c = f[order], c[order]
        # collapse atoms that converged onto each other
        out_f, out_c = [f[0]], [c[0]]
        for fi, ci in zip(f[1:], c[1:]):
            if wrap_distance(fi, out_f[-1]) < 1e-6 / N:
                out_c[-1] += ci
            else:
                out_f.append(fi)
                out_c.append(ci)
        if len(out_f) > 1 and wrap_distance(out_f[0], out_f[-1]) < 1e-6 / N:
            out_c[0] += out_c.pop()
            out_f.pop()
        f, c = np.array(out_f), np.array(out_c)
    return f, c


def _refine(y, ridge, tau, lam, f0, opts: SolverOptions):
    """ADCG-style certified refinement.  Returns (freqs, coeffs, dual_norm, rounds, certified)."""
    red = _Reduced(y, ridge, tau, lam)
    N = len(y)
    scale = max(float(np.abs(y).max(initial=0.0)), 1e-300)
    f = canonical_freq(np.asarray(f0, dtype=float))
    c = red.lasso(f) if len(f) else np.zeros(0, complex)
    f, c = _prune(f, c, N, scale)
    dn = math.nan
    for rounds in range(1, opts.max_refine_rounds + 1):
        f, c = red.newton(f, c)
        f, c = _prune(f, c, N, scale)
        c = red.lasso(f, c) if len(f) else c
        f, c = _prune(f, c, N, scale)
        f, c = red.newton(f, c)
        f, c = _prune(f, c, N, scale)
        z = red.residual(f, c)
        dn, f_new = dual_atomic_norm(z, opts.grid_size, return_freq=True)
        if dn <= tau * (1 + opts.certify_tol):
            return f, c, dn, rounds, True
        if len(f) and wrap_distance(f_new, f).min() < 1e-9:
            # violation sits on the current support: coefficient problem not converged
            c = red.lasso(f, c, iters=20000, tol=1e-15)
            continue
        add = _extra_atoms(z, tau, f, f_new, N, opts.grid_size)
        f = np.r_[f, add]
        c = np.r_[c, np.zeros(len(add))]
        c = red.lasso(f, c)
        f, c = _prune(f, c, N, scale)
    return f, c, dn, opts.max_refine_rounds, False


MAX_NEW_ATOMS = 4


def _extra_atoms(z, tau, f, f_new, N, grid_size):
    """The largest violation plus up to ``MAX_NEW_ATOMS - 1`` others spaced >= 1/N from it and from ``f``."""
    add = [f_new]
    cf, cv = local_maxima(z, grid_size, min_value=tau * (1 + 1e-6))
    for i in np.argsort(cv)[::-1]:
        if len(add) >= MAX_NEW_ATOMS:
            break
        if wrap_distance(cf[i], np.array(add)).min() >= 1 / N and (
                not len(f) or wrap_distance(cf[i], f).min() >= 1 / N):
            add.append(cf[i])
    return np.array(add)


def _support_candidates(z, tau, N, grid_size, band=0.1):
    if tau <= 0:
        return np.zeros(0)
    f, v = local_maxima(z, grid_size, min_value=(1 - 2 * band) * tau)
    keep = v >= (1 - band) * tau
    if not keep.any():
        return np.zeros(0)
    f, _ = merge_close(f[keep], v[keep], 0.25 / N)
    return f


def _sdp_from_decomposition(f, c, N):
    """Toeplitz generator and ``t`` of the PSD certificate ``sum |c_i| [a_i; s_i][a_i; s_i]^H``."""
    if len(f) == 0:
        return 0.0, np.zeros(N, complex)
    A = steering_matrix(f, N)
    w = np.abs(c)
    iota = (A * w) @ np.conj(A[0, :])
    iota[0] = iota[0].real
    return float(w.sum()), iota


def _finish(y, D, ridge, tau, lam, f, c, dn, iters, certified, problem, admm_res=None):
    N = len(y)
    A = steering_matrix(f, N)
    h_s = A @ c if len(f) else np.zeros(N, complex)
    if ridge.k and math.isfinite(lam):
        gamma = ridge.solve(y - h_s, lam)
    else:
        gamma = np.zeros(ridge.k, complex)
    z = y - h_s - (D @ gamma if ridge.k else 0)
    t, iota = _sdp_from_decomposition(f, c, N)
    av = 0.5 * (t + iota[0].real)
    Dz = D if ridge.k and math.isfinite(lam) else None
    pobj = primal_objective(y, h_s, gamma, D, tau, lam if math.isfinite(lam) else 0.0, av)
    dobj = dual_objective(z, y, Dz, lam)
    sol = HalsSolution(
        h_s=h_s, gamma=gamma, t=t, iota=iota, z=z,
        primal_obj=pobj, dual_obj=dobj, gap=pobj - dobj,
        iters=iters, converged=certified, tau=tau, lam=lam, problem=problem,
        freqs=np.asarray(f, float), coeffs=np.asarray(c, complex), dual_norm=dn,
    )
    if admm_res is not None:
        sol.admm_value = 0.5 * (admm_res["t"] + float(np.real(admm_res["u"][0])))
        sol.admm_converged = admm_res["converged"]
        sol.admm_state = {k: admm_res[k] for k in ("Z", "Lam", "rho")}
    return sol


def _admm_only_solution(y, D, ridge, tau, lam, res, problem):
    N = len(y)
    x, gamma = res["x"], res["gamma"]
    z = y - x - (D @ gamma if ridge.k else 0)
    t, iota = res["t"], res["u"].copy()
    av = 0.5 * (t + iota[0].real)
    lam_eff = lam if math.isfinite(lam) else 0.0
    pobj = primal_objective(y, x, gamma, D, tau, lam_eff, av)
    dobj = dual_objective(z, y, D if ridge.k and math.isfinite(lam) else None, lam)
    return HalsSolution(
        h_s=x, gamma=gamma, t=t, iota=iota, z=z, primal_obj=pobj, dual_obj=dobj,
        gap=pobj - dobj, iters=res["iters"], converged=res["converged"], tau=tau, lam=lam,
        problem=problem, admm_value=av, admm_converged=res["converged"],
        dual_norm=dual_atomic_norm(z), admm_state={k: res[k] for k in ("Z", "Lam", "rho")},
    )


def _rescale(sol: HalsSolution, s):
    if s == 1.0:
        return sol
    sol.h_s = sol.h_s * s
    sol.gamma = sol.gamma * s
    sol.z = sol.z * s
    sol.t *= s
    sol.iota = sol.iota * s
    sol.coeffs = sol.coeffs * s
    sol.tau *= s
    sol.primal_obj *= s * s
    sol.dual_obj *= s * s
    sol.gap *= s * s
    sol.admm_value *= s
    sol.dual_norm *= s
    if sol.certificate is not None:
        sol.certificate = sol.certificate
    return sol


def _normalize(y):
    y = np.asarray(y, dtype=complex)
    s = float(np.linalg.norm(y) / math.sqrt(len(y)))
    return (y / s, s) if s > 0 else (y, 1.0)


def _solve_regularized(y_avg, D, tau, lam, opts, problem, init=None):
    y0 = np.asarray(y_avg, dtype=complex)
    N = len(y0)
    y, s = _normalize(y0)
    tau_n = tau / s
    if D is None or problem == "anm":
        D = np.zeros((N, 0), complex)
    ridge = RidgeOperator(D)
    if not np.any(y):
        sol = _finish(y, D, ridge, tau_n, lam, np.zeros(0), np.zeros(0, complex), 0.0, 0, True, problem)
        return _rescale(sol, s)
    admm_res = None
    if init is not None and init.freqs is not None and opts.polish:
        f0 = init.freqs
        iters = 0
    else:
        mode = "anm" if not ridge.k else "p1"
        state = None
        if init is not None and init.admm_state is not None:
            st = init.admm_state
            state = dict(Z=st["Z"], Lam=st["Lam"] * (tau_n / max(init.tau / s, 1e-300)), rho=st["rho"])
        admm_res = _admm(y, ridge, tau_n, lam, mode, opts, state)
        iters = admm_res["iters"]
        if not opts.polish:
            return _rescale(_admm_only_solution(y, D, ridge, tau_n, lam, admm_res, problem), s)
        z = y - admm_res["x"] - (D @ admm_res["gamma"] if ridge.k else 0)
        f0 = _support_candidates(z, tau_n, N, opts.grid_size)
    f, c, dn, rounds, certified = _refine(y, ridge, tau_n, lam, f0, opts)
    if not certified:
        log.warning("refinement not certified: dual norm %.3e vs tau %.3e", dn, tau_n)
    sol = _finish(y, D, ridge, tau_n, lam, f, c, dn, iters, certified, problem, admm_res)
    return _rescale(sol, s)


def solve_p1(y_avg, D, hp: Hyperparams, opts: SolverOptions = SolverOptions(), init=None):
    """Regularized HALS: ``1/2||y - h_s - D gamma||^2 + tau ||h_s||_A + lam/2 ||gamma||^2``.

    Parameters
    ----------
    init : HalsSolution, optional
        Previous solution on a nearby problem (continuation in ``tau`` or
        ``lam``). Its atomic decomposition seeds the refinement directly.
    """
    if hp.tau <= 0 or hp.lam <= 0:
        raise ValueError("solve_p1 requires tau > 0 and lam > 0")
    if D.shape[0] != len(y_avg):
        raise ValueError("D and y_avg dimensions disagree")
    sol = _solve_regularized(y_avg, D, hp.tau, hp.lam, opts, "p1", init)
    sol.e_d = hp.e_d
    return sol


def solve_anm(y_avg, tau, opts: SolverOptions = SolverOptions(), init=None):
    """Vanilla atomic norm denoising (no diffuse term)."""
    if tau <= 0:
        raise ValueError("solve_anm requires tau > 0")
    sol = _solve_regularized(y_avg, None, tau, math.inf, opts, "anm", init)
    sol.e_d = 0.0
    return sol


def _with_zero_gamma(sol, L):
    sol.gamma = np.zeros(L, complex)
    return sol


def solve_p2(y_avg, D, tau, e_d, opts: SolverOptions = SolverOptions(), init=None,
             lam_min=1e-8, rel_tol=0.01, max_evals=60):
    """Energy-constrained HALS (``||gamma||^2 <= e_d``) by a bracketed search on ``lam``.

    ``||gamma(lam)||^2`` is nonincreasing in ``lam``; the search stops when it
    matches ``e_d`` within ``rel_tol`` or keeps the feasible end of the bracket.
    """
    if tau <= 0:
        raise ValueError("solve_p2 requires tau > 0")
    if e_d < 0:
        raise ValueError("e_d must be nonnegative")
    L = D.shape[1]
    if e_d == 0 or L == 0:
        sol = solve_anm(y_avg, tau, opts, init=init if init is not None and init.problem == "anm" else None)
        sol = _with_zero_gamma(sol, L)
        sol.problem, sol.e_d, sol.lam = "p2", e_d, math.inf
        return sol
    y_n, s = _normalize(y_avg)
    lam_scale = float(np.linalg.norm(D, 2) ** 2)
    trajectory = []

    def run(lam, warm):
        sol = solve_p1(y_avg, D, Hyperparams(tau, lam, e_d), opts, init=warm)
        trajectory.append((lam, sol.gamma_energy))
        return sol

    lo = lam_min * lam_scale
    sol_lo = run(lo, init)
    if sol_lo.gamma_energy <= e_d * (1 + rel_tol):
        sol_lo.problem = "p2"
        return sol_lo
    # ||gamma|| <= sqrt(L) tau / lam gives a feasible upper end
    hi = max(math.sqrt(L / e_d) * tau, lo * 2)
    sol_hi = run(hi, sol_lo)
    n_evals = 2
    while sol_hi.gamma_energy > e_d and n_evals < max_evals:
        lo, sol_lo = hi, sol_hi
        hi *= 4
        sol_hi = run(hi, sol_hi)
        n_evals += 1
    if sol_hi.gamma_energy > e_d * (1 + rel_tol):
        raise SolverError(f"could not bracket e_d={e_d}: trajectory {trajectory}")
    best = sol_hi
    if abs(sol_hi.gamma_energy - e_d) <= rel_tol * e_d:
        best.problem = "p2"
        return best
    # bisection in log(lam) with a secant-style interior point
    f_lo = math.log(sol_lo.gamma_energy / e_d)
    f_hi = math.log(max(sol_hi.gamma_energy, 1e-300) / e_d)
    warm = sol_hi
    while n_evals < max_evals:
        a, b = math.log(lo), math.log(hi)
        if math.isfinite(f_hi) and f_lo != f_hi:
            x = (a * f_hi - b * f_lo) / (f_hi - f_lo)
            x = min(max(x, a + 0.1 * (b - a)), b - 0.1 * (b - a))
        else:
            x = 0.5 * (a + b)
        lam = math.exp(x)
        sol = run(lam, warm)
        n_evals += 1
        warm = sol
        e = sol.gamma_energy
        if abs(e - e_d) <= rel_tol * e_d:
            best = sol
            break
        if e > e_d:
            lo, f_lo = lam, math.log(e / e_d)
        else:
            hi, f_hi, best = lam, math.log(max(e, 1e-300) / e_d), sol
        if (hi - lo) <= 1e-12 * hi:
            break
    else:
        log.warning("solve_p2 stopped after %d evaluations; trajectory %s", n_evals, trajectory)
    best.problem = "p2"
    best.e_d = e_d
    return best


# ----------------------------------------------------------------------------
# noiseless demixing


def _p0_certificate(f, c, D, N):
    """Least-norm ``z`` with ``D^H z = 0``, ``a_i^H z = sign(c_i)``, ``(Lambda a_i)^H z = 0``."""
    A = steering_matrix(f, N)
    LA = A * (2j * np.pi * subcarrier_offsets(N))[:, None]
    C = np.hstack([A, LA, D])
    d = np.concatenate([c / np.abs(c), np.zeros(len(f)), np.zeros(D.shape[1])])
    coef, *_ = np.linalg.lstsq(C.conj().T @ C, d, rcond=None)
    return C @ coef


def _varpro_frequencies(y, D, f0):
    N = len(y)

    def resid(fv):
        B = np.hstack([steering_matrix(fv, N), D])
        coef, *_ = np.linalg.lstsq(B, y, rcond=None)
        r = y - B @ coef
        return np.concatenate([r.real, r.imag])

    if len(f0) == 0:
        return f0
    out = optimize.least_squares(resid, f0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    return canonical_freq(out.x)


def solve_p0(y_avg, D, opts: SolverOptions = SolverOptions()):
    """Noiseless demixing ``min_gamma ||y - D gamma||_A`` (equality-constrained SDP).

    The ADMM iterate supplies the support; a variable-projection fit then
    recovers the exact decomposition ``y = A_f c + D gamma`` and a
    least-norm dual certificate is checked against the unit dual-norm bound.
    """
    y0 = np.asarray(y_avg, dtype=complex)
    N = len(y0)
    y, s = _normalize(y0)
    ridge = RidgeOperator(D)
    if not np.any(y):
        sol = _finish(y, D, ridge, 0.0, 0.0, np.zeros(0), np.zeros(0, complex), 0.0, 0, True, "p0")
        sol.gamma = np.zeros(D.shape[1], complex)
        return _rescale(sol, s)
    if not opts.polish:
        res = _admm(y, ridge, 1.0, 0.0, "p0", opts)
        sol = _admm_only_solution(y, D, ridge, 0.0, math.inf, res, "p0")
        sol.certificate = -2.0 * res["Lam"][:N, N]
        return _rescale(sol, s)
    # the polish only needs the support from ADMM: start loose, tighten if uncertified
    stages = [replace(opts, eps_abs=max(opts.eps_abs, e), eps_rel=max(opts.eps_rel, 10 * e))
              for e in (1e-5, 1e-6)] + [opts]
    state, iters = None, 0
    for stage in stages:
        res = _admm(y, ridge, 1.0, 0.0, "p0", stage, state)
        iters += res["iters"]
        state = {k: res[k] for k in ("Z", "Lam", "rho")}
        sol = _p0_polish(y, D, ridge, res, N, opts)
        if sol.converged:
            break
    sol.iters = iters
    return _rescale(sol, s)


def _p0_polish(y, D, ridge, res, N, opts):
    z_dual = -2.0 * res["Lam"][:N, N]
    f0 = _support_candidates(z_dual, 1.0, N, opts.grid_size)
    if len(f0) == 0:
        f, c = np.zeros(0), np.zeros(0, complex)
        gamma = ridge.solve(y, 0.0)
    else:
        f = _varpro_frequencies(y, D, f0)
        B = np.hstack([steering_matrix(f, N), D])
        coef, *_ = np.linalg.lstsq(B, y, rcond=None)
        c, gamma = coef[:len(f)], coef[len(f):]
        keep = np.abs(c) > 1e-9 * np.abs(c).max()
        if not keep.all():
            f = _varpro_frequencies(y, D, f[keep])
            B = np.hstack([steering_matrix(f, N), D])
            coef, *_ = np.linalg.lstsq(B, y, rcond=None)
            c, gamma = coef[:len(f)], coef[len(f):]
    h_s = steering_matrix(f, N) @ c if len(f) else np.zeros(N, complex)
    z = y - h_s - D @ gamma
    t, iota = _sdp_from_decomposition(f, c, N)
    cert = _p0_certificate(f, c, D, N) if len(f) else np.zeros(N, complex)
    cert_norm = dual_atomic_norm(cert, opts.grid_size) if len(f) else 0.0
    fit_ok = np.linalg.norm(z) <= 1e-8 * np.linalg.norm(y)
    av = 0.5 * (t + iota[0].real)
    sol = HalsSolution(
        h_s=h_s, gamma=gamma, t=t, iota=iota, z=z,
        primal_obj=av, dual_obj=float(np.vdot(y, cert).real) if len(f) else 0.0,
        gap=0.0, iters=res["iters"], converged=bool(fit_ok and cert_norm <= 1 + 1e-6),
        tau=0.0, lam=0.0, problem="p0", freqs=f, coeffs=c,
        admm_value=0.5 * (res["t"] + float(np.real(res["u"][0]))),
        admm_converged=res["converged"], dual_norm=cert_norm, certificate=cert,
    )
    sol.gap = sol.primal_obj - sol.dual_obj
    return sol


# ----------------------------------------------------------------------------
# tau tuning

PLATEAU_PROBES = 3


TUNE_TARGETS = ("estimate", "kept")


def _sparse_count(sol):
    return int(np.count_nonzero(np.abs(sol.coeffs) > 0)) if len(sol.coeffs) else int(np.any(sol.h_s))


def tune_tau(y_avg, D, target_m, e_d, opts: SolverOptions = SolverOptions(), sigma=None,
             tau0=None, factor=1.5, max_probes=20, estimator="p2", lam=None, target="estimate",
             bisect_steps=4):
    """Geometric search on ``tau`` for a sparse estimate with ``target_m`` spikes.

    ``target="estimate"`` counts the spikes of the (debiased) sparse estimate,
    ``target="kept"`` counts those surviving the ``max |gamma|`` threshold.
    The search walks from ``tau0`` (default ``sigma sqrt(N log N)``) by
    ``factor`` towards the target, refines a bracketing pair by bisection in
    ``log tau`` and breaks ties by the residual norm.

    Returns ``(Hyperparams, HalsSolution, info)``; ``info["hit"]`` is False
    when no probe produced exactly ``target_m`` spikes.
    """
    from .postprocess import support_and_debias

    y_avg = np.asarray(y_avg, dtype=complex)
    N = len(y_avg)
    anm = estimator == "anm" or (estimator == "p2" and e_d == 0)
    if estimator == "p1" and (lam is None or lam <= 0):
        raise ValueError("estimator 'p1' needs lam > 0")
    if target not in TUNE_TARGETS:
        raise ValueError(f"target must be one of {TUNE_TARGETS}")

    def solve(tau, warm):
        if anm:
            return solve_anm(y_avg, tau, opts, init=warm)
        if estimator == "p1":
            return solve_p1(y_avg, D, Hyperparams(tau, lam, e_d), opts, init=warm)
        return solve_p2(y_avg, D, tau, e_d, opts, init=warm)

    if target_m == 0:
        if anm:
            tau = dual_atomic_norm(y_avg) * 1.01 + 1e-300
            sol = solve_anm(y_avg, tau, opts)
        else:
            gamma = RidgeOperator(D).solve(y_avg, 1e-8 * float(np.linalg.norm(D, 2) ** 2))
            tau = dual_atomic_norm(y_avg - D @ gamma) * 1.01 + 1e-300
            sol = solve(tau, None)
        probes = [(tau, _sparse_count(sol))]
        # the diffuse fit at the chosen lam can leave a larger residual; raise tau until empty
        while probes[-1][1] and len(probes) < max_probes:
            tau *= factor
            sol = solve(tau, None)
            probes.append((tau, _sparse_count(sol)))
        info = dict(hit=probes[-1][1] == 0, probes=probes, monotone=True)
        return Hyperparams(tau, sol.lam, e_d), sol, info
    if tau0 is None:
        if sigma is None:
            raise ValueError("tune_tau needs sigma or tau0")
        tau0 = max(sigma * math.sqrt(N * math.log(N)), 1e-12 * np.linalg.norm(y_avg))

    probes = []

    def probe(tau, warm):
        sol = solve(tau, warm)
        est = support_and_debias(sol, y_avg, None if anm else D)
        count = est.est_count if target == "estimate" else est.kept_count
        probes.append((tau, count, float(np.linalg.norm(sol.z)), sol))
        return count, sol

    tau, warm, direction, stall = tau0, None, 0, 0
    bracket = None
    while len(probes) < max_probes:
        count, warm = probe(tau, warm)
        if count == target_m:
            break
        step = 1 if count > target_m else -1
        if direction and step != direction:
            bracket = (probes[-2], probes[-1])
            break
        # a count stuck below target while tau falls: lowering further only adds noise atoms
        stall = stall + 1 if len(probes) > 1 and count == probes[-2][1] else 0
        if step < 0 and stall >= PLATEAU_PROBES - 1:
            log.info("support size stalled at %d; stopping tau search", count)
            break
        direction = step
        tau = tau * factor if step > 0 else tau / factor
    if bracket is not None:
        lo, hi = sorted(bracket, key=lambda p: p[0])   # lo: too many spikes, hi: too few
        for _ in range(bisect_steps):
            if len(probes) >= max_probes + bisect_steps:
                break
            tau = math.sqrt(lo[0] * hi[0])
            count, _ = probe(tau, lo[3])
            if count == target_m:
                break
            if count > target_m:
                lo = probes[-1]
            else:
                hi = probes[-1]
    ordered = sorted(probes, key=lambda p: p[0])
    sizes = [p[1] for p in ordered]
    monotone = all(a >= b for a, b in zip(sizes, sizes[1:]))
    if not monotone:
        log.info("support size not monotone in tau: %s", sizes)
    best = min(probes, key=lambda p: (abs(p[1] - target_m), p[2]))
    info = dict(hit=best[1] == target_m, probes=[(p[0], p[1]) for p in probes], monotone=monotone)
    sol = best[3]
    return Hyperparams(best[0], sol.lam if math.isfinite(sol.lam) else math.inf, e_d), sol, info
