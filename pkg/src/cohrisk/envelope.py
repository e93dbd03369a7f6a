"""Coherent risk measures described by their risk envelopes.

An envelope is the feasible set of reweighting densities ``xi`` (with
``sum P xi = 1``) written as affine equalities ``g(x, p) = 0`` and convex
inequalities ``f(x, p) <= 0``.  The decision vector ``x`` starts with ``xi``
(one entry per atom) and may carry auxiliary variables after it; the
mean-semideviation envelope uses this for its unit-ball variable.

All callbacks work on the restricted problem: ``p`` is the probability vector
over atoms with positive mass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .probspace import FiniteDist

QUANTILE_EPS = 1e-12


@dataclass
class SaddlePoint:
    """Primal optimizer and KKT multipliers of the envelope Lagrangian.

    ``xi`` is indexed by the full outcome set (zero off the support); ``x``,
    ``lam_e`` and ``lam_i`` refer to the restricted program over ``support``.
    """

    xi: np.ndarray
    lam_p: float
    lam_e: np.ndarray
    lam_i: np.ndarray
    objective: float
    support: np.ndarray
    x: np.ndarray

    @property
    def xi_support(self) -> np.ndarray:
        return self.x[: self.support.size]


class RiskEnvelope:
    """Base class; subclasses fill in the constraint callbacks."""

    name = "envelope"
    has_analytic = False

    def params(self) -> dict:
        return {}

    def n_vars(self, n: int) -> int:
        return n

    def n_eq(self, n: int) -> int:
        return 0

    def n_ineq(self, n: int) -> int:
        return 0

    def g(self, x, p) -> np.ndarray:
        return np.zeros(0)

    def g_jac(self, x, p) -> np.ndarray:
        return np.zeros((0, self.n_vars(p.size)))

    def f(self, x, p) -> np.ndarray:
        return np.zeros(0)

    def f_jac(self, x, p) -> np.ndarray:
        return np.zeros((0, self.n_vars(p.size)))

    def g_vjp(self, x, p, v) -> np.ndarray:
        """g_jac(x, p).T @ v; built-ins override this to avoid dense matrices."""
        return self.g_jac(x, p).T @ v

    def f_vjp(self, x, p, v) -> np.ndarray:
        return self.f_jac(x, p).T @ v

    def f_hess(self, x, p, w) -> np.ndarray:
        """sum_i w_i * Hessian of f_i in x."""
        nv = self.n_vars(p.size)
        return np.zeros((nv, nv))

    def dg_dp(self, x, p) -> np.ndarray:
        return np.zeros((self.n_eq(p.size), p.size))

    def df_dp(self, x, p) -> np.ndarray:
        return np.zeros((self.n_ineq(p.size), p.size))

    def lam_dg_dp(self, x, p, lam_e) -> np.ndarray:
        """sum_e lam_e * dg_e/dp, one entry per atom."""
        return np.asarray(lam_e, float) @ self.dg_dp(x, p)

    def lam_df_dp(self, x, p, lam_i) -> np.ndarray:
        return np.asarray(lam_i, float) @ self.df_dp(x, p)

    def p_derivative_bound(self, p) -> float:
        """Advertised bound M on |dg/dp| and |df/dp|."""
        return 0.0

    def strictly_feasible(self, p) -> np.ndarray:
        raise NotImplementedError

    def xi_upper_bound(self, p) -> float:
        """Largest density value any member of the envelope can take."""
        return math.inf

    def analytic_saddle(self, p, z) -> SaddlePoint | None:
        return None

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


def _restricted_saddle(xi_r, x, lam_p, lam_e, lam_i, obj, idx, n_full) -> SaddlePoint:
    xi = np.zeros(n_full)
    xi[idx] = xi_r
    return SaddlePoint(xi, float(lam_p), np.asarray(lam_e, float), np.asarray(lam_i, float),
                       float(obj), np.asarray(idx), np.asarray(x, float))


class ExpectationEnvelope(RiskEnvelope):
    """U = {xi = 1}; rho is the plain expectation."""

    name = "expectation"
    has_analytic = True

    def n_eq(self, n):
        return n

    def g(self, x, p):
        return x[: p.size] - 1.0

    def g_jac(self, x, p):
        return np.eye(p.size)

    def g_vjp(self, x, p, v):
        return np.asarray(v, float).copy()

    def lam_dg_dp(self, x, p, lam_e):
        return np.zeros(p.size)

    def strictly_feasible(self, p):
        return np.ones(p.size)

    def xi_upper_bound(self, p):
        return 1.0

    def analytic_saddle(self, p, z):
        ez = float(p @ z)
        xi = np.ones(p.size)
        # the equalities imply normalisation, so lam_p = 0 (see saddle.py)
        return _restricted_saddle(xi, xi, 0.0, p * z, np.zeros(0), ez, np.arange(p.size), p.size)


class CVaREnvelope(RiskEnvelope):
    """Box 0 <= xi <= 1/alpha.  For alpha = 1 the box collapses to xi = 1,
    which is stored as equalities so the program keeps an interior."""

    name = "cvar"
    has_analytic = True

    def __init__(self, alpha: float):
        if not (0 < alpha <= 1):
            raise ValueError(f"CVaR level must lie in (0, 1], got {alpha}")
        self.alpha = float(alpha)
        self._degenerate = alpha == 1.0

    def params(self):
        return {"alpha": self.alpha}

    def n_eq(self, n):
        return n if self._degenerate else 0

    def n_ineq(self, n):
        return 0 if self._degenerate else 2 * n

    def g(self, x, p):
        return x[: p.size] - 1.0 if self._degenerate else np.zeros(0)

    def g_jac(self, x, p):
        return np.eye(p.size) if self._degenerate else np.zeros((0, p.size))

    def f(self, x, p):
        if self._degenerate:
            return np.zeros(0)
        xi = x[: p.size]
        return np.concatenate([xi - 1.0 / self.alpha, -xi])

    def f_jac(self, x, p):
        if self._degenerate:
            return np.zeros((0, p.size))
        eye = np.eye(p.size)
        return np.vstack([eye, -eye])

    def g_vjp(self, x, p, v):
        return np.asarray(v, float).copy() if self._degenerate else np.zeros(p.size)

    def f_vjp(self, x, p, v):
        if self._degenerate:
            return np.zeros(p.size)
        return v[: p.size] - v[p.size:]

    def lam_dg_dp(self, x, p, lam_e):
        return np.zeros(p.size)

    def lam_df_dp(self, x, p, lam_i):
        return np.zeros(p.size)

    def strictly_feasible(self, p):
        return np.ones(p.size)

    def xi_upper_bound(self, p):
        return 1.0 / self.alpha

    def analytic_saddle(self, p, z):
        return analytic_saddle_cvar(FiniteDist(p), z, self.alpha)


class MeanSemiDeviationEnvelope(RiskEnvelope):
    """xi = 1 + c*eta - c*E[eta] with E[eta^2] <= 1, eta >= 0.

    Variables are ``x = (xi, eta)``; equalities ``g_w = xi_w - 1 - c eta_w +
    c sum_v p_v eta_v``; inequalities ``f_0 = sum p eta^2 - 1`` and
    ``f_w = -eta_w``.
    """

    name = "msd"
    has_analytic = True

    def __init__(self, alpha: float):
        if not (0 <= alpha <= 1):
            raise ValueError(f"semideviation weight must lie in [0, 1], got {alpha}")
        self.alpha = float(alpha)

    def params(self):
        return {"alpha": self.alpha}

    def n_vars(self, n):
        return 2 * n

    def n_eq(self, n):
        return n

    def n_ineq(self, n):
        return n + 1

    def g(self, x, p):
        n, c = p.size, self.alpha
        xi, eta = x[:n], x[n:]
        return xi - 1.0 - c * eta + c * (p @ eta)

    def g_jac(self, x, p):
        n, c = p.size, self.alpha
        return np.hstack([np.eye(n), -c * np.eye(n) + c * p[None, :]])

    def f(self, x, p):
        eta = x[p.size:]
        return np.concatenate([[p @ eta**2 - 1.0], -eta])

    def f_jac(self, x, p):
        n = p.size
        eta = x[n:]
        jac = np.zeros((n + 1, 2 * n))
        jac[0, n:] = 2 * p * eta
        jac[1:, n:] = -np.eye(n)
        return jac

    def g_vjp(self, x, p, v):
        c = self.alpha
        return np.concatenate([v, -c * v + c * p * v.sum()])

    def f_vjp(self, x, p, v):
        eta = x[p.size:]
        return np.concatenate([np.zeros(p.size), 2 * p * eta * v[0] - v[1:]])

    def f_hess(self, x, p, w):
        n = p.size
        hess = np.zeros((2 * n, 2 * n))
        hess[n:, n:] = np.diag(2 * w[0] * p)
        return hess

    def dg_dp(self, x, p):
        eta = x[p.size:]
        return np.tile(self.alpha * eta, (p.size, 1))

    def df_dp(self, x, p):
        eta = x[p.size:]
        out = np.zeros((p.size + 1, p.size))
        out[0] = eta**2
        return out

    def lam_dg_dp(self, x, p, lam_e):
        return self.alpha * x[p.size:] * float(np.sum(lam_e))

    def lam_df_dp(self, x, p, lam_i):
        return lam_i[0] * x[p.size:] ** 2

    def p_derivative_bound(self, p):
        # feasible eta satisfies eta_w <= 1/sqrt(p_w)
        emax = 1.0 / math.sqrt(float(np.min(p)))
        return max(self.alpha * emax, emax**2)

    def strictly_feasible(self, p):
        return np.concatenate([np.ones(p.size), np.full(p.size, 0.5)])

    def xi_upper_bound(self, p):
        return 1.0 + self.alpha / math.sqrt(float(np.min(p)))

    def analytic_saddle(self, p, z):
        return analytic_saddle_msd(FiniteDist(p), z, self.alpha)


class CustomEnvelope(RiskEnvelope):
    """Envelope assembled from user callbacks; the extension point for risk
    measures without a built-in (e.g. spectral measures).

    ``g`` must be affine and ``f`` convex in ``x``; use
    :func:`check_affine_convex` to test a construction.
    """

    name = "custom"

    def __init__(self, *, n_vars: Callable[[int], int] | None = None,
                 n_eq: Callable[[int], int] = lambda n: 0,
                 n_ineq: Callable[[int], int] = lambda n: 0,
                 g=None, g_jac=None, f=None, f_jac=None, f_hess=None,
                 dg_dp=None, df_dp=None, strictly_feasible=None,
                 xi_upper_bound=None, p_derivative_bound: float = 0.0):
        self._n_vars = n_vars or (lambda n: n)
        self._n_eq, self._n_ineq = n_eq, n_ineq
        self._g, self._g_jac, self._f, self._f_jac, self._f_hess = g, g_jac, f, f_jac, f_hess
        self._dg_dp, self._df_dp = dg_dp, df_dp
        self._feasible = strictly_feasible
        self._ub = xi_upper_bound
        self._M = p_derivative_bound

    def n_vars(self, n):
        return self._n_vars(n)

    def n_eq(self, n):
        return self._n_eq(n)

    def n_ineq(self, n):
        return self._n_ineq(n)

    def g(self, x, p):
        return super().g(x, p) if self._g is None else np.asarray(self._g(x, p), float)

    def g_jac(self, x, p):
        return super().g_jac(x, p) if self._g_jac is None else np.asarray(self._g_jac(x, p), float)

    def f(self, x, p):
        return super().f(x, p) if self._f is None else np.asarray(self._f(x, p), float)

    def f_jac(self, x, p):
        return super().f_jac(x, p) if self._f_jac is None else np.asarray(self._f_jac(x, p), float)

    def f_hess(self, x, p, w):
        return super().f_hess(x, p, w) if self._f_hess is None else np.asarray(self._f_hess(x, p, w), float)

    def dg_dp(self, x, p):
        return super().dg_dp(x, p) if self._dg_dp is None else np.asarray(self._dg_dp(x, p), float)

    def df_dp(self, x, p):
        return super().df_dp(x, p) if self._df_dp is None else np.asarray(self._df_dp(x, p), float)

    def p_derivative_bound(self, p):
        return self._M

    def strictly_feasible(self, p):
        if self._feasible is None:
            return np.concatenate([np.ones(p.size), np.zeros(self.n_vars(p.size) - p.size)])
        return np.asarray(self._feasible(p), float)

    def xi_upper_bound(self, p):
        return math.inf if self._ub is None else float(self._ub(p))


def make_expectation() -> ExpectationEnvelope:
    return ExpectationEnvelope()


def make_cvar(alpha: float) -> CVaREnvelope:
    return CVaREnvelope(alpha)


def make_msd(alpha: float) -> MeanSemiDeviationEnvelope:
    return MeanSemiDeviationEnvelope(alpha)


def envelope_from_spec(spec: dict) -> RiskEnvelope:
    """Build a built-in envelope from ``{"risk": name, "params": {...}}``."""
    name = spec.get("risk")
    params = spec.get("params") or {}
    if name == "expectation":
        return make_expectation()
    if name == "cvar":
        return make_cvar(params.get("alpha", 0.05))
    if name == "msd":
        return make_msd(params.get("alpha", 1.0))
    raise ValueError(f"unknown envelope {name!r}")


def cvar_quantile(p, z, alpha: float) -> float:
    """Smallest (1-alpha)-quantile: min z with P(Z <= z) >= 1 - alpha."""
    order = np.argsort(z, kind="stable")
    cum = np.cumsum(np.asarray(p)[order])
    k = int(np.searchsorted(cum, 1.0 - alpha - QUANTILE_EPS, side="left"))
    return float(np.asarray(z)[order][min(k, len(order) - 1)])


def analytic_saddle_cvar(dist: FiniteDist, z, alpha: float) -> SaddlePoint:
    """Closed-form CVaR saddle: 1/alpha strictly above the quantile, 0 below,
    and the remaining mass spread evenly over the quantile atoms."""
    if not (0 < alpha <= 1):
        raise ValueError(f"CVaR level must lie in (0, 1], got {alpha}")
    idx, p, _ = dist.restrict()
    z = np.asarray(z, dtype=float)[idx]
    q = cvar_quantile(p, z, alpha)
    above, at = z > q, z == q
    xi = np.where(above, 1.0 / alpha, 0.0)
    rest = 1.0 - p[above].sum() / alpha
    xi[at] = rest / p[at].sum()
    objective = float(np.sum(p * xi * z))
    if alpha == 1.0:
        xi = np.ones(p.size)
        return _restricted_saddle(xi, xi, 0.0, p * z, np.zeros(0), float(p @ z), idx, dist.size)
    lam_up = p * np.maximum(z - q, 0.0)
    lam_low = p * np.maximum(q - z, 0.0)
    return _restricted_saddle(xi, xi, q, np.zeros(0), np.concatenate([lam_up, lam_low]),
                              objective, idx, dist.size)


def analytic_saddle_msd(dist: FiniteDist, z, alpha: float) -> SaddlePoint:
    idx, p, _ = dist.restrict()
    z = np.asarray(z, dtype=float)[idx]
    c = alpha
    ez = float(p @ z)
    dev = np.maximum(z - ez, 0.0)
    sd = math.sqrt(float(p @ dev**2))
    # a constant cost has no contact point; the envelope collapses to xi = 1
    eta = dev / sd if sd > 0 else np.zeros(p.size)
    xi = 1.0 + c * eta - c * float(p @ eta)
    lam_e = p * z
    lam_i = np.concatenate([[c * sd / 2.0], c * p * np.maximum(ez - z, 0.0)])
    return _restricted_saddle(xi, np.concatenate([xi, eta]), 0.0, lam_e, lam_i,
                              ez + c * sd, idx, dist.size)


def evaluate_risk(env: RiskEnvelope, dist: FiniteDist, z, solver_opts: dict | None = None):
    """Return ``(rho, saddle)``; closed form when available, else the solver."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != dist.size:
        raise ValueError("cost vector and distribution differ in length")
    if env.has_analytic and not (solver_opts or {}).get("force_numeric"):
        _, p, _ = dist.restrict()
        sp = env.analytic_saddle(p, z[dist.support])
        # re-embed into the full outcome set
        sp.xi = np.zeros(dist.size)
        sp.xi[dist.support] = sp.xi_support
        sp.support = dist.support
        return sp.objective, sp
    from .saddle import EnvelopeProgram, solve_envelope_program

    opts = {k: v for k, v in (solver_opts or {}).items() if k != "force_numeric"}
    report = solve_envelope_program(EnvelopeProgram(dist, z, env, **opts))
    return report.sp.objective, report.sp


def risk_value(env: RiskEnvelope, p, z) -> float:
    """Convenience wrapper returning only rho."""
    return evaluate_risk(env, FiniteDist(p), z)[0]


def check_affine_convex(env: RiskEnvelope, p, n_trials: int = 20, seed=0,
                        tol: float = 1e-10) -> dict:
    """Randomised affinity check of ``g`` and midpoint convexity check of ``f``.

    Returns the largest violations seen.
    """
    rng = np.random.default_rng(seed)
    p = np.asarray(p, float)
    nv = env.n_vars(p.size)
    aff, cvx = 0.0, 0.0
    for _ in range(n_trials):
        x1, x2 = rng.uniform(0, 3, nv), rng.uniform(0, 3, nv)
        a = rng.uniform()
        mix = a * x1 + (1 - a) * x2
        if env.n_eq(p.size):
            aff = max(aff, float(np.max(np.abs(env.g(mix, p) - a * env.g(x1, p) - (1 - a) * env.g(x2, p)))))
        if env.n_ineq(p.size):
            mid = env.f(0.5 * (x1 + x2), p)
            cvx = max(cvx, float(np.max(mid - 0.5 * (env.f(x1, p) + env.f(x2, p)))))
    xbar = env.strictly_feasible(p)
    margin = float(-np.max(env.f(xbar, p))) if env.n_ineq(p.size) else math.inf
    return {"affinity": aff, "convexity": max(cvx, 0.0), "slater_margin": margin,
            "ok": aff <= tol and cvx <= tol and margin > 0}
