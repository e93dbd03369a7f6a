"""Interior-point solver for the (sample) envelope program.

    maximize   sum_w P(w) xi(w) Z(w) - reg * sum_w (P(w) xi(w))^2
    subject to sum_w P(w) xi(w) = 1,  g(x, P) = 0,  f(x, P) <= 0

A primal-dual interior-point method follows the log-barrier central path
and carries the multipliers as iterates.  Multiplier conventions:

* if the envelope equalities already imply normalisation, the normalisation
  row is dropped and ``lam_p`` is reported as 0;
* otherwise, among all optimal multipliers the one with the smallest
  ``lam_p`` is reported, which for CVaR is the smallest (1 - alpha)-quantile.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .envelope import RiskEnvelope, SaddlePoint
from .probspace import FiniteDist

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class InfeasibleError(SolverError):
    pass


class NotConvergedError(SolverError):
    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


@dataclass
class EnvelopeProgram:
    dist: FiniteDist
    z: np.ndarray
    env: RiskEnvelope
    reg: float = 0.0
    tol: float = 1e-8
    max_iter: int = 200
    mu: float = 10.0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        if self.z.size != self.dist.size:
            raise ValueError("cost vector and distribution differ in length")
        if self.reg < 0:
            raise ValueError("regularisation must be non-negative")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.mu <= 1:
            raise ValueError("barrier growth factor must exceed 1")


@dataclass
class KKTReport:
    primal: float
    dual: float
    complementarity: float
    stationarity: float

    @property
    def max(self) -> float:
        return max(self.primal, self.dual, self.complementarity, self.stationarity)


@dataclass
class SolveReport:
    sp: SaddlePoint
    iterations: int
    kkt_residual: float
    barrier_path: list = field(default_factory=list)
    kkt: KKTReport | None = None


def _independent_rows(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Indices of a maximal set of linearly independent rows, greedily in order."""
    keep: list[int] = []
    basis = np.zeros((0, a.shape[1]))
    for i, row in enumerate(a):
        if basis.shape[0]:
            coef, *_ = np.linalg.lstsq(basis.T, row, rcond=None)
            resid = row - basis.T @ coef
        else:
            resid = row
        if np.linalg.norm(resid) > tol * max(1.0, np.linalg.norm(row)):
            keep.append(i)
            basis = np.vstack([basis, row])
    return np.array(keep, dtype=int)


class _Problem:
    """Restricted program data in minimisation form: phi(x) = -obj(x)."""

    def __init__(self, prog: EnvelopeProgram):
        self.env = prog.env
        self.idx, self.p, _ = prog.dist.restrict()
        self.z = prog.z[self.idx]
        self.n = self.p.size
        self.nv = self.env.n_vars(self.n)
        self.reg = prog.reg
        self.c = np.zeros(self.nv)
        self.c[: self.n] = -self.p * self.z
        norm_row = np.zeros(self.nv)
        norm_row[: self.n] = self.p
        g0 = self.env.g(np.zeros(self.nv), self.p)
        # envelope equalities first: when they already imply normalisation the
        # normalisation row is dropped and its multiplier lam_p is reported as 0
        a_full = np.vstack([self.env.g_jac(np.zeros(self.nv), self.p), norm_row[None, :]])
        b_full = np.concatenate([-g0, [1.0]])
        self.rows = _independent_rows(a_full)
        self.n_g = g0.size
        self.a, self.b = a_full[self.rows], b_full[self.rows]
        pos = np.flatnonzero(self.rows == self.n_g)
        self.norm_pos = int(pos[0]) if pos.size else None
        self.m = self.env.n_ineq(self.n)

    def phi(self, x):
        xi = x[: self.n]
        return float(self.c @ x + self.reg * np.sum((self.p * xi) ** 2))

    def phi_grad(self, x):
        g = self.c.copy()
        g[: self.n] += 2 * self.reg * self.p**2 * x[: self.n]
        return g

    def phi_hess(self):
        h = np.zeros((self.nv, self.nv))
        h[: self.n, : self.n] = np.diag(2 * self.reg * self.p**2)
        return h

    def f(self, x):
        return self.env.f(x, self.p)


def _kkt_solve(h, a, rhs_x, rhs_y):
    """Solve [h a'; a 0] [dx; dy] = [rhs_x; rhs_y].

    The system is equilibrated with a symmetric diagonal scaling first; the
    Hessians near the boundary span many orders of magnitude.
    """
    r = a.shape[0]
    d = 1.0 / np.sqrt(np.maximum(np.abs(np.diag(h)), 1.0))
    kkt = np.block([[h * d[:, None] * d[None, :], (a * d[None, :]).T],
                    [a * d[None, :], np.zeros((r, r))]])
    rhs = np.concatenate([rhs_x * d, rhs_y])
    try:
        sol = np.linalg.solve(kkt, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    nv = h.shape[0]
    return sol[:nv] * d, sol[nv:]


@dataclass
class _PDResult:
    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    iterations: int
    path: list


def _primal_dual(grad, hess, f, fjac, fhess, a, b, x, max_iter, tol, feas_tol, mu=10.0, stop=None):
    """Primal-dual interior-point iterations for min phi s.t. f <= 0, a x = b.

    ``x`` must satisfy f(x) < 0.  The barrier parameter is t = mu * m / gap
    with gap the surrogate duality gap.  ``stop(x)`` allows an early exit.
    """
    m = f(x).size
    fx = f(x)
    if m and np.any(fx >= 0):
        raise InfeasibleError("infeasible: start point is not strictly feasible")
    # start on the central path of t0 = m / scale, with scale ~ objective size
    scale = 1.0 + float(np.abs(grad(x)) @ np.abs(x)) if m else 1.0
    lam = scale / (m * -fx) if m else np.zeros(0)
    nu = np.zeros(a.shape[0])
    path = []

    def residuals(x, lam, nu, t):
        fx = f(x)
        rd = grad(x) + a.T @ nu
        rc = np.zeros(0)
        if m:
            rd = rd + fjac(x).T @ lam
            rc = -lam * fx - 1.0 / t
        return rd, rc, a @ x - b

    eta = 0.0
    rd = rp = np.zeros(1)
    for it in range(max_iter + 1):
        fx = f(x)
        eta = float(-fx @ lam) if m else 0.0
        t = mu * m / eta if eta > 0 else 1.0
        rd, rc, rp = residuals(x, lam, nu, t)
        path.append((t, eta))
        if stop is not None and stop(x):
            return _PDResult(x, lam, nu, it, path)
        if max(np.max(np.abs(rp), initial=0.0), np.max(np.abs(rd))) <= feas_tol and eta <= tol:
            return _PDResult(x, lam, nu, it, path)
        if it == max_iter:
            break
        h = hess(x)
        rhs_x = -rd
        if m:
            jf = fjac(x)
            h = h + fhess(x, lam) + (jf.T * (lam / -fx)) @ jf
            rhs_x = rhs_x + jf.T @ (rc / -fx)
        dx, dnu = _kkt_solve(h, a, rhs_x, -rp)
        s = 1.0
        dlam = np.zeros(0)
        if m:
            dlam = (rc - lam * (jf @ dx)) / fx
            neg = dlam < 0
            if np.any(neg):
                s = min(1.0, 0.99 * float(np.min(-lam[neg] / dlam[neg])))
            while np.any(f(x + s * dx) >= 0):
                s *= 0.5
                if s < 1e-16:
                    raise NotConvergedError("did not converge: line search failed")
        norm0 = np.linalg.norm(np.concatenate([rd, rc, rp]))
        while s > 1e-12:
            r1 = residuals(x + s * dx, lam + s * dlam, nu + s * dnu, t)
            if np.linalg.norm(np.concatenate(r1)) <= (1 - 0.01 * s) * norm0:
                break
            s *= 0.5
        x, lam, nu = x + s * dx, lam + s * dlam, nu + s * dnu
    raise NotConvergedError(
        f"did not converge: duality gap {eta:.3e} after {max_iter} Newton steps",
        {"duality_gap": eta, "dual_residual": float(np.max(np.abs(rd))),
         "primal_residual": float(np.max(np.abs(rp), initial=0.0)), "iterations": max_iter})


def _phase_one(pr: _Problem, x0, max_iter):
    """Find x with a x = b and f(x) < 0 by minimising the slack s in f(x) <= s."""
    nv = pr.nv
    if np.linalg.norm(pr.a @ x0 - pr.b) > 1e-9:
        x0 = np.linalg.lstsq(pr.a, pr.b, rcond=None)[0]
    y = np.concatenate([x0, [float(np.max(pr.f(x0))) + 1.0]])
    a_aug = np.hstack([pr.a, np.zeros((pr.a.shape[0], 1))])
    e = np.zeros(nv + 1)
    e[-1] = 1.0

    def fjac(y):
        j = pr.env.f_jac(y[:nv], pr.p)
        return np.hstack([j, -np.ones((j.shape[0], 1))])

    def fhess(y, w):
        h = np.zeros((nv + 1, nv + 1))
        h[:nv, :nv] = pr.env.f_hess(y[:nv], pr.p, w)
        return h

    # small proximal term keeps the linear phase-I objective well posed
    prox = 1e-8
    try:
        res = _primal_dual(lambda v: e + prox * v, lambda v: prox * np.eye(nv + 1),
                           lambda v: pr.f(v[:nv]) - v[-1], fjac, fhess, a_aug, pr.b, y,
                           max_iter, 1e-12, 1e-12, stop=lambda v: v[-1] < -1e-6)
    except NotConvergedError:
        res = None
    if res is None or res.x[-1] >= -1e-6:
        raise InfeasibleError("infeasible: no strictly feasible point for the envelope")
    return res.x[:nv], res.iterations


def _select_multipliers(pr: _Problem, x, lam_i, nu, tol):
    """Among KKT multipliers for the identified active set, pick min lam_p.

    Falls back to the interior-point multipliers when the selection LP fails
    or its answer violates the optimality conditions at ``x``.
    """
    if pr.m == 0:
        return lam_i, nu
    slack = -pr.f(x)
    active = lam_i > slack
    jf = pr.env.f_jac(x, pr.p)
    r = pr.a.shape[0]
    n_act = int(active.sum())
    if pr.norm_pos is None:
        return lam_i, nu
    cost = np.zeros(r + n_act)
    cost[pr.norm_pos] = 1.0
    res = linprog(cost, A_eq=np.hstack([pr.a.T, jf[active].T]), b_eq=-pr.phi_grad(x),
                  bounds=[(None, None)] * r + [(0, None)] * n_act, method="highs")
    if res.status != 0:
        return lam_i, nu
    nu_new = res.x[:r]
    lam_new = np.zeros(pr.m)
    lam_new[active] = res.x[r:]
    resid = pr.phi_grad(x) + pr.a.T @ nu_new + jf.T @ lam_new
    scale = 1.0 + np.max(np.abs(pr.c))
    if np.max(np.abs(resid)) > 1e-9 * scale or np.max(np.abs(lam_new * slack)) > tol:
        return lam_i, nu
    return lam_new, nu_new


def solve_envelope_program(prog: EnvelopeProgram) -> SolveReport:
    pr = _Problem(prog)
    env = pr.env
    x = env.strictly_feasible(pr.p).astype(float)
    if x.size != pr.nv:
        raise ValueError("strictly feasible point has the wrong dimension")
    used = 0
    off_plane = np.linalg.norm(pr.a @ x - pr.b) > 1e-9 * (1.0 + np.linalg.norm(pr.b))
    if pr.m and (off_plane or float(np.max(pr.f(x))) > -1e-8):
        log.debug("phase I from margin %.2e", -float(np.max(pr.f(x))))
        x, used = _phase_one(pr, x, prog.max_iter)

    scale = 1.0 + float(np.max(np.abs(pr.c)))
    res = _primal_dual(pr.phi_grad, lambda v: pr.phi_hess(), pr.f,
                       lambda v: env.f_jac(v, pr.p), lambda v, w: env.f_hess(v, pr.p, w),
                       pr.a, pr.b, x, prog.max_iter - used, prog.tol, 1e-11 * scale, mu=prog.mu)
    used += res.iterations
    x = res.x
    lam_i, nu = _select_multipliers(pr, x, res.lam, res.nu, prog.tol)

    lam_e = np.zeros(pr.n_g)
    is_g = pr.rows < pr.n_g
    lam_e[pr.rows[is_g]] = nu[is_g]
    lam_p = 0.0 if pr.norm_pos is None else float(nu[pr.norm_pos])
    xi = np.zeros(prog.dist.size)
    xi[pr.idx] = x[: pr.n]
    sp = SaddlePoint(xi, lam_p, lam_e, lam_i, -pr.phi(x), pr.idx, x)
    kkt = kkt_verify(env, prog.dist, prog.z, sp, reg=prog.reg)
    if kkt.max > 10 * prog.tol:
        raise NotConvergedError(f"did not converge: KKT residual {kkt.max:.3e}", kkt)
    return SolveReport(sp, used, kkt.max, res.path, kkt)


def kkt_verify(env: RiskEnvelope, dist: FiniteDist, z, sp: SaddlePoint, reg: float = 0.0) -> KKTReport:
    """Residuals of the Lagrangian optimality conditions at ``sp``.

    Stationarity is scaled by ``1 + max |P Z|``.
    """
    idx, p, _ = dist.restrict()
    if not np.array_equal(np.asarray(sp.support), idx):
        raise ValueError("saddle point support does not match the distribution")
    z = np.asarray(z, dtype=float)[idx]
    n = p.size
    x = np.asarray(sp.x, dtype=float)
    xi = x[:n]
    nv = env.n_vars(n)
    if x.size != nv:
        raise ValueError("saddle point dimension mismatch")
    g = env.g(x, p)
    f = env.f(x, p)
    primal = abs(float(p @ xi) - 1.0)
    if g.size:
        primal = max(primal, float(np.max(np.abs(g))))
    if f.size:
        primal = max(primal, float(np.max(f)), 0.0)
    lam_i = np.asarray(sp.lam_i, float)
    lam_e = np.asarray(sp.lam_e, float)
    dual = float(max(0.0, -np.min(lam_i))) if lam_i.size else 0.0
    comp = float(np.max(np.abs(lam_i * f))) if f.size else 0.0
    grad_obj = np.zeros(nv)
    grad_obj[:n] = p * z - 2 * reg * p**2 * xi
    norm_row = np.zeros(nv)
    norm_row[:n] = p
    stat = grad_obj - sp.lam_p * norm_row
    if g.size:
        stat = stat - env.g_vjp(x, p, lam_e)
    if f.size:
        stat = stat - env.f_vjp(x, p, lam_i)
    scale = 1.0 + float(np.max(np.abs(p * z)))
    return KKTReport(primal, dual, comp, float(np.max(np.abs(stat))) / scale)
