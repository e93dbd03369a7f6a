"""Markov coherent risk: Bellman operator, critics and policy gradients.

The value of a policy solves ``V(x) = C_theta(x) + rho_x(gamma V)`` where
``rho_x`` is the coherent risk under ``P_theta(. | x)`` and
``C_theta(x) = sum_a mu(a|x) C(x, a)``.  Per-state saddle points are always
taken for the discounted cost ``Z = gamma V``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .envelope import RiskEnvelope, SaddlePoint, evaluate_risk
from .mdp import Mdp, SoftmaxPolicy, Trajectory, expected_cost, induced_kernel, simulate_batch
from .probspace import FiniteDist, as_rng
from .saddle import SolverError
from .staticgrad import GradEstimate

log = logging.getLogger(__name__)


@dataclass
class ValueFn:
    """Tabular values, or linear weights ``v`` with a feature matrix ``phi``
    of shape (S, K)."""

    table: np.ndarray | None = None
    weights: np.ndarray | None = None
    phi: np.ndarray | None = None

    def __post_init__(self):
        if (self.table is None) == (self.weights is None):
            raise ValueError("give either a table or linear weights")
        if self.table is not None:
            self.table = np.asarray(self.table, dtype=float).reshape(-1)
        else:
            self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
            self.phi = np.asarray(self.phi, dtype=float)
            if self.phi.ndim != 2 or self.phi.shape[1] != self.weights.size:
                raise ValueError("feature matrix must have shape (S, len(weights))")

    @property
    def mode(self) -> str:
        return "tabular" if self.table is not None else "linear"

    def values(self) -> np.ndarray:
        return self.table if self.table is not None else self.phi @ self.weights

    def __call__(self, x):
        return self.values()[x]

    def to_dict(self) -> dict:
        if self.mode == "tabular":
            return {"mode": "tabular", "table": self.table.tolist()}
        return {"mode": "linear", "weights": self.weights.tolist(), "phi": self.phi.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ValueFn":
        if doc.get("mode", "tabular") == "tabular":
            return cls(table=doc["table"])
        return cls(weights=doc["weights"], phi=doc["phi"])


@dataclass
class StateSaddles:
    """Per-state saddle points for ``Z = gamma V`` under ``P_theta(. | x)``."""

    saddles: list[SaddlePoint]
    kernel: np.ndarray  # P_theta(y | x)
    gamma: float

    @property
    def xi_kernel(self) -> np.ndarray:
        """P_theta(y | x) xi_x(y): the worst-case transition kernel."""
        return self.kernel * np.stack([sp.xi for sp in self.saddles])

    def correction(self, x: int) -> np.ndarray:
        """sum_e lam_e dg_e/dp(y) + sum_i lam_i df_i/dp(y) for the saddle at x,
        over all next states y (zero off the support)."""
        return self._corr[x]

    def attach(self, env: RiskEnvelope) -> "StateSaddles":
        corr = np.zeros_like(self.kernel)
        for x, sp in enumerate(self.saddles):
            p = self.kernel[x, sp.support]
            c = np.zeros(p.size)
            if np.size(sp.lam_e):
                c += env.lam_dg_dp(sp.x, p, sp.lam_e)
            if np.size(sp.lam_i):
                c += env.lam_df_dp(sp.x, p, sp.lam_i)
            corr[x, sp.support] = c
        self._corr = corr
        return self


def state_saddles(mdp: Mdp, policy: SoftmaxPolicy, env: RiskEnvelope, values,
                  solver_opts: dict | None = None) -> tuple[np.ndarray, StateSaddles]:
    """rho_x(gamma V) and the saddle point for every state."""
    kernel = induced_kernel(mdp, policy)
    z = mdp.gamma * np.asarray(values, dtype=float)
    rhos = np.empty(mdp.n_states)
    sps = []
    for x in range(mdp.n_states):
        try:
            rhos[x], sp = evaluate_risk(env, FiniteDist(kernel[x]), z, solver_opts)
        except SolverError as e:
            raise type(e)(f"state {x}: {e}") from e
        sps.append(sp)
    return rhos, StateSaddles(sps, kernel, mdp.gamma).attach(env)


def bellman_apply(mdp: Mdp, policy: SoftmaxPolicy, env: RiskEnvelope, v,
                  solver_opts: dict | None = None) -> ValueFn:
    """T[V](x) = C_theta(x) + rho_x(gamma V)."""
    values = v.values() if isinstance(v, ValueFn) else np.asarray(v, dtype=float)
    rhos, _ = state_saddles(mdp, policy, env, values, solver_opts)
    return ValueFn(table=expected_cost(mdp, policy) + rhos)


def value_iteration_cap(mdp: Mdp, tol: float, margin: int = 50) -> int:
    cmax = max(mdp.c_max, 1e-300)
    return max(1, math.ceil(math.log(tol * (1 - mdp.gamma) / (2 * cmax)) / math.log(mdp.gamma))) + margin


def solve_value_exact(mdp: Mdp, policy: SoftmaxPolicy, env: RiskEnvelope, tol: float = 1e-10,
                      max_iter: int | None = None, v0=None,
                      solver_opts: dict | None = None) -> tuple[ValueFn, StateSaddles]:
    """Value iteration until ``|V_{k+1} - V_k| < tol (1 - gamma) / gamma``,
    then the per-state saddles at the converged values."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    cap = value_iteration_cap(mdp, tol) if max_iter is None else max_iter
    c = expected_cost(mdp, policy)
    v = np.zeros(mdp.n_states) if v0 is None else np.asarray(v0, dtype=float).copy()
    thresh = tol * (1 - mdp.gamma) / mdp.gamma
    for _ in range(cap):
        rhos, _ = state_saddles(mdp, policy, env, v, solver_opts)
        v_new = c + rhos
        done = np.max(np.abs(v_new - v)) < thresh
        v = v_new
        if done:
            break
    else:
        raise SolverError(f"value iteration did not converge in {cap} sweeps")
    _, saddles = state_saddles(mdp, policy, env, v, solver_opts)
    return ValueFn(table=v), saddles


def contraction_factor(env: RiskEnvelope, kernel_rows: np.ndarray, gamma: float) -> float:
    """gamma times the largest density the envelope allows on these rows."""
    bound = 0.0
    for row in kernel_rows:
        p = row[row > 0]
        bound = max(bound, env.xi_upper_bound(p))
    return gamma * bound


@dataclass
class PrsviResult:
    weights: np.ndarray
    iterations: int
    converged: bool
    history: list = field(default_factory=list)

    def value_fn(self, phi) -> ValueFn:
        return ValueFn(weights=self.weights, phi=phi)


def empirical_kernel(traj: Trajectory, n_states: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised transition counts and the number of transitions out of
    each state."""
    xs = np.asarray(traj.states).reshape(-1)
    counts = np.zeros((n_states, n_states))
    np.add.at(counts, (xs[:-1], xs[1:]), 1.0)
    out = counts.sum(axis=1)
    k = np.divide(counts, out[:, None], out=np.zeros_like(counts), where=out[:, None] > 0)
    return k, out


def prsvi(traj: Trajectory, phi, env: RiskEnvelope, mdp: Mdp, policy: SoftmaxPolicy,
          k_iters: int = 1000, reg: float | None = None, kernel=None, v0=None,
          tol: float = 1e-10, solver_opts: dict | None = None) -> PrsviResult:
    """Projected risk-sensitive value iteration on one trajectory.

    v <- G^{-1} [ mean_t phi(x_t) C_theta(x_t) + gamma mean_t phi(x_t) rho_{x_t}(Phi v) ]

    with ``G = mean_t phi(x_t) phi(x_t)'`` over the transitions of the
    trajectory.  ``rho`` uses the empirical next-state distribution of each
    state, or ``kernel`` (S, S) when supplied.  ``reg=None`` means
    ``1/(2 n_x)`` per state for the empirical kernel (n_x = transitions out of
    x) and 0 for a supplied kernel.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    xs = np.asarray(traj.states).reshape(-1)
    if xs.size < 2:
        raise ValueError("trajectory needs at least one transition")
    src = xs[:-1]
    f = phi[src]
    gram = f.T @ f / src.size
    if np.linalg.matrix_rank(gram) < phi.shape[1]:
        raise ValueError("feature Gram matrix is singular on the visited states")
    emp, out = empirical_kernel(traj, mdp.n_states)
    if kernel is None:
        k = emp
        regs = np.where(out > 0, 1.0 / (2.0 * np.maximum(out, 1.0)), 0.0) if reg is None \
            else np.full(mdp.n_states, float(reg))
    else:
        k = np.asarray(kernel, dtype=float)
        regs = np.full(mdp.n_states, 0.0 if reg is None else float(reg))
    visited = np.unique(src)
    kappa = contraction_factor(env, k[visited], mdp.gamma)
    if kappa >= 1.0:
        raise ValueError(f"contraction condition fails: gamma * max xi = {kappa:.3g} >= 1")
    c_theta = expected_cost(mdp, policy)
    b_cost = f.T @ c_theta[src] / src.size
    visits = np.bincount(src, minlength=mdp.n_states) / src.size
    v = np.zeros(phi.shape[1]) if v0 is None else np.asarray(v0, dtype=float).copy()
    history = []
    opts = dict(solver_opts or {})
    for it in range(1, k_iters + 1):
        z = phi @ v
        rho = np.zeros(mdp.n_states)
        for x in visited:
            o = dict(opts)
            if regs[x] > 0:
                o["reg"] = regs[x]
                o["force_numeric"] = True
            rho[x] = evaluate_risk(env, FiniteDist(k[x]), z, o)[0]
        rhs = b_cost + mdp.gamma * (phi.T * visits) @ rho
        v_new = np.linalg.solve(gram, rhs)
        step = float(np.max(np.abs(v_new - v)))
        history.append(step)
        v = v_new
        if step < tol:
            return PrsviResult(v, it, True, history)
    return PrsviResult(v, k_iters, False, history)


def stage_cost_h(mdp: Mdp, saddles: StateSaddles, values, x: int, a: int, next_states=None,
                 variant: str = "corrected") -> float:
    """Stage-wise cost h(x, a).

    corrected (default), the exact derivative:
        C(x,a) + sum_y P(y|x,a) [ xi(y) (gamma V(y) - lam_p) - corr(y) ]
    as_printed, with the correction also weighted by xi(y):
        C(x,a) + sum_y P(y|x,a) xi(y) [ gamma V(y) - lam_p - corr(y) ]

    ``corr(y) = sum lam_e dg_e/dp(y) + sum lam_i df_i/dp(y)``.  With
    ``next_states`` (samples from P(.|x,a)) the sum is a sample average.
    """
    term = _h_terms(saddles, np.asarray(values, float), x, variant)
    if next_states is None:
        inner = float(mdp.kernel[x, a] @ term)
    else:
        ys = np.asarray(next_states, dtype=np.int64)
        if ys.size == 0:
            raise ValueError("no next-state samples")
        inner = float(term[ys].mean())
    return float(mdp.cost_sa[x, a]) + inner


def _h_terms(saddles: StateSaddles, values: np.ndarray, x: int, variant: str) -> np.ndarray:
    sp = saddles.saddles[x]
    corr = saddles.correction(x)
    gv = saddles.gamma * values - sp.lam_p
    if variant == "corrected":
        return sp.xi * gv - corr
    if variant == "as_printed":
        return sp.xi * (gv - corr)
    raise ValueError(f"unknown variant {variant!r}")


def stage_cost_table(mdp: Mdp, saddles: StateSaddles, values, variant: str = "corrected") -> np.ndarray:
    """Exact h(x, a) for all state-action pairs, shape (S, A)."""
    values = np.asarray(values, float)
    terms = np.stack([_h_terms(saddles, values, x, variant) for x in range(mdp.n_states)])
    return mdp.cost_sa + np.einsum("xay,xy->xa", mdp.kernel, terms)


def occupancy(xi_kernel: np.ndarray, gamma: float, x0: int) -> np.ndarray:
    """Unnormalised discounted occupancy d = sum_t gamma^t Pr(x_t = .)."""
    n = xi_kernel.shape[0]
    e = np.zeros(n)
    e[x0] = 1.0
    return np.linalg.solve(np.eye(n) - gamma * xi_kernel.T, e)


def grad_dynamic_exact(mdp: Mdp, policy: SoftmaxPolicy, env: RiskEnvelope, tol: float = 1e-12,
                       variant: str = "corrected", solver_opts: dict | None = None) -> GradEstimate:
    """Exact gradient of V_theta(x0) via the occupancy of the worst-case chain."""
    if mdp.n_states * mdp.n_actions > 10_000:
        raise ValueError("exact dynamic gradient is meant for small MDPs")
    vfn, saddles = solve_value_exact(mdp, policy, env, tol, solver_opts=solver_opts)
    v = vfn.values()
    pxi = saddles.xi_kernel
    d = occupancy(pxi, mdp.gamma, mdp.x0)
    h = stage_cost_table(mdp, saddles, v, variant)
    mu = policy.probs()
    g = np.einsum("x,xa,xak,xa->k", d, mu, policy.scores(), h)
    return GradEstimate(g, 0, {"value_x0": float(v[mdp.x0]), "row_sum_dev": float(np.max(np.abs(pxi.sum(1) - 1)))})


def grad_dynamic_twophase(mdp: Mdp, policy: SoftmaxPolicy, env: RiskEnvelope, v, n: int,
                          horizon: int | None = None, rng=None, n2: int | None = None,
                          variant: str = "corrected", saddles: StateSaddles | None = None,
                          solver_opts: dict | None = None) -> GradEstimate:
    """Sampled dynamic gradient.

    Phase 1 rolls ``n`` trajectories whose actions follow the policy and whose
    next states follow the worst-case kernel ``P_theta(y|x) xi_x(y)``.  Phase 2
    estimates h(x_t, a_t) at every visited pair from ``n2`` fresh draws of
    ``P(.|x_t, a_t)``.  The estimate is the average over trajectories of
    ``sum_t gamma^t score(x_t, a_t) h_N(x_t, a_t)``.
    """
    rng = as_rng(rng)
    values = v.values() if isinstance(v, ValueFn) else np.asarray(v, dtype=float)
    if saddles is None:
        # one solve per state; reused for every occurrence below
        _, saddles = state_saddles(mdp, policy, env, values, solver_opts)
    n2 = n if n2 is None else n2
    t_needed = mdp.horizon(1e-6)
    horizon = t_needed if horizon is None else horizon
    diag = {"horizon": horizon, "n2": n2}
    if horizon < t_needed:
        diag["warning"] = f"horizon {horizon} is shorter than T(1e-6) = {t_needed}"
    pxi = saddles.xi_kernel
    pxi = pxi / pxi.sum(axis=1, keepdims=True)
    traj = simulate_batch(mdp, policy, n, horizon, rng, kernel_override=pxi)
    xs, acts = traj.states.reshape(-1), traj.actions.reshape(-1)
    terms = np.stack([_h_terms(saddles, values, x, variant) for x in range(mdp.n_states)])
    # phase 2: n2 next-state draws per occurrence, summarised by their counts
    counts = rng.multinomial(n2, mdp.kernel[xs, acts])
    h = mdp.cost_sa[xs, acts] + np.einsum("my,my->m", counts, terms[xs]) / n2
    disc = np.tile(mdp.gamma ** np.arange(horizon), n)
    scores = policy.scores()[xs, acts]
    g = scores.T @ (disc * h) / n
    return GradEstimate(g, n, diag)
