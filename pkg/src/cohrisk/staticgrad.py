"""Likelihood-ratio gradient estimators for static coherent risk.

All estimators return the gradient of a risk of a cost (smaller is better)
with respect to the parameters of the sampling distribution.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .envelope import RiskEnvelope, SaddlePoint, cvar_quantile, evaluate_risk
from .probspace import FiniteDist, ParamModel, SampleBatch, empirical_from_samples

log = logging.getLogger(__name__)

SADDLE_TOL = 1e-6
QUANTILE_MASS_WARN = 0.10


@dataclass
class GradEstimate:
    grad: np.ndarray
    n_samples: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.grad)):
            raise FloatingPointError("non-finite gradient estimate")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def _need_scores(scores):
    if scores is None:
        raise ValueError("scores required: distribution carries no likelihood-ratio scores")


def grad_theorem2(dist: FiniteDist, z, sp: SaddlePoint, env: RiskEnvelope,
                  tol: float = SADDLE_TOL, reg: float = 0.0) -> GradEstimate:
    """Exact gradient of rho at a saddle point, by enumeration over the support.

    The constraint terms use the chain rule
    ``d/dtheta g_e = sum_w dg_e/dp(w) * P(w) * score(w)``.
    """
    from .saddle import kkt_verify

    _need_scores(dist.scores)
    kkt = kkt_verify(env, dist, z, sp, reg=reg)
    if kkt.max > tol:
        raise ValueError(f"saddle point invalid: KKT residual {kkt.max:.3e} > {tol:.1e}")
    idx, p, s = dist.restrict()
    z = np.asarray(z, dtype=float)[idx]
    x = np.asarray(sp.x, dtype=float)
    xi = x[: p.size]
    ps = p[:, None] * s  # gradient of P(w) per atom
    grad = ps.T @ (xi * (z - sp.lam_p))
    if np.size(sp.lam_e):
        grad -= env.lam_dg_dp(x, p, sp.lam_e) @ ps
    if np.size(sp.lam_i):
        grad -= env.lam_df_dp(x, p, sp.lam_i) @ ps
    return GradEstimate(grad, 0, {"kkt_residual": kkt.max, "lam_p": sp.lam_p})


def exact_risk(env: RiskEnvelope, model: ParamModel, theta, z) -> float:
    """rho(Z) under P_theta, computed exactly over the finite outcome set."""
    return evaluate_risk(env, model.dist(theta), z)[0]


def exact_gradient(env: RiskEnvelope, model: ParamModel, theta, z) -> GradEstimate:
    dist = model.dist(theta)
    _, sp = evaluate_risk(env, dist, z)
    return grad_theorem2(dist, z, sp, env)


def _quantile_diagnostics(values: np.ndarray, q: float) -> dict:
    mass = float(np.mean(values == q))
    diag = {"quantile": q, "quantile_mass": mass}
    if mass > QUANTILE_MASS_WARN:
        diag["warning"] = f"quantile atom carries {mass:.1%} of the mass; gradient may be set-valued"
        log.warning(diag["warning"])
    return diag


def grad_cvar_sampled(batch: SampleBatch, alpha: float, min_tail: float = 10.0) -> GradEstimate:
    """CVaR gradient from i.i.d. samples.

    Uses the smallest empirical (1 - alpha)-quantile ``q`` and averages
    ``score * (Z - q)`` over the strict tail ``Z > q``, normalised by
    ``alpha * N``.  This equals the plug-in saddle-point formula under the
    empirical distribution even when the quantile atom is split.
    """
    if not (0 < alpha <= 1):
        raise ValueError(f"CVaR level must lie in (0, 1], got {alpha}")
    n = len(batch)
    if n * alpha < min_tail:
        raise ValueError(f"too few samples for the tail: N*alpha = {n * alpha:g} < {min_tail:g}")
    z = batch.values
    q = cvar_quantile(np.full(n, 1.0 / n), z, alpha)
    tail = z > q
    diag = _quantile_diagnostics(z, q)
    diag["tail_size"] = int(tail.sum())
    if not tail.any():
        if np.all(z == q):
            # every term Z - q vanishes
            diag["degenerate"] = True
            return GradEstimate(np.zeros(batch.scores.shape[1]), n, diag)
        raise ValueError("no tail samples")
    grad = batch.scores[tail].T @ (z[tail] - q) / (alpha * n)
    return GradEstimate(grad, n, diag)


def grad_gmsd(batch: SampleBatch, alpha: float, variant: str = "corrected") -> GradEstimate:
    """GMSD estimator for E[Z] + alpha * SD_+(Z), SD_+ = sqrt(E[(Z - EZ)_+^2]).

    Steps: sample mean, sample semideviation, likelihood-ratio mean gradient,
    then the combination

        grad E + alpha / SD * mean[(z - E)_+ * (k * score * (z - E) - grad E)]

    with ``k = 1/2`` (``variant="corrected"``, the exact derivative of SD_+)
    or ``k = 1`` (``variant="as_printed"``, the uncorrected combination, which
    double-counts the score term; kept for comparison).
    """
    if variant not in ("corrected", "as_printed"):
        raise ValueError(f"unknown GMSD variant {variant!r}")
    n = len(batch)
    if n < 2:
        raise ValueError("need at least two samples")
    z, s = batch.values, batch.scores
    mean = z.mean()
    dev = np.maximum(z - mean, 0.0)
    sd = math.sqrt(np.mean(dev**2))
    grad_mean = s.T @ z / n
    if sd == 0.0:
        return GradEstimate(grad_mean, n, {"sd": 0.0, "degenerate": True})
    k = 0.5 if variant == "corrected" else 1.0
    inner = k * s * (z - mean)[:, None] - grad_mean[None, :]
    grad = grad_mean + alpha / sd * (dev @ inner) / n
    return GradEstimate(grad, n, {"sd": sd, "mean": mean, "degenerate": False, "variant": variant})


SAA_DENSE_LIMIT = 100


def grad_saa(env: RiskEnvelope, batch: SampleBatch, support_size: int | None = None,
             solver_opts: dict | None = None, numeric: bool | None = None) -> GradEstimate:
    """Plug-in estimator: solve the envelope program under the empirical
    distribution and evaluate the saddle-point gradient formula there.

    With ``support_size=None`` every draw is its own atom (continuous costs).
    ``numeric=None`` uses the interior-point solver up to ``SAA_DENSE_LIMIT``
    atoms and the envelope's closed-form saddle beyond that.
    """
    if support_size is None:
        n = len(batch)
        dist = FiniteDist(np.full(n, 1.0 / n), batch.scores)
        z = batch.values
    else:
        dist = empirical_from_samples(batch, support_size)
        z = np.zeros(support_size)
        z[batch.ids] = batch.values
    opts = dict(solver_opts or {})
    if numeric is None:
        numeric = dist.support.size <= SAA_DENSE_LIMIT or not env.has_analytic
    opts["force_numeric"] = bool(numeric) or opts.get("reg", 0.0) > 0
    _, sp = evaluate_risk(env, dist, z, opts)
    est = grad_theorem2(dist, z, sp, env, reg=opts.get("reg", 0.0))
    est.n_samples = len(batch)
    return est


def grad_meanstd(batch: SampleBatch, c: float) -> GradEstimate:
    """Likelihood-ratio gradient of E[Z] + c * sqrt(Var Z)."""
    n = len(batch)
    if n < 2:
        raise ValueError("need at least two samples")
    z, s = batch.values, batch.scores
    mean = z.mean()
    var = float(np.mean(z**2) - mean**2)
    grad_mean = s.T @ z / n
    if var <= 0.0 or c == 0.0:
        return GradEstimate(grad_mean, n, {"var": max(var, 0.0), "degenerate": var <= 0.0})
    grad_sq = s.T @ z**2 / n
    grad_std = (grad_sq - 2 * mean * grad_mean) / (2 * math.sqrt(var))
    return GradEstimate(grad_mean + c * grad_std, n, {"var": var, "degenerate": False})


grad_meanstd_baseline = grad_meanstd


def meanstd_value(p, z, c: float) -> float:
    p, z = np.asarray(p, float), np.asarray(z, float)
    m = p @ z
    return float(m + c * math.sqrt(max(p @ z**2 - m**2, 0.0)))
