"""Policy gradients for coherent risk measures, static and dynamic."""
from __future__ import annotations

from .dynrisk import (PrsviResult, StateSaddles, ValueFn, bellman_apply, grad_dynamic_exact,
                      grad_dynamic_twophase, prsvi, solve_value_exact, stage_cost_h,
                      state_saddles)
from .envelope import (CustomEnvelope, CVaREnvelope, ExpectationEnvelope,
                       MeanSemiDeviationEnvelope, RiskEnvelope, SaddlePoint, envelope_from_spec,
                       evaluate_risk, make_cvar, make_expectation, make_msd, risk_value)
from .mdp import Mdp, SoftmaxPolicy, Trajectory, load_mdp, random_mdp, simulate, simulate_batch
from .optimizer import RunTrace, SgdConfig, sgd_minimize
from .probspace import FiniteDist, SampleBatch, SoftmaxModel, empirical_from_samples
from .saddle import (EnvelopeProgram, InfeasibleError, NotConvergedError, SolverError,
                     kkt_verify, solve_envelope_program)
from .staticgrad import (GradEstimate, exact_gradient, exact_risk, grad_cvar_sampled, grad_gmsd,
                         grad_meanstd, grad_saa, grad_theorem2)

__version__ = "0.1.0"

__all__ = [
    "bellman_apply",
    "CustomEnvelope",
    "CVaREnvelope",
    "empirical_from_samples",
    "envelope_from_spec",
    "EnvelopeProgram",
    "evaluate_risk",
    "exact_gradient",
    "exact_risk",
    "ExpectationEnvelope",
    "FiniteDist",
    "grad_cvar_sampled",
    "grad_dynamic_exact",
    "grad_dynamic_twophase",
    "grad_gmsd",
    "grad_meanstd",
    "grad_saa",
    "grad_theorem2",
    "GradEstimate",
    "InfeasibleError",
    "kkt_verify",
    "load_mdp",
    "make_cvar",
    "make_expectation",
    "make_msd",
    "Mdp",
    "MeanSemiDeviationEnvelope",
    "NotConvergedError",
    "prsvi",
    "PrsviResult",
    "random_mdp",
    "risk_value",
    "RiskEnvelope",
    "RunTrace",
    "SaddlePoint",
    "SampleBatch",
    "sgd_minimize",
    "SgdConfig",
    "simulate",
    "simulate_batch",
    "SoftmaxModel",
    "SoftmaxPolicy",
    "solve_envelope_program",
    "solve_value_exact",
    "SolverError",
    "stage_cost_h",
    "state_saddles",
    "StateSaddles",
    "Trajectory",
    "ValueFn",
]
