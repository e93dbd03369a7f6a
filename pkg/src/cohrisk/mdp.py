"""Finite discounted MDPs, linear-softmax policies and trajectory simulation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .probspace import as_rng

ROW_TOL = 1e-12


def _check_stochastic(k: np.ndarray, what: str, tol: float = ROW_TOL) -> None:
    if np.any(k < 0) or not np.all(np.isfinite(k)):
        raise ValueError(f"{what} has negative or non-finite entries")
    dev = np.max(np.abs(k.sum(axis=-1) - 1.0))
    if dev > tol * max(1, k.shape[-1]):
        raise ValueError(f"{what} rows do not sum to 1 (max deviation {dev:.2e})")


@dataclass(frozen=True)
class Mdp:
    """``kernel[x, a, y] = P(y | x, a)``.  ``cost`` is per state, shape (S,),
    or per state-action, shape (S, A)."""

    cost: np.ndarray
    kernel: np.ndarray
    gamma: float
    x0: int = 0
    c_max: float | None = None

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        if k.ndim != 3 or k.shape[0] != k.shape[2]:
            raise ValueError("kernel must have shape (S, A, S)")
        _check_stochastic(k, "transition kernel")
        c = np.asarray(self.cost, dtype=float)
        if c.shape not in ((k.shape[0],), k.shape[:2]):
            raise ValueError(f"cost must have shape (S,) or (S, A); got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("cost must be finite")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"discount must lie in (0, 1), got {self.gamma}")
        if not (0 <= self.x0 < k.shape[0]):
            raise ValueError("initial state out of range")
        cmax = float(np.max(np.abs(c))) if self.c_max is None else float(self.c_max)
        if np.max(np.abs(c)) > cmax:
            raise ValueError("cost exceeds the declared bound c_max")
        for name, val in (("kernel", k), ("cost", c)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "c_max", cmax)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    @property
    def cost_sa(self) -> np.ndarray:
        """C(x, a); a state cost is broadcast over actions."""
        if self.cost.ndim == 1:
            return np.repeat(self.cost[:, None], self.n_actions, axis=1)
        return self.cost

    @property
    def state_cost_only(self) -> bool:
        return self.cost.ndim == 1

    def horizon(self, eps: float = 1e-6) -> int:
        return truncation_horizon(self.gamma, self.c_max, eps)

    def with_gamma(self, gamma: float) -> "Mdp":
        return Mdp(self.cost, self.kernel, gamma, self.x0, self.c_max)


def truncation_horizon(gamma: float, c_max: float, eps: float = 1e-6) -> int:
    """Smallest T with gamma^T * c_max / (1 - gamma) <= eps."""
    if c_max <= 0:
        return 1
    return max(1, math.ceil(math.log(eps * (1 - gamma) / c_max) / math.log(gamma)))


def one_hot_features(n_states: int, n_actions: int) -> np.ndarray:
    return np.eye(n_states * n_actions).reshape(n_states, n_actions, -1)


@dataclass(frozen=True)
class SoftmaxPolicy:
    """mu(a | x) proportional to exp(theta . features[x, a])."""

    theta: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        th = np.asarray(self.theta, dtype=float).reshape(-1)
        if f.ndim != 3 or f.shape[2] != th.size:
            raise ValueError("features must have shape (S, A, dim(theta))")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "theta", th)

    @classmethod
    def tabular(cls, n_states: int, n_actions: int, theta=None) -> "SoftmaxPolicy":
        f = one_hot_features(n_states, n_actions)
        th = np.zeros(f.shape[2]) if theta is None else theta
        return cls(th, f)

    @property
    def dim(self) -> int:
        return self.theta.size

    def with_theta(self, theta) -> "SoftmaxPolicy":
        return SoftmaxPolicy(theta, self.features)

    def probs(self) -> np.ndarray:
        logits = self.features @ self.theta
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def scores(self) -> np.ndarray:
        """grad log mu(a|x), shape (S, A, dim)."""
        mu = self.probs()
        mean = np.einsum("xa,xak->xk", mu, self.features)
        return self.features - mean[:, None, :]

    def score(self, x: int, a: int) -> np.ndarray:
        return self.scores()[x, a]


def policy_score(policy: SoftmaxPolicy, x: int, a: int) -> np.ndarray:
    return policy.score(x, a)


def induced_kernel(mdp: Mdp, policy: SoftmaxPolicy) -> np.ndarray:
    """P_theta(y | x) = sum_a mu(a|x) P(y|x, a)."""
    return np.einsum("xa,xay->xy", policy.probs(), mdp.kernel)


def expected_cost(mdp: Mdp, policy: SoftmaxPolicy) -> np.ndarray:
    """Per-state cost under the policy: sum_a mu(a|x) C(x, a)."""
    return np.einsum("xa,xa->x", policy.probs(), mdp.cost_sa)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[-1]

    @property
    def steps(self):
        return list(zip(self.states.tolist(), self.actions.tolist(), self.costs.tolist()))

    def discounted_return(self, gamma: float):
        """Sum of gamma^t C_t; one value per trajectory for batched arrays."""
        out = np.sum(self.costs * gamma ** np.arange(self.costs.shape[-1]), axis=-1)
        return float(out) if np.ndim(out) == 0 else out


def _override_kernel(mdp: Mdp, kernel_override) -> np.ndarray | None:
    if kernel_override is None:
        return None
    k = np.asarray(kernel_override, dtype=float)
    if k.shape not in ((mdp.n_states, mdp.n_states), mdp.kernel.shape):
        raise ValueError("kernel override must have shape (S, S) or (S, A, S)")
    _check_stochastic(k, "kernel override", tol=1e-8)
    return k


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw, one uniform per row."""
    idx = (u[:, None] > cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def simulate_batch(mdp: Mdp, policy: SoftmaxPolicy, n: int, horizon: int, rng=None,
                   kernel_override=None, x0: int | None = None) -> Trajectory:
    """``n`` independent trajectories of length ``horizon``; arrays are (n, T).

    Actions always follow the policy.  Next states follow the MDP kernel, or
    ``kernel_override`` when given: a state-to-state matrix (S, S) is used
    regardless of the action, an (S, A, S) tensor replaces P(y|x, a).
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = as_rng(rng)
    k = _override_kernel(mdp, kernel_override)
    mu_cdf = np.cumsum(policy.probs(), axis=1)
    if k is None:
        k = mdp.kernel
    k_cdf = np.cumsum(k, axis=-1)
    # rounding must never select a trailing zero-probability entry
    mu_cdf[:, -1] = 1.0
    k_cdf[..., -1] = 1.0
    cost = mdp.cost_sa
    xs = np.empty((n, horizon), dtype=np.int64)
    acts = np.empty((n, horizon), dtype=np.int64)
    x = np.full(n, mdp.x0 if x0 is None else x0, dtype=np.int64)
    for t in range(horizon):
        a = _draw(mu_cdf[x], rng.random(n))
        xs[:, t], acts[:, t] = x, a
        rows = k_cdf[x] if k_cdf.ndim == 2 else k_cdf[x, a]
        x = _draw(rows, rng.random(n))
    return Trajectory(xs, acts, cost[xs, acts])


def simulate(mdp: Mdp, policy: SoftmaxPolicy, horizon: int, rng=None, kernel_override=None,
             x0: int | None = None) -> Trajectory:
    tr = simulate_batch(mdp, policy, 1, horizon, rng, kernel_override, x0)
    return Trajectory(tr.states[0], tr.actions[0], tr.costs[0])


def discounted_return(traj: Trajectory, gamma: float) -> float:
    return traj.discounted_return(gamma)


def stationary_distribution(kernel: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(kernel.T)
    i = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, i])
    return pi / pi.sum()


def mdp_from_dict(doc: dict) -> tuple[Mdp, np.ndarray]:
    """Build ``(mdp, features)`` from the JSON layout
    ``{n_states, n_actions, gamma, x0, cost, kernel, features?}``."""
    try:
        s, a = int(doc["n_states"]), int(doc["n_actions"])
        kernel = np.asarray(doc["kernel"], dtype=float)
        mdp = Mdp(np.asarray(doc["cost"], dtype=float), kernel, float(doc["gamma"]),
                  int(doc.get("x0", 0)), doc.get("c_max"))
    except KeyError as e:
        raise ValueError(f"MDP document is missing field {e.args[0]!r}") from None
    if mdp.n_states != s or mdp.n_actions != a:
        raise ValueError("declared sizes do not match the kernel shape")
    feats = doc.get("features")
    features = one_hot_features(s, a) if feats is None else np.asarray(feats, dtype=float)
    if features.ndim != 3 or features.shape[:2] != (s, a):
        raise ValueError("features must have shape (S, A, K)")
    return mdp, features


def load_mdp(path) -> tuple[Mdp, np.ndarray]:
    return mdp_from_dict(json.loads(Path(path).read_text()))


def mdp_to_dict(mdp: Mdp, features: np.ndarray | None = None) -> dict:
    doc = {"n_states": mdp.n_states, "n_actions": mdp.n_actions, "gamma": mdp.gamma,
           "x0": mdp.x0, "cost": mdp.cost.tolist(), "kernel": mdp.kernel.tolist()}
    if features is not None:
        doc["features"] = np.asarray(features).tolist()
    return doc


def random_mdp(n_states: int, n_actions: int, gamma: float, rng=None, cost_scale: float = 1.0,
               state_cost: bool = True) -> Mdp:
    """Random dense MDP, handy for tests and demos."""
    rng = as_rng(rng)
    k = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    shape = (n_states,) if state_cost else (n_states, n_actions)
    return Mdp(cost_scale * rng.uniform(-1, 1, size=shape), k, gamma, 0)

