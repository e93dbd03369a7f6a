"""Finite probability spaces, sampling models and likelihood-ratio scores.

Outcomes are dense integer ids ``0..n-1``.  A :class:`FiniteDist` carries the
probability mass of each outcome and, optionally, the score matrix whose row
``w`` is the gradient of ``log P_theta(w)`` with respect to ``theta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

PROB_TOL = 1e-12


def as_rng(seed) -> np.random.Generator:
    """Return a generator for ``seed`` (int, SeedSequence or Generator)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one root seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


@dataclass(frozen=True)
class FiniteDist:
    probs: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if p.size == 0:
            raise ValueError("empty distribution")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > PROB_TOL * max(1, p.size):
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        if self.scores is not None:
            s = np.asarray(self.scores, dtype=float)
            if s.ndim == 1:
                s = s[:, None]
            if s.shape[0] != p.size:
                raise ValueError("score matrix needs one row per outcome")
            if not np.all(np.isfinite(s)):
                raise ValueError("scores must be finite")
            s.setflags(write=False)
            object.__setattr__(self, "scores", s)

    @property
    def size(self) -> int:
        return self.probs.size

    @property
    def dim(self) -> int:
        if self.scores is None:
            raise ValueError("distribution has no scores")
        return self.scores.shape[1]

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 0)

    def restrict(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """(support ids, probs, scores) over the atoms with positive mass."""
        idx = self.support
        s = None if self.scores is None else self.scores[idx]
        return idx, self.probs[idx], s

    def expectation(self, z) -> float:
        return float(self.probs @ np.asarray(z, dtype=float))


@dataclass(frozen=True)
class SampleBatch:
    """i.i.d. draws ``(outcome id, cost, score)``; arrays are aligned by draw."""

    ids: np.ndarray
    values: np.ndarray
    scores: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        sc = np.asarray(self.scores, dtype=float)
        if sc.ndim == 1:
            sc = sc[:, None]
        if not (ids.size == vals.size == sc.shape[0]):
            raise ValueError("ids, values and scores must have one entry per draw")
        for a in (ids, vals, sc):
            a.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "scores", sc)

    def __len__(self) -> int:
        return self.ids.size

    @property
    def draws(self):
        return list(zip(self.ids.tolist(), self.values.tolist(), list(self.scores)))


def empirical_from_samples(batch: SampleBatch, support_size: int) -> FiniteDist:
    """Empirical distribution of the batch over ``support_size`` outcomes.

    Unobserved atoms get probability 0 and a zero score row.
    """
    if len(batch) == 0:
        raise ValueError("no samples")
    if batch.ids.min() < 0 or batch.ids.max() >= support_size:
        raise ValueError("outcome id outside the support")
    counts = np.bincount(batch.ids, minlength=support_size)
    probs = counts / len(batch)
    scores = np.zeros((support_size, batch.scores.shape[1]))
    # first draw of each id carries that atom's score
    uniq, first = np.unique(batch.ids, return_index=True)
    scores[uniq] = batch.scores[first]
    return FiniteDist(probs, scores)


def weighted_expectation(dist: FiniteDist, xi, z) -> float:
    """sum_w P(w) xi(w) Z(w)."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    if xi.size != dist.size or z.size != dist.size:
        raise ValueError(f"length mismatch: |P|={dist.size}, |xi|={xi.size}, |Z|={z.size}")
    if np.any(xi < 0):
        raise ValueError("density must be non-negative")
    return float(np.sum(dist.probs * xi * z))


class ParamModel(Protocol):
    def dist(self, theta) -> FiniteDist: ...


@dataclass(frozen=True)
class SoftmaxModel:
    """P_theta(w) proportional to exp(features[w] . theta)."""

    features: np.ndarray = field()

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        object.__setattr__(self, "features", f)

    @classmethod
    def tabular(cls, n: int) -> "SoftmaxModel":
        return cls(np.eye(n))

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def log_probs(self, theta) -> np.ndarray:
        logits = self.features @ np.asarray(theta, dtype=float)
        m = logits.max()
        return logits - m - np.log(np.exp(logits - m).sum())

    def dist(self, theta) -> FiniteDist:
        lp = self.log_probs(theta)
        p = np.exp(lp)
        p = p / p.sum()
        scores = self.features - p @ self.features
        return FiniteDist(p, scores)

    def sample(self, theta, z, n: int, seed=None) -> SampleBatch:
        """Draw ``n`` outcomes and attach their costs ``z`` and scores."""
        d = self.dist(theta)
        rng = as_rng(seed)
        ids = rng.choice(d.size, size=n, p=d.probs)
        z = np.asarray(z, dtype=float)
        return SampleBatch(ids, z[ids], d.scores[ids], seed if isinstance(seed, int) else None)


@dataclass(frozen=True)
class FixedModel:
    """A theta-independent distribution; all scores vanish."""

    probs: np.ndarray
    dim: int = 1

    def dist(self, theta) -> FiniteDist:
        p = np.asarray(self.probs, dtype=float)
        return FiniteDist(p, np.zeros((p.size, np.size(theta))))


def score_selfcheck(model: ParamModel, theta, h: float = 1e-5) -> float:
    """Max |score - central difference of log P| over outcomes and coordinates."""
    theta = np.asarray(theta, dtype=float)
    d = model.dist(theta)
    if d.scores is None:
        raise ValueError("model provides no scores")
    if np.any(d.probs <= 0):
        raise ValueError("score undefined at null atom")
    fd = np.empty_like(d.scores)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        lp_plus = np.log(model.dist(theta + e).probs)
        lp_minus = np.log(model.dist(theta - e).probs)
        fd[:, k] = (lp_plus - lp_minus) / (2 * h)
    return float(np.max(np.abs(d.scores - fd)))
