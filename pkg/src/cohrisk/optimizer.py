"""Stochastic gradient descent on a risk objective."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .probspace import as_rng
from .staticgrad import GradEstimate

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "inverse", "robbins_monro")


@dataclass
class SgdConfig:
    """Step size alpha_k for k = 0, 1, ...:

    * ``constant``: a
    * ``inverse``: a / (k + 1)
    * ``robbins_monro``: a / (b + k)
    """

    iters: int = 300
    theta0: np.ndarray | None = None
    schedule: str = "robbins_monro"
    a: float = 1.0
    b: float = 10.0
    grad_clip: float | None = None
    seed: int | None = 0

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be at least 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.a <= 0 or (self.schedule == "robbins_monro" and self.b <= 0):
            raise ValueError("step sizes must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    def step(self, k: int) -> float:
        if self.schedule == "constant":
            return self.a
        if self.schedule == "inverse":
            return self.a / (k + 1)
        return self.a / (self.b + k)


@dataclass
class RunTrace:
    thetas: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    aborted: str | None = None

    def __len__(self) -> int:
        return len(self.thetas)

    @property
    def theta(self) -> np.ndarray:
        return self.thetas[-1]

    def record(self, theta, obj, gnorm, t0):
        self.thetas.append(np.array(theta, dtype=float))
        self.objectives.append(float(obj) if obj is not None else float("nan"))
        self.grad_norms.append(float(gnorm))
        self.wall.append(time.perf_counter() - t0)

    def rows(self):
        for k, (th, obj, gn) in enumerate(zip(self.thetas, self.objectives, self.grad_norms)):
            yield [k, *th.tolist(), obj, gn]

    def header(self) -> list[str]:
        dim = self.thetas[0].size if self.thetas else 0
        return ["iter", *[f"theta_{i}" for i in range(dim)], "objective", "grad_norm"]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


GradFn = Callable[[np.ndarray, np.random.Generator], "GradEstimate | np.ndarray"]
ObjFn = Callable[[np.ndarray, np.random.Generator], float]


def sgd_minimize(grad_fn: GradFn, obj_fn: ObjFn | None, cfg: SgdConfig, dim: int | None = None) -> RunTrace:
    """theta_{k+1} = theta_k - alpha_k g_k, with ``g_k = grad_fn(theta_k, rng)``.

    The trace holds ``iters + 1`` entries (the start point plus one per step).
    A non-finite gradient or iterate stops the run and the trace so far is returned with
    ``aborted`` set.  The gradient norm recorded at entry ``k`` is that of the
    step taken from ``theta_k`` (NaN on the final entry).
    """
    rng = as_rng(cfg.seed)
    if cfg.theta0 is not None:
        theta = np.array(cfg.theta0, dtype=float).reshape(-1)
    elif dim is not None:
        theta = np.zeros(dim)
    else:
        raise ValueError("need theta0 or dim")
    trace = RunTrace()
    t0 = time.perf_counter()
    for k in range(cfg.iters):
        obj = obj_fn(theta, rng) if obj_fn is not None else None
        try:
            est = grad_fn(theta, rng)
        except FloatingPointError as e:
            trace.record(theta, obj, float("nan"), t0)
            trace.aborted = f"iteration {k}: {e}"
            log.error("aborting SGD: %s", trace.aborted)
            return trace
        g = np.asarray(est.grad if isinstance(est, GradEstimate) else est, dtype=float)
        gnorm = float(np.linalg.norm(g))
        trace.record(theta, obj, gnorm, t0)
        if not np.all(np.isfinite(g)):
            trace.aborted = f"iteration {k}: non-finite gradient"
            log.error("aborting SGD: %s", trace.aborted)
            return trace
        if cfg.grad_clip is not None and gnorm > cfg.grad_clip:
            g = g * (cfg.grad_clip / gnorm)
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = theta - cfg.step(k) * g
        if not np.all(np.isfinite(nxt)):
            trace.aborted = f"iteration {k}: non-finite iterate"
            log.error("aborting SGD: %s", trace.aborted)
            return trace
        theta = nxt
    obj = obj_fn(theta, rng) if obj_fn is not None else None
    trace.record(theta, obj, float("nan"), t0)
    return trace
