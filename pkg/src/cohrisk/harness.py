"""Experiment configuration, the three-asset benchmark and the command runners
behind the CLI."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynrisk import grad_dynamic_exact, grad_dynamic_twophase, prsvi, solve_value_exact
from .envelope import RiskEnvelope, envelope_from_spec, evaluate_risk
from .mdp import Mdp, SoftmaxPolicy, mdp_from_dict, random_mdp, simulate
from .optimizer import RunTrace, SgdConfig, sgd_minimize
from .probspace import FiniteDist, SampleBatch, SoftmaxModel, as_rng
from .staticgrad import (GradEstimate, exact_gradient, exact_risk, grad_cvar_sampled, grad_gmsd,
                         grad_meanstd, grad_saa, meanstd_value)

log = logging.getLogger(__name__)

RISKS = ("expectation", "cvar", "msd", "meanstd")
ESTIMATORS = ("theorem2", "cvar", "gmsd", "saa", "meanstd", "dynamic-exact", "dynamic-twophase")
DYNAMIC = ("dynamic-exact", "dynamic-twophase")

BENCH_SGD = {"iters": 300, "schedule": "robbins_monro", "a": 10.0, "b": 20.0}

# which estimators make sense for which objective
COMPATIBLE = {
    "expectation": {"theorem2", "saa", "dynamic-exact", "dynamic-twophase"},
    "cvar": {"theorem2", "cvar", "saa", "dynamic-exact", "dynamic-twophase"},
    "msd": {"theorem2", "gmsd", "saa", "dynamic-exact", "dynamic-twophase"},
    "meanstd": {"meanstd"},
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (exit code 1)."""


class ToleranceBreach(RuntimeError):
    """A check ran but missed its tolerance (exit code 3)."""

    def __init__(self, msg: str, report: dict):
        super().__init__(msg)
        self.report = report


# ---------------------------------------------------------------- assets


@dataclass(frozen=True)
class AssetModel:
    """Two Gaussian assets and one Pareto asset; an asset is picked with
    probability proportional to exp(theta_i) and its return is then drawn.

    The return laws do not depend on theta, so the score of a draw is the
    softmax score of the chosen asset.  Costs are negated returns.
    """

    mean1: float = 1.0
    std1: float = 1.0
    mean2: float = 4.0
    std2: float = 6.0
    pareto_shape: float = 1.5
    pareto_scale: float = 1.0

    def __post_init__(self):
        if self.std1 <= 0 or self.std2 <= 0:
            raise ConfigError("asset standard deviations must be positive")
        if self.pareto_shape <= 1 or self.pareto_scale <= 0:
            raise ConfigError("Pareto shape must exceed 1 and scale must be positive")

    @property
    def means(self) -> np.ndarray:
        a = self.pareto_shape
        return np.array([self.mean1, self.mean2, a * self.pareto_scale / (a - 1)])

    @staticmethod
    def probs(theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        e = np.exp(t - t.max())
        return e / e.sum()

    def pareto(self, u: np.ndarray) -> np.ndarray:
        """Inverse CDF of f(z) = a s^a / z^(a+1), z > s."""
        return self.pareto_scale * u ** (-1.0 / self.pareto_shape)

    def draw_returns(self, asset: np.ndarray, rng) -> np.ndarray:
        rng = as_rng(rng)
        n = asset.size
        out = np.empty(n)
        for i, (m, s) in enumerate(((self.mean1, self.std1), (self.mean2, self.std2))):
            k = asset == i
            out[k] = m + s * rng.standard_normal(int(k.sum()))
        k = asset == 2
        # 1 - U keeps the argument in (0, 1]
        out[k] = self.pareto(1.0 - rng.random(int(k.sum())))
        return out

    def sample(self, theta, n: int, rng=None) -> SampleBatch:
        rng = as_rng(rng)
        p = self.probs(theta)
        asset = rng.choice(3, size=n, p=p)
        cost = -self.draw_returns(asset, rng)
        scores = np.eye(3)[asset] - p
        return SampleBatch(asset, cost, scores)


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    objective: dict = field(default_factory=lambda: {"risk": "expectation", "params": {}})
    model: dict = field(default_factory=lambda: {"assets": {}})
    estimator: str = "saa"
    samples_per_iter: int = 10_000
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(**BENCH_SGD))
    output: str | None = None
    critic: dict = field(default_factory=lambda: {"method": "exact"})
    check: dict = field(default_factory=dict)
    horizon: int | None = None

    def __post_init__(self):
        risk = self.objective.get("risk")
        if risk not in RISKS:
            raise ConfigError(f"unknown risk {risk!r}; expected one of {RISKS}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.estimator not in COMPATIBLE[risk]:
            raise ConfigError(f"estimator {self.estimator!r} does not apply to risk {risk!r}")
        if self.samples_per_iter < 1:
            raise ConfigError("samples_per_iter must be at least 1")
        kinds = [k for k in ("assets", "atoms", "mdp", "mdp_file", "random_mdp") if k in self.model]
        if len(kinds) != 1:
            raise ConfigError("model must name exactly one of assets, atoms, mdp, mdp_file, random_mdp")
        kind = kinds[0]
        dynamic = kind in ("mdp", "mdp_file", "random_mdp")
        if dynamic != (self.estimator in DYNAMIC):
            raise ConfigError(f"estimator {self.estimator!r} does not apply to a {kind} model")
        if kind == "assets" and self.estimator == "theorem2":
            raise ConfigError("theorem2 needs an enumerable outcome set; the asset returns are continuous")
        if kind == "atoms" and self.estimator == "meanstd":
            raise ConfigError("meanstd is only wired to the asset benchmark")
        if self.critic.get("method", "exact") not in ("exact", "prsvi"):
            raise ConfigError("critic.method must be 'exact' or 'prsvi'")

    @property
    def risk(self) -> str:
        return self.objective["risk"]

    @property
    def params(self) -> dict:
        return self.objective.get("params") or {}

    @property
    def model_kind(self) -> str:
        return next(k for k in ("assets", "atoms", "mdp", "mdp_file", "random_mdp") if k in self.model)

    def envelope(self) -> RiskEnvelope:
        if self.risk == "meanstd":
            raise ConfigError("mean-std is not coherent and has no envelope")
        try:
            return envelope_from_spec(self.objective)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        doc = dict(doc)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sgd = dict(doc.pop("sgd", {}) or {})
        if "assets" in (doc.get("model") or {"assets": {}}):
            # benchmark defaults; other models keep the optimizer defaults
            for k, v in BENCH_SGD.items():
                sgd.setdefault(k, v)
        try:
            doc["sgd"] = SgdConfig(**sgd)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad sgd section: {e}") from None
        model = doc.get("model")
        if model and "mdp_file" in model and base_dir is not None:
            p = Path(model["mdp_file"])
            model["mdp_file"] = str(p if p.is_absolute() else base_dir / p)
        try:
            return cls(**doc)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        th = d["sgd"]["theta0"]
        d["sgd"]["theta0"] = None if th is None else np.asarray(th).tolist()
        return d


def build_mdp(cfg: ExperimentConfig) -> tuple[Mdp, np.ndarray]:
    m = cfg.model
    try:
        if "mdp" in m:
            return mdp_from_dict(m["mdp"])
        if "mdp_file" in m:
            return mdp_from_dict(json.loads(Path(m["mdp_file"]).read_text()))
        r = m["random_mdp"]
        mdp = random_mdp(int(r.get("n_states", 3)), int(r.get("n_actions", 2)),
                         float(r.get("gamma", 0.5)), r.get("seed", 0),
                         state_cost=bool(r.get("state_cost", True)))
        s, a = mdp.n_states, mdp.n_actions
        return mdp, np.eye(s * a).reshape(s, a, -1)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad MDP model: {e}") from None


def build_atoms(cfg: ExperimentConfig) -> tuple[SoftmaxModel, np.ndarray]:
    a = cfg.model["atoms"]
    try:
        z = np.asarray(a["costs"], dtype=float)
    except (KeyError, TypeError, ValueError):
        raise ConfigError("atoms model needs a numeric 'costs' list") from None
    feats = a.get("features")
    model = SoftmaxModel.tabular(z.size) if feats is None else SoftmaxModel(np.asarray(feats, float))
    if model.size != z.size:
        raise ConfigError("atom features and costs differ in length")
    return model, z


# ---------------------------------------------------------------- static estimators


def batch_risk(cfg: ExperimentConfig, batch: SampleBatch) -> float:
    """Plug-in risk of the empirical cost distribution of a batch."""
    n = len(batch)
    p = np.full(n, 1.0 / n)
    if cfg.risk == "meanstd":
        return meanstd_value(p, batch.values, cfg.params.get("c", 1.0))
    return evaluate_risk(cfg.envelope(), FiniteDist(p), batch.values)[0]


def batch_gradient(cfg: ExperimentConfig, batch: SampleBatch) -> GradEstimate:
    params = cfg.params
    if cfg.estimator == "cvar":
        return grad_cvar_sampled(batch, params.get("alpha", 0.05))
    if cfg.estimator == "gmsd":
        return grad_gmsd(batch, params.get("alpha", 1.0), params.get("variant", "corrected"))
    if cfg.estimator == "meanstd":
        return grad_meanstd(batch, params.get("c", 1.0))
    return grad_saa(cfg.envelope(), batch)


class _BatchCache:
    """One batch per iterate, shared by the objective and gradient callbacks."""

    def __init__(self, draw):
        self._draw = draw
        self._key = None
        self._batch = None

    def __call__(self, theta, rng) -> SampleBatch:
        key = np.asarray(theta, dtype=float).tobytes()
        if key != self._key:
            self._key, self._batch = key, self._draw(theta, rng)
        return self._batch


def _static_callbacks(cfg: ExperimentConfig):
    """(grad_fn, obj_fn, dim) for the asset and atom models."""
    n = cfg.samples_per_iter
    if cfg.model_kind == "assets":
        assets = AssetModel(**cfg.model["assets"])
        cache = _BatchCache(lambda th, rng: assets.sample(th, n, rng))
        dim = 3
    else:
        model, z = build_atoms(cfg)
        dim = model.dim
        if cfg.estimator == "theorem2":
            env = cfg.envelope()
            return (lambda th, rng: exact_gradient(env, model, th, z),
                    lambda th, rng: exact_risk(env, model, th, z), dim)
        cache = _BatchCache(lambda th, rng: model.sample(th, z, n, rng))
        if cfg.estimator == "saa":
            env = cfg.envelope()
            return (lambda th, rng: grad_saa(env, cache(th, rng), support_size=model.size),
                    lambda th, rng: batch_risk(cfg, cache(th, rng)), dim)
    return (lambda th, rng: batch_gradient(cfg, cache(th, rng)),
            lambda th, rng: batch_risk(cfg, cache(th, rng)), dim)


# ---------------------------------------------------------------- dynamic estimators


def critic_values(cfg: ExperimentConfig, mdp: Mdp, policy: SoftmaxPolicy, env: RiskEnvelope, rng):
    """Values of the current policy from the configured critic."""
    c = cfg.critic
    if c.get("method", "exact") == "exact":
        return solve_value_exact(mdp, policy, env, float(c.get("tol", 1e-10)))[0].values()
    length = int(c.get("trajectory_length", 10_000))
    traj = simulate(mdp, policy, length, rng)
    phi = np.asarray(c["features"], float) if "features" in c else np.eye(mdp.n_states)
    res = prsvi(traj, phi, env, mdp, policy, k_iters=int(c.get("k_iters", 1000)))
    return phi @ res.weights


def _dynamic_callbacks(cfg: ExperimentConfig):
    mdp, features = build_mdp(cfg)
    env = cfg.envelope()
    n = cfg.samples_per_iter

    def grad_fn(th, rng):
        pol = SoftmaxPolicy(th, features)
        if cfg.estimator == "dynamic-exact":
            return grad_dynamic_exact(mdp, pol, env)
        v = critic_values(cfg, mdp, pol, env, rng)
        return grad_dynamic_twophase(mdp, pol, env, v, n, cfg.horizon, rng)

    def obj_fn(th, rng):
        pol = SoftmaxPolicy(th, features)
        return float(solve_value_exact(mdp, pol, env)[0].values()[mdp.x0])

    return grad_fn, obj_fn, features.shape[2]


# ---------------------------------------------------------------- commands


def _sgd_with_seed(cfg: ExperimentConfig, seed) -> SgdConfig:
    s = cfg.sgd
    if seed is None:
        return s
    return SgdConfig(s.iters, s.theta0, s.schedule, s.a, s.b, s.grad_clip, int(seed))


def run_optimize(cfg: ExperimentConfig, seed=None) -> RunTrace:
    if cfg.estimator in DYNAMIC:
        grad_fn, obj_fn, dim = _dynamic_callbacks(cfg)
    else:
        grad_fn, obj_fn, dim = _static_callbacks(cfg)
    return sgd_minimize(grad_fn, obj_fn, _sgd_with_seed(cfg, seed), dim)


def bench_rows(trace: RunTrace) -> list[list]:
    return [[k, *AssetModel.probs(th).tolist()] for k, th in enumerate(trace.thetas)]


BENCH_HEADER = ["iter", "p_a1", "p_a2", "p_a3"]


def cmd_bench_assets(cfg: ExperimentConfig, seed=None) -> tuple[RunTrace, list[list]]:
    if cfg.model_kind != "assets":
        raise ConfigError("bench-assets needs the assets model")
    trace = run_optimize(cfg, seed)
    return trace, bench_rows(trace)


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, int) else repr(float(v)) for v in r])
    return buf.getvalue()


def rows_to_json(header, rows) -> str:
    return json.dumps([dict(zip(header, r)) for r in rows], indent=1) + "\n"


def fd_gradient(fn, theta, h: float = 1e-6) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        out[k] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return out


def rel_sup_error(g, ref) -> float:
    """max |g - ref| / (1 + max |ref|); stays meaningful where ref vanishes."""
    g, ref = np.asarray(g, float), np.asarray(ref, float)
    return float(np.max(np.abs(g - ref)) / (1.0 + float(np.max(np.abs(ref)))))


def cmd_grad_check(cfg: ExperimentConfig, seed=None) -> dict:
    """Compare the exact gradient formula against central differences at
    ``check.points`` random parameters.  Raises ToleranceBreach on failure."""
    chk = cfg.check
    rng = as_rng(cfg.sgd.seed if seed is None else seed)
    n_points = int(chk.get("points", 5))
    h = float(chk.get("h", 1e-6))
    scale = float(chk.get("theta_scale", 1.0))
    env = cfg.envelope()
    devs, lr_devs = [], []
    if cfg.estimator in DYNAMIC:
        mdp, features = build_mdp(cfg)
        tol = float(chk.get("tol", 1e-3))

        def v0(th):
            return solve_value_exact(mdp, SoftmaxPolicy(th, features), env, 1e-13)[0].values()[mdp.x0]

        for _ in range(n_points):
            th = scale * rng.standard_normal(features.shape[2])
            g = grad_dynamic_exact(mdp, SoftmaxPolicy(th, features), env).grad
            devs.append(rel_sup_error(g, fd_gradient(v0, th, h)))
        kind = "dynamic"
    else:
        if cfg.model_kind != "atoms":
            raise ConfigError("grad-check needs an atoms or MDP model")
        model, z = build_atoms(cfg)
        tol = float(chk.get("tol", 1e-4))
        for _ in range(n_points):
            th = scale * rng.standard_normal(model.dim)
            g = exact_gradient(env, model, th, z).grad
            devs.append(rel_sup_error(g, fd_gradient(lambda t: exact_risk(env, model, t, z), th, h)))
            if cfg.risk == "expectation":
                d = model.dist(th)
                lr_devs.append(float(np.max(np.abs(g - d.scores.T @ (d.probs * z)))))
        kind = "static"
    report = {"kind": kind, "metric": "max|g - fd| / (1 + max|fd|)", "risk": cfg.risk, "params": cfg.params, "points": n_points, "h": h,
              "tol": tol, "max_rel_dev": max(devs), "rel_devs": devs}
    ok = max(devs) < tol
    if lr_devs:
        report["max_abs_dev_vs_likelihood_ratio"] = max(lr_devs)
        ok = ok and max(lr_devs) < 1e-6
    report["passed"] = bool(ok)
    if not ok:
        raise ToleranceBreach("gradient check exceeded tolerance", report)
    return report


def cmd_critic(cfg: ExperimentConfig, seed=None) -> dict:
    """Value of the policy at ``sgd.theta0`` from the exact solver and, when
    configured, from PRSVI on a simulated trajectory."""
    mdp, features = build_mdp(cfg)
    env = cfg.envelope()
    th = np.zeros(features.shape[2]) if cfg.sgd.theta0 is None else np.asarray(cfg.sgd.theta0, float)
    pol = SoftmaxPolicy(th, features)
    exact = solve_value_exact(mdp, pol, env)[0].values()
    out = {"exact": exact.tolist(), "x0": mdp.x0}
    if cfg.critic.get("method") == "prsvi":
        v = critic_values(cfg, mdp, pol, env, as_rng(cfg.sgd.seed if seed is None else seed))
        out["prsvi"] = v.tolist()
        out["sup_dev"] = float(np.max(np.abs(v - exact)))
    return out


def cmd_eval_risk(cfg: ExperimentConfig, seed=None) -> dict:
    """Risk of the atom costs under the softmax distribution at ``theta0``."""
    if cfg.model_kind != "atoms":
        raise ConfigError("eval-risk needs an atoms model")
    model, z = build_atoms(cfg)
    th = np.zeros(model.dim) if cfg.sgd.theta0 is None else np.asarray(cfg.sgd.theta0, float)
    d = model.dist(th)
    if cfg.risk == "meanstd":
        return {"risk": "meanstd", "value": meanstd_value(d.probs, z, cfg.params.get("c", 1.0))}
    rho, sp = evaluate_risk(cfg.envelope(), d, z)
    return {"risk": cfg.risk, "params": cfg.params, "value": rho, "xi": sp.xi.tolist(),
            "probs": d.probs.tolist()}
