from __future__ import annotations

import numpy as np
import pytest

import oracles as orc
from cohrisk.dynrisk import (ValueFn, bellman_apply, grad_dynamic_exact, grad_dynamic_twophase, prsvi,
                             solve_value_exact, stage_cost_h, state_saddles)
from cohrisk.envelope import make_cvar, make_expectation, make_msd
from cohrisk.mdp import Mdp, SoftmaxPolicy, induced_kernel, random_mdp, simulate
from cohrisk.saddle import SolverError


def _setup(seed, s=3, a=2, gamma=0.5):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(s, a, gamma, rng)
    return mdp, SoftmaxPolicy.tabular(s, a, rng.normal(size=s * a)), rng


def test_bellman_expectation_is_classical():
    mdp, pol, rng = _setup(0)
    v = rng.normal(size=3)
    out = bellman_apply(mdp, pol, make_expectation(), v).values()
    np.testing.assert_allclose(out, mdp.cost + mdp.gamma * induced_kernel(mdp, pol) @ v, atol=1e-13)


def test_bellman_zero_values():
    mdp, pol, _ = _setup(1)
    np.testing.assert_allclose(bellman_apply(mdp, pol, make_cvar(0.4), np.zeros(3)).values(), mdp.cost)


def test_bellman_cvar_vertex_oracle():
    mdp, pol, rng = _setup(2, s=2)
    v = rng.normal(size=2)
    p = induced_kernel(mdp, pol)
    want = [mdp.cost[x] + orc.cvar_vertices(p[x], mdp.gamma * v, 0.5) for x in range(2)]
    np.testing.assert_allclose(bellman_apply(mdp, pol, make_cvar(0.5), v).values(), want, atol=1e-12)


def test_value_expectation_linear_solve():
    mdp, pol, _ = _setup(3, s=4)
    v = solve_value_exact(mdp, pol, make_expectation(), 1e-12)[0].values()
    np.testing.assert_allclose(v, orc.policy_evaluation(np.asarray(mdp.kernel), mdp.cost, mdp.gamma,
                                                        pol.probs()), atol=1e-10)


def test_value_tiny_discount():
    mdp, pol, _ = _setup(4)
    v = solve_value_exact(mdp.with_gamma(1e-9), pol, make_cvar(0.5))[0].values()
    np.testing.assert_allclose(v, mdp.cost, atol=1e-8)


def test_value_self_consistency_on_worst_case_kernel():
    mdp, pol, _ = _setup(5, s=4)
    vfn, sd = solve_value_exact(mdp, pol, make_cvar(0.6), 1e-12)
    v_pe = np.linalg.solve(np.eye(4) - mdp.gamma * sd.xi_kernel, mdp.cost)
    np.testing.assert_allclose(vfn.values(), v_pe, atol=1e-6)
    np.testing.assert_allclose(sd.xi_kernel.sum(axis=1), 1.0, atol=1e-8)


def test_fixed_point_unique():
    mdp, pol, _ = _setup(6)
    env = make_msd(0.5)
    a = solve_value_exact(mdp, pol, env, 1e-10)[0].values()
    b = solve_value_exact(mdp, pol, env, 1e-10, v0=np.full(3, mdp.c_max / (1 - mdp.gamma)))[0].values()
    assert np.max(np.abs(a - b)) < 2e-10


def test_value_iteration_cap():
    mdp, pol, _ = _setup(7, gamma=0.9)
    with pytest.raises(SolverError, match="did not converge"):
        solve_value_exact(mdp, pol, make_cvar(0.5), max_iter=3)


def test_value_matches_oracle_msd():
    mdp, pol, _ = _setup(8)
    v = solve_value_exact(mdp, pol, make_msd(0.8), 1e-13)[0].values()
    want = orc.value_iteration(np.asarray(mdp.kernel), mdp.cost, mdp.gamma, pol.probs(), "msd", 0.8)
    np.testing.assert_allclose(v, want, atol=1e-10)


def test_prsvi_expectation_td_fixed_point():
    mdp, pol, rng = _setup(9, s=4)
    tr = simulate(mdp, pol, 3000, rng)
    res = prsvi(tr, np.eye(4), make_expectation(), mdp, pol, kernel=induced_kernel(mdp, pol), tol=1e-13)
    want = orc.policy_evaluation(np.asarray(mdp.kernel), mdp.cost, mdp.gamma, pol.probs())
    np.testing.assert_allclose(res.weights, want, atol=1e-9)
    assert res.converged


def test_prsvi_constant_feature():
    k = np.random.default_rng(0).dirichlet(np.ones(3), size=(3, 2))
    mdp = Mdp(np.full(3, 2.0), k, 0.6)
    pol = SoftmaxPolicy.tabular(3, 2)
    tr = simulate(mdp, pol, 500, rng=1)
    res = prsvi(tr, np.ones((3, 1)), make_expectation(), mdp, pol, reg=0.0, tol=1e-13)
    assert res.weights[0] == pytest.approx(2.0 / 0.4, abs=1e-9)


def test_prsvi_empirical_kernel_close():
    mdp, pol, rng = _setup(10)
    env = make_cvar(0.8)
    exact = solve_value_exact(mdp, pol, env)[0].values()
    res = prsvi(simulate(mdp, pol, 50_000, rng), np.eye(3), env, mdp, pol)
    assert np.max(np.abs(res.weights - exact)) < 0.02


def test_prsvi_errors():
    mdp, pol, rng = _setup(11)
    tr = simulate(mdp, pol, 200, rng)
    phi = np.eye(3)
    phi[:, 2] = 0.0
    with pytest.raises(ValueError, match="singular"):
        prsvi(tr, phi, make_expectation(), mdp, pol)
    with pytest.raises(ValueError, match="contraction condition fails"):
        prsvi(tr, np.eye(3), make_cvar(0.3), mdp, pol)


def test_stage_cost_expectation():
    mdp, pol, _ = _setup(12)
    vfn, sd = solve_value_exact(mdp, pol, make_expectation())
    v = vfn.values()
    for x in range(3):
        for a in range(2):
            want = mdp.cost[x] + mdp.gamma * mdp.kernel[x, a] @ v - sd.saddles[x].lam_p
            assert stage_cost_h(mdp, sd, v, x, a) == pytest.approx(want, abs=1e-12)


def test_stage_cost_cvar_enumeration():
    mdp, pol, _ = _setup(13)
    vfn, sd = solve_value_exact(mdp, pol, make_cvar(0.7))
    v = vfn.values()
    for x in range(3):
        sp = sd.saddles[x]
        for a in range(2):
            want = mdp.cost[x]
            for y in range(3):
                want += mdp.kernel[x, a, y] * sp.xi[y] * (mdp.gamma * v[y] - sp.lam_p)
            assert stage_cost_h(mdp, sd, v, x, a) == pytest.approx(want, abs=1e-12)


def test_stage_cost_sampled():
    mdp, pol, rng = _setup(14)
    # positive costs keep h away from 0, where a relative band is meaningless
    mdp = Mdp(mdp.cost + 2.0, mdp.kernel, mdp.gamma)
    vfn, sd = solve_value_exact(mdp, pol, make_cvar(0.7))
    v = vfn.values()
    exact = stage_cost_h(mdp, sd, v, 1, 0)
    hits = 0
    for s in range(40):
        ys = np.random.default_rng(s).choice(3, size=10_000, p=mdp.kernel[1, 0])
        hits += abs(stage_cost_h(mdp, sd, v, 1, 0, ys) - exact) <= 0.02 * abs(exact)
    assert hits / 40 >= 0.95


def test_dynamic_expectation_matches_policy_gradient():
    mdp, pol, _ = _setup(15)
    g = grad_dynamic_exact(mdp, pol, make_expectation()).grad
    fd = orc.central_diff(lambda th: orc.policy_evaluation(np.asarray(mdp.kernel), mdp.cost, mdp.gamma,
                                                           orc.policy_table(pol.features, th))[0], pol.theta)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5


def test_dynamic_single_action_zero():
    mdp = random_mdp(3, 1, 0.5, rng=0)
    g = grad_dynamic_exact(mdp, SoftmaxPolicy.tabular(3, 1, [0.1, 0.2, 0.3]), make_cvar(0.6)).grad
    np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("env,name,param", [(make_cvar(0.6), "cvar", 0.6), (make_msd(0.7), "msd", 0.7)])
def test_dynamic_vs_fd(env, name, param):
    rng = np.random.default_rng(16)
    mdp = random_mdp(3, 2, 0.5, rng)
    for _ in range(5):
        pol = SoftmaxPolicy.tabular(3, 2, rng.normal(size=6))
        g = grad_dynamic_exact(mdp, pol, env).grad
        fd = orc.central_diff(orc.dynamic_value_fn(np.asarray(mdp.kernel), mdp.cost, mdp.gamma, pol.features,
                                                   mdp.x0, name, param), pol.theta)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_uncorrected_stage_cost_is_wrong_for_msd():
    rng = np.random.default_rng(17)
    mdp = random_mdp(3, 2, 0.5, rng)
    pol = SoftmaxPolicy.tabular(3, 2, rng.normal(size=6))
    env = make_msd(0.9)
    fd = orc.central_diff(orc.dynamic_value_fn(np.asarray(mdp.kernel), mdp.cost, mdp.gamma, pol.features,
                                               mdp.x0, "msd", 0.9), pol.theta)
    printed = grad_dynamic_exact(mdp, pol, env, variant="as_printed").grad
    assert np.max(np.abs(printed - fd)) / np.max(np.abs(fd)) > 1e-3


def test_twophase_expectation():
    # action-dependent costs give the score-function estimator a usable
    # signal-to-noise ratio at N = 1e4
    rng = np.random.default_rng(18)
    mdp = Mdp(np.tile([0.0, 1.0], (3, 1)), rng.dirichlet(np.ones(3), size=(3, 2)), 0.5)
    pol = SoftmaxPolicy.tabular(3, 2, rng.normal(size=6))
    env = make_expectation()
    v, sd = solve_value_exact(mdp, pol, env)
    exact = grad_dynamic_exact(mdp, pol, env).grad
    errs = [np.linalg.norm(grad_dynamic_twophase(mdp, pol, env, v, 10_000, rng=s, saddles=sd).grad - exact)
            / np.linalg.norm(exact) for s in range(10)]
    assert np.mean(np.array(errs) < 0.05) >= 0.9


def test_twophase_zero_cost():
    mdp = Mdp(np.zeros(3), random_mdp(3, 2, 0.5, rng=1).kernel, 0.5)
    pol = SoftmaxPolicy.tabular(3, 2, np.arange(6.0) / 6)
    g = grad_dynamic_twophase(mdp, pol, make_cvar(0.8), np.zeros(3), 100, rng=0).grad
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_twophase_with_tabular_critic():
    mdp, pol, rng = _setup(2)
    env = make_cvar(0.8)
    exact = grad_dynamic_exact(mdp, pol, env).grad
    critic = prsvi(simulate(mdp, pol, 100_000, rng), np.eye(3), env, mdp, pol)
    errs = [np.linalg.norm(grad_dynamic_twophase(mdp, pol, env, critic.weights, 10_000, rng=s).grad - exact)
            / np.linalg.norm(exact) for s in range(10)]
    assert np.median(errs) < 0.1


def test_twophase_short_horizon_warns():
    mdp, pol, _ = _setup(19)
    est = grad_dynamic_twophase(mdp, pol, make_expectation(), np.zeros(3), 10, horizon=2, rng=0)
    assert "warning" in est.diagnostics


def test_state_saddles_error_names_state():
    mdp, pol, _ = _setup(20)
    rhos, sd = state_saddles(mdp, pol, make_cvar(0.5), np.zeros(3))
    assert len(sd.saddles) == 3 and rhos.shape == (3,)


def test_value_fn_round_trip():
    v = ValueFn(weights=[1.0, 2.0], phi=np.eye(2))
    assert ValueFn.from_dict(v.to_dict()).values().tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        ValueFn()
