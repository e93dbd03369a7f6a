from __future__ import annotations

import numpy as np
import pytest

import oracles as orc
from cohrisk.envelope import evaluate_risk, make_cvar, make_expectation, make_msd
from cohrisk.probspace import FiniteDist, FixedModel, SampleBatch, SoftmaxModel
from cohrisk.staticgrad import (GradEstimate, exact_gradient, grad_cvar_sampled, grad_gmsd, grad_meanstd,
                                grad_saa, grad_theorem2)

THETA3 = np.array([0.2, -0.4, 0.3])
Z3 = np.array([1.0, 4.0, -2.0])


def test_theta_independent_gradient_is_zero():
    d = FixedModel(np.array([0.2, 0.5, 0.3]), dim=2).dist(np.zeros(2))
    for env in (make_cvar(0.4), make_msd(0.5), make_expectation()):
        _, sp = evaluate_risk(env, d, [1.0, 3.0, -2.0])
        np.testing.assert_array_equal(grad_theorem2(d, [1.0, 3.0, -2.0], sp, env).grad, 0.0)


def test_expectation_is_likelihood_ratio():
    m = SoftmaxModel.tabular(3)
    g = exact_gradient(make_expectation(), m, THETA3, Z3).grad
    d = m.dist(THETA3)
    np.testing.assert_allclose(g, d.scores.T @ (d.probs * Z3), atol=1e-14)
    fd = orc.central_diff(orc.static_risk_fn("expectation", None, np.eye(3), Z3), THETA3)
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_cvar_eight_atoms_vs_fd():
    rng = np.random.default_rng(8)
    m = SoftmaxModel.tabular(8)
    z = rng.normal(size=8)
    done = 0
    while done < 5:
        th = rng.normal(size=8)
        p = orc.softmax_probs(np.eye(8), th)
        if np.min(np.abs(np.cumsum(p[np.argsort(-z)]) - 0.3)) < 1e-3:
            continue  # quantile crossing
        fd = orc.central_diff(orc.static_risk_fn("cvar", 0.3, np.eye(8), z), th)
        np.testing.assert_allclose(exact_gradient(make_cvar(0.3), m, th, z).grad, fd, atol=1e-5)
        done += 1


@pytest.mark.parametrize("name,param", [("expectation", None), ("cvar", 0.3), ("cvar", 0.7),
                                        ("msd", 0.5), ("msd", 1.0)])
def test_master_fd_property(name, param):
    env = {"expectation": make_expectation, "cvar": make_cvar, "msd": make_msd}[name](
        *(() if param is None else (param,)))
    rng = np.random.default_rng(sum(map(ord, name)) + int(100 * (param or 0)))
    for _ in range(5):
        n, k = int(rng.integers(3, 13)), int(rng.integers(1, 7))
        feats, z = rng.normal(size=(n, k)), rng.normal(size=n)
        th = rng.normal(size=k)
        p = orc.softmax_probs(feats, th)
        if param and np.min(np.abs(np.cumsum(p[np.argsort(-z)]) - param)) < 1e-3:
            continue
        fd = orc.central_diff(orc.static_risk_fn(name, param, feats, z), th)
        g = exact_gradient(env, SoftmaxModel(feats), th, z).grad
        assert np.max(np.abs(g - fd)) / (1 + np.max(np.abs(fd))) < 1e-4


@pytest.mark.parametrize("env", [make_cvar(0.4), make_msd(0.6), make_expectation()], ids=repr)
def test_gradient_scaling_and_translation(env):
    m = SoftmaxModel.tabular(5)
    th = np.array([0.1, 0.5, -0.3, 0.0, 0.2])
    z = np.array([1.0, -2.0, 0.5, 3.0, 2.2])
    g = exact_gradient(env, m, th, z).grad
    np.testing.assert_allclose(exact_gradient(env, m, th, 2 * z).grad, 2 * g, atol=1e-10)
    np.testing.assert_allclose(exact_gradient(env, m, th, z + 7).grad, g, atol=1e-10)


def test_theorem2_rejects_bad_saddle():
    m = SoftmaxModel.tabular(3)
    d = m.dist(THETA3)
    env = make_cvar(0.5)
    _, sp = evaluate_risk(env, d, Z3)
    sp.x = sp.x + 0.2
    with pytest.raises(ValueError, match="saddle point invalid"):
        grad_theorem2(d, Z3, sp, env)


def test_theorem2_needs_scores():
    d = FiniteDist([0.5, 0.5])
    _, sp = evaluate_risk(make_expectation(), d, [1.0, 2.0])
    with pytest.raises(ValueError, match="scores required"):
        grad_theorem2(d, [1.0, 2.0], sp, make_expectation())


def test_grad_estimate_rejects_nan():
    with pytest.raises(FloatingPointError):
        GradEstimate(np.array([1.0, np.nan]), 1)


def test_cvar_sampled_constant_cost():
    b = SampleBatch(np.zeros(100, int), np.full(100, 2.0), np.random.default_rng(0).normal(size=(100, 2)))
    est = grad_cvar_sampled(b, 0.3)
    np.testing.assert_array_equal(est.grad, 0.0)
    assert est.diagnostics["degenerate"]


def test_cvar_sampled_alpha_one_is_mean_gradient():
    m = SoftmaxModel.tabular(3)
    exact = exact_gradient(make_expectation(), m, THETA3, Z3).grad
    est = grad_cvar_sampled(m.sample(THETA3, Z3, 100_000, 1), 1.0).grad
    assert np.linalg.norm(est - exact) / np.linalg.norm(exact) < 0.02


def test_cvar_sampled_accuracy():
    m = SoftmaxModel.tabular(3)
    exact = exact_gradient(make_cvar(0.4), m, THETA3, Z3).grad
    errs = [np.linalg.norm(grad_cvar_sampled(m.sample(THETA3, Z3, 100_000, s), 0.4).grad - exact)
            / np.linalg.norm(exact) for s in range(20)]
    assert np.mean(np.array(errs) < 0.05) >= 0.95


def test_cvar_sampled_too_few():
    b = SampleBatch(np.arange(10), np.arange(10.0), np.ones((10, 1)))
    with pytest.raises(ValueError, match="too few samples"):
        grad_cvar_sampled(b, 0.5)


def test_cvar_sampled_warns_on_heavy_quantile_atom():
    m = SoftmaxModel.tabular(3)
    est = grad_cvar_sampled(m.sample(THETA3, Z3, 10_000, 3), 0.4)
    assert "warning" in est.diagnostics


def test_gmsd_alpha_zero_is_mean_gradient():
    b = SoftmaxModel.tabular(3).sample(THETA3, Z3, 1000, 2)
    np.testing.assert_allclose(grad_gmsd(b, 0.0).grad, b.scores.T @ b.values / 1000, atol=1e-14)


def test_gmsd_constant_cost():
    b = SampleBatch(np.zeros(50, int), np.ones(50), np.random.default_rng(1).normal(size=(50, 3)))
    est = grad_gmsd(b, 1.0)
    assert est.diagnostics["degenerate"]
    np.testing.assert_allclose(est.grad, b.scores.mean(axis=0))


def test_gmsd_accuracy_and_uncorrected_variant():
    m = SoftmaxModel.tabular(3)
    exact = exact_gradient(make_msd(1.0), m, THETA3, Z3).grad
    rel = {"corrected": [], "as_printed": []}
    for s in range(10):
        b = m.sample(THETA3, Z3, 100_000, s)
        for v in rel:
            rel[v].append(np.linalg.norm(grad_gmsd(b, 1.0, v).grad - exact) / np.linalg.norm(exact))
    assert max(rel["corrected"]) < 0.05
    # the uncorrected combination double-counts the score term and is biased
    assert min(rel["as_printed"]) > 0.05


def test_gmsd_unbiased_within_three_se():
    m = SoftmaxModel.tabular(3)
    exact = exact_gradient(make_msd(1.0), m, THETA3, Z3).grad
    gs = np.array([grad_gmsd(m.sample(THETA3, Z3, 10_000, s), 1.0).grad for s in range(50)])
    se = gs.std(axis=0, ddof=1) / np.sqrt(50)
    assert np.all(np.abs(gs.mean(axis=0) - exact) < 3 * se + 1e-3)


def test_saa_expectation_equals_lr():
    b = SoftmaxModel.tabular(3).sample(THETA3, Z3, 2000, 4)
    g = grad_saa(make_expectation(), b).grad
    np.testing.assert_allclose(g, b.scores.T @ b.values / 2000, atol=1e-12)


@pytest.mark.parametrize("numeric", [True, False])
def test_saa_cvar_equals_sampled_cvar(numeric):
    rng = np.random.default_rng(6)
    b = SampleBatch(np.arange(60), rng.normal(size=60), rng.normal(size=(60, 2)))
    g1 = grad_saa(make_cvar(0.5), b, numeric=numeric).grad
    g2 = grad_cvar_sampled(b, 0.5).grad
    np.testing.assert_allclose(g1, g2, atol=1e-6)


def test_saa_msd_consistency():
    m = SoftmaxModel.tabular(3)
    exact = exact_gradient(make_msd(0.7), m, THETA3, Z3).grad
    ok = [np.linalg.norm(grad_saa(make_msd(0.7), m.sample(THETA3, Z3, 10_000, s), support_size=3).grad - exact)
          < 0.1 * np.linalg.norm(exact) for s in range(20)]
    assert np.mean(ok) >= 0.9


def test_saa_dense_and_closed_form_agree():
    rng = np.random.default_rng(7)
    b = SampleBatch(np.arange(80), rng.normal(size=80), rng.normal(size=(80, 2)))
    for env in (make_msd(0.7), make_cvar(0.3)):
        np.testing.assert_allclose(grad_saa(env, b, numeric=True).grad, grad_saa(env, b, numeric=False).grad,
                                   atol=1e-6)


def test_meanstd_c_zero_is_mean():
    b = SoftmaxModel.tabular(3).sample(THETA3, Z3, 500, 1)
    np.testing.assert_allclose(grad_meanstd(b, 0.0).grad, b.scores.T @ b.values / 500)


def test_meanstd_theta_independent_symmetric():
    d = FixedModel(np.array([0.5, 0.5]), dim=2).dist(np.zeros(2))
    b = SampleBatch(np.array([0, 1] * 50), np.array([-1.0, 1.0] * 50), d.scores[[0, 1] * 50])
    np.testing.assert_array_equal(grad_meanstd(b, 1.0).grad, 0.0)


def test_meanstd_vs_fd():
    m = SoftmaxModel.tabular(3)
    fd = orc.central_diff(orc.static_risk_fn("meanstd", 1.0, np.eye(3), Z3), THETA3)
    errs = [np.linalg.norm(grad_meanstd(m.sample(THETA3, Z3, 100_000, s), 1.0).grad - fd) / np.linalg.norm(fd)
            for s in range(10)]
    assert np.median(errs) < 0.05
