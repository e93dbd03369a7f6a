from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohrisk.probspace import (FiniteDist, FixedModel, SampleBatch, SoftmaxModel, empirical_from_samples,
                               score_selfcheck, spawn_rngs, weighted_expectation)


def _batch(ids):
    ids = np.asarray(ids)
    return SampleBatch(ids, np.zeros(ids.size), np.zeros((ids.size, 1)))


def test_empirical_counts():
    d = empirical_from_samples(_batch([0, 0, 1, 2]), 3)
    np.testing.assert_allclose(d.probs, [0.5, 0.25, 0.25])


def test_empirical_degenerate():
    d = empirical_from_samples(_batch([0] * 7), 2)
    np.testing.assert_array_equal(d.probs, [1.0, 0.0])
    np.testing.assert_array_equal(d.support, [0])


def test_empirical_l1_concentration():
    p = np.array([0.3, 0.7])
    model = FixedModel(p)
    rng = np.random.default_rng(0)
    fails = 0
    for seed in range(100):
        ids = np.random.default_rng(seed).choice(2, size=100_000, p=p)
        fails += np.abs(empirical_from_samples(_batch(ids), 2).probs - p).sum() >= 0.02
    assert fails <= 1
    assert model.dist(rng.normal(size=1)).scores.shape == (2, 1)


def test_empirical_l1_decreases():
    model = SoftmaxModel.tabular(5)
    theta = np.array([0.5, -0.2, 0.0, 1.0, -1.0])
    p = model.dist(theta).probs
    z = np.arange(5.0)
    meds = [np.median([np.abs(empirical_from_samples(model.sample(theta, z, n, s), 5).probs - p).sum()
                       for s in range(20)]) for n in (100, 1000, 10_000)]
    assert meds[0] > meds[1] > meds[2]


def test_empirical_rejects_bad_ids():
    with pytest.raises(ValueError, match="outside"):
        empirical_from_samples(_batch([0, 3]), 3)
    with pytest.raises(ValueError, match="no samples"):
        empirical_from_samples(_batch([]), 3)


def test_weighted_expectation_examples():
    d = FiniteDist([0.25, 0.25, 0.5])
    assert weighted_expectation(d, np.ones(3), [1, 2, 3]) == pytest.approx(d.expectation([1, 2, 3]))
    assert weighted_expectation(FiniteDist([0.5, 0.5]), [2, 0], [10, 99]) == pytest.approx(10)
    assert weighted_expectation(FiniteDist([0.25, 0.75]), [2, 2 / 3], [1, 2]) == pytest.approx(1.5)


def test_weighted_expectation_errors():
    d = FiniteDist([0.5, 0.5])
    with pytest.raises(ValueError, match="length mismatch"):
        weighted_expectation(d, [1, 1, 1], [1, 2])
    with pytest.raises(ValueError, match="non-negative"):
        weighted_expectation(d, [-1, 3], [1, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10_000))
def test_weighted_expectation_within_range(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n))
    xi = rng.uniform(0, 3, n)
    xi /= p @ xi
    z = rng.normal(size=n)
    v = weighted_expectation(FiniteDist(p), xi, z)
    assert z.min() - 1e-12 <= v <= z.max() + 1e-12


def test_finite_dist_validation():
    with pytest.raises(ValueError, match="sum to"):
        FiniteDist([0.5, 0.6])
    with pytest.raises(ValueError, match="non-negative"):
        FiniteDist([1.5, -0.5])
    with pytest.raises(ValueError, match="empty"):
        FiniteDist([])


def test_score_selfcheck_softmax():
    assert score_selfcheck(SoftmaxModel.tabular(3), [0.1, -0.4, 0.7]) < 1e-6


def test_score_selfcheck_fixed():
    m = FixedModel(np.array([0.2, 0.8]))
    assert score_selfcheck(m, [0.3]) == 0.0
    assert not m.dist([0.3]).scores.any()


def test_score_logistic():
    # p(theta) = e^theta / (1 + e^theta) on the first atom
    m = SoftmaxModel(np.array([[1.0], [0.0]]))
    th = 0.37
    p = np.exp(th) / (1 + np.exp(th))
    np.testing.assert_allclose(m.dist([th]).scores[:, 0], [1 - p, -p], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 10_000))
def test_scores_have_zero_mean(n, k, seed):
    rng = np.random.default_rng(seed)
    d = SoftmaxModel(rng.normal(size=(n, k))).dist(rng.normal(size=k))
    assert np.max(np.abs(d.probs @ d.scores)) < 1e-8


def test_score_selfcheck_needs_positive_mass():
    m = FixedModel(np.array([1.0, 0.0]))
    with pytest.raises(ValueError, match="null atom"):
        score_selfcheck(m, [0.0])


def test_sampling_is_reproducible():
    m = SoftmaxModel.tabular(4)
    a = m.sample(np.zeros(4), np.arange(4.0), 50, seed=9)
    b = m.sample(np.zeros(4), np.arange(4.0), 50, seed=9)
    np.testing.assert_array_equal(a.ids, b.ids)
    s1 = [g.random() for g in spawn_rngs(3, 2)]
    s2 = [g.random() for g in spawn_rngs(3, 2)]
    assert s1 == s2 and s1[0] != s1[1]
