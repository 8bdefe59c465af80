import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from cloth.errors import DimensionError, DomainError
from cloth.ot import (Marginals, discriminator_cost, free_marginal_optimum, hungarian, marginal_violation,
                      round_to_marginals, row_argmin_plan, sinkhorn, sinkhorn_dual, transport_cost)


def _marg(gen, k):
    w = gen.uniform(0.1, 1.0, size=k)
    return w / w.sum()


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 12))
def test_sinkhorn_meets_marginals(seed, n, m):
    gen = np.random.default_rng(seed)
    cost = gen.uniform(size=(n, m))
    marg = Marginals(_marg(gen, n), _marg(gen, m))
    res = sinkhorn(cost, marg, 0.1, max_iter=5000, tol=1e-8)
    assert res.violation <= 1e-6
    assert np.all(res.plan >= 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_hungarian_matches_scipy(seed, n):
    cost = np.random.default_rng(seed).uniform(size=(n, n))
    perm, total = hungarian(cost)
    r, c = linear_sum_assignment(cost)
    assert total == pytest.approx(cost[r, c].sum(), abs=1e-12)
    assert sorted(perm.tolist()) == list(range(n))
    assert total == pytest.approx(cost[np.arange(n), perm].sum(), abs=1e-12)


def test_hungarian_matches_enumeration(gen):
    for n in range(1, 7):
        cost = gen.integers(0, 5, size=(n, n)).astype(float)  # many ties
        best = min(sum(cost[i, s[i]] for i in range(n)) for s in itertools.permutations(range(n)))
        assert hungarian(cost)[1] == best


def test_hungarian_input_errors():
    with pytest.raises(DimensionError):
        hungarian(np.ones((2, 3)))
    with pytest.raises(DomainError):
        hungarian(np.array([[np.inf, 0], [0, 0]]))


def test_small_epsilon_sinkhorn_close_to_assignment(gen):
    for _ in range(10):
        n = int(gen.integers(2, 9))
        cost = gen.uniform(size=(n, n))
        marg = Marginals(np.full(n, 1 / n), np.full(n, 1 / n))
        plan = sinkhorn(cost, marg, 1e-3, max_iter=20000, tol=1e-9).plan
        ref = hungarian(cost)[1] / n
        assert abs(transport_cost(plan, cost) - ref) / ref < 0.01


def test_sinkhorn_dual_is_nondecreasing(gen):
    cost = gen.uniform(size=(6, 4))
    marg = Marginals(_marg(gen, 6), _marg(gen, 4))
    duals = []
    sinkhorn(cost, marg, 0.05, max_iter=100, tol=0.0,
             callback=lambda it, plan, f, g: duals.append(sinkhorn_dual(f, g, cost, marg, 0.05)))
    assert len(duals) == 100
    assert np.all(np.diff(duals) >= -1e-12)


def test_sinkhorn_rejects_non_finite_cost():
    marg = Marginals(np.full(2, 0.5), np.full(2, 0.5))
    with pytest.raises(DomainError):
        sinkhorn(np.array([[np.nan, 0], [0, 0]]), marg)


def test_marginals_validated():
    with pytest.raises(DomainError):
        Marginals(np.array([0.5, 0.6]), np.array([1.0]))
    with pytest.raises(DomainError):
        Marginals(np.array([1.5, -0.5]), np.array([1.0]))


@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.integers(1, 10))
def test_rounding_gives_exact_marginals(seed, n, m):
    gen = np.random.default_rng(seed)
    marg = Marginals(_marg(gen, n), _marg(gen, m))
    plan = gen.uniform(size=(n, m))
    plan /= plan.sum()
    out = round_to_marginals(plan, marg)
    assert np.all(out >= 0)
    assert marginal_violation(out, marg) < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 6))
def test_free_marginal_optimum_lower_bounds_any_plan(seed, n, m):
    gen = np.random.default_rng(seed)
    cost = gen.uniform(size=(n, m))
    plan, pi = row_argmin_plan(cost, 1.0 / n)
    assert transport_cost(plan, cost) == pytest.approx(free_marginal_optimum(cost, 1.0 / n))
    assert pi.sum() == pytest.approx(1.0)
    t = gen.dirichlet(np.ones(m), size=n)
    assert transport_cost(t / n, cost) >= free_marginal_optimum(cost, 1.0 / n) - 1e-12


def test_row_argmin_ties_go_to_lowest_column():
    plan, _ = row_argmin_plan(np.array([[1.0, 1.0, 2.0]]), 1.0)
    assert plan[0].tolist() == [1.0, 0.0, 0.0]


def test_discriminator_cost_drops_target_column_and_clamps():
    d = np.array([[0.0, 0.5, 0.5]])
    c = discriminator_cost(d, 2)
    assert c.shape == (1, 2)
    assert np.isfinite(c).all() and c[0, 1] == pytest.approx(np.log(2))
