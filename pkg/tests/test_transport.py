import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsciml import transport as tr
from fedsciml.transport import DiscreteDistribution as D


def brute_force_w1(mu, nu):
    """Minimum over vertices of the transport polytope.

    Vertices are basic feasible solutions: for every spanning set of
    n1 + n2 - 1 cells, solve the marginal equations and keep the
    non-negative solutions.
    """
    n1, n2 = len(mu.weights), len(nu.weights)
    cost = np.linalg.norm(mu.support[:, None, :] - nu.support[None, :, :], axis=-1)
    cells = [(i, j) for i in range(n1) for j in range(n2)]
    a_eq = np.zeros((n1 + n2, len(cells)))
    for c, (i, j) in enumerate(cells):
        a_eq[i, c] = 1
        a_eq[n1 + j, c] = 1
    b = np.concatenate([mu.weights, nu.weights])
    best = np.inf
    for basis in itertools.combinations(range(len(cells)), n1 + n2 - 1):
        sub = a_eq[:, basis]
        if np.linalg.matrix_rank(sub) < n1 + n2 - 1:
            continue
        x, *_ = np.linalg.lstsq(sub, b, rcond=None)
        if np.any(x < -1e-12) or np.max(np.abs(sub @ x - b)) > 1e-10:
            continue
        best = min(best, float(sum(x[k] * cost[cells[c]] for k, c in enumerate(basis))))
    return best


def test_cost_matrix_examples():
    assert tr.cost_matrix(D([[1.0]], [1.0]), D([[1.0]], [1.0])).tolist() == [[0.0]]
    assert tr.cost_matrix(D([0.0], [1.0]), D([3.0], [1.0])).tolist() == [[3.0]]
    assert tr.cost_matrix(D([[0.0, 0.0]], [1.0]), D([[3.0, 4.0]], [1.0])).tolist() == [[5.0]]
    with pytest.raises(ValueError):
        tr.cost_matrix(D([0.0], [1.0]), D([[0.0, 1.0]], [1.0]))


def test_distribution_validation():
    with pytest.raises(ValueError):
        D(np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ValueError):
        D([0.0, 1.0], [0.6, 0.6])
    with pytest.raises(ValueError):
        D([0.0, 1.0], [1.5, -0.5])
    with pytest.raises(ValueError):
        D([0.0, 1.0], [1.0])


def test_emd_examples():
    mu = D([0.0, 1.0], [0.5, 0.5])
    assert tr.emd_w1(mu, mu)[0] == 0.0
    assert tr.emd_w1(D([0.0], [1.0]), D([1.0], [1.0]))[0] == 1.0
    value, plan = tr.emd_w1(mu, D([0.5], [1.0]))
    assert value == pytest.approx(0.5, abs=1e-12)
    assert plan.coupling.shape == (2, 1)


def test_plan_marginals():
    rng = np.random.default_rng(1)
    mu = D(rng.random((7, 2)), rng.dirichlet(np.ones(7)))
    nu = D(rng.random((5, 2)), rng.dirichlet(np.ones(5)))
    _, plan = tr.emd_w1(mu, nu)
    assert np.all(plan.coupling >= 0)
    assert np.allclose(plan.coupling.sum(axis=1), mu.weights, atol=1e-9)
    assert np.allclose(plan.coupling.sum(axis=0), nu.weights, atol=1e-9)


def test_closed_form_examples():
    a = D([0.0, 1.0], [0.5, 0.5])
    assert tr.w1_1d_closed_form(a, a) == 0.0
    assert tr.w1_1d_closed_form(a, D([1.0, 2.0], [0.5, 0.5])) == 1.0
    with pytest.raises(ValueError):
        tr.w1_1d_closed_form(D([[0.0, 1.0]], [1.0]), a)


def test_emd_matches_brute_force_small():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n1, n2, d = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 3)
        mu = D(rng.random((n1, d)), rng.dirichlet(np.ones(n1)))
        nu = D(rng.random((n2, d)), rng.dirichlet(np.ones(n2)))
        assert abs(tr.emd_w1(mu, nu)[0] - brute_force_w1(mu, nu)) < 1e-9


def _rand_1d(rng, n):
    return D(rng.normal(size=n), rng.dirichlet(np.ones(n)))


def test_emd_matches_closed_form_1d():
    rng = np.random.default_rng(3)
    for _ in range(30):
        mu, nu = _rand_1d(rng, rng.integers(1, 65)), _rand_1d(rng, rng.integers(1, 65))
        assert abs(tr.emd_w1(mu, nu)[0] - tr.w1_1d_closed_form(mu, nu)) < 1e-9


pts = st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6)


@settings(max_examples=40, deadline=None)
@given(pts, pts, pts, st.tuples(st.floats(-10, 10), st.floats(-10, 10)))
def test_metric_axioms_and_translation(a, b, c, shift):
    mu, nu, xi = (D.empirical(np.array(p)) for p in (a, b, c))
    ab, ba = tr.emd_w1(mu, nu)[0], tr.emd_w1(nu, mu)[0]
    assert abs(ab - ba) < 1e-10
    assert tr.emd_w1(mu, mu)[0] < 1e-12
    assert ab <= tr.emd_w1(mu, xi)[0] + tr.emd_w1(xi, nu)[0] + 1e-9
    s = np.array(shift)
    moved = tr.emd_w1(D(mu.support + s, mu.weights), D(nu.support + s, nu.weights))[0]
    assert abs(moved - ab) < 1e-12 * max(1.0, ab) + 1e-11


def test_mean_pairwise_examples():
    same = D.empirical(np.arange(4.0))
    assert tr.mean_pairwise_w1([same, same, same]) == 0.0
    three = [D([0.0], [1.0]), D([1.0], [1.0]), D([0.5], [1.0])]
    # pairwise distances 1, 0.5, 0.5 -> sum 2 -> 2 / ((1)(2))
    assert tr.mean_pairwise_w1(three) == pytest.approx(1.0)
    unit = [D([[0.0, 0.0]], [1.0]), D([[1.0, 0.0]], [1.0]), D([[0.5, np.sqrt(3) / 2]], [1.0])]
    assert tr.mean_pairwise_w1(unit) == pytest.approx(1.5)
    pair = [D([0.0], [1.0]), D([2.0], [1.0])]
    assert tr.mean_pairwise_w1(pair) == tr.emd_w1(*pair)[0] == 2.0
    with pytest.raises(ValueError):
        tr.mean_pairwise_w1(pair[:1])


def test_empirical_subsampling_is_seeded():
    p = np.random.default_rng(0).random((50, 1))
    a = D.empirical(p, cap=10, seed=4)
    b = D.empirical(p, cap=10, seed=4)
    assert a.support.shape == (10, 1) and np.array_equal(a.support, b.support)
    assert np.allclose(a.weights, 0.1)
