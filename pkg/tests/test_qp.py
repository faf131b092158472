import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evgwe.oracle import enumerate_active_sets, qp_oracle
from evgwe.qp import QPFailure, solve_separable_qp


def _instance(seed, n=7, m=3):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n))
    z0 = rng.uniform(0.2, 0.8, n)  # strictly feasible point
    b = A @ z0
    w = rng.uniform(0.5, 3.0, n)
    c = rng.normal(0.5, 1.5, n)
    return A, b, w, c, np.zeros(n), np.ones(n)


@given(st.integers(0, 10_000))
def test_matches_active_set_enumeration(seed):
    A, b, w, c, lo, hi = _instance(seed)
    z = solve_separable_qp(A, b, w, c, lo, hi).z
    ref = enumerate_active_sets(w, -w * c, A, b, lo, hi)
    assert np.max(np.abs(z - ref)) <= 1e-8


def test_batch_equals_individual_solves():
    A, b, w, c, lo, hi = _instance(0)
    rng = np.random.default_rng(1)
    C = c + rng.normal(0, 1, (5, c.size))
    batch = solve_separable_qp(A, np.tile(b, (5, 1)), w, C, lo, hi).z
    for k in range(5):
        assert np.allclose(batch[k], solve_separable_qp(A, b, w, C[k], lo, hi).z, atol=1e-10)


def test_warm_start_does_not_change_the_answer():
    A, b, w, c, lo, hi = _instance(2)
    cold = solve_separable_qp(A, b, w, c, lo, hi)
    warm = solve_separable_qp(A, b, w, c + 1e-3, lo, hi, nu0=cold.nu)
    again = solve_separable_qp(A, b, w, c + 1e-3, lo, hi)
    assert np.allclose(warm.z, again.z, atol=1e-9)


def _disc_instance(seed):
    rng = np.random.default_rng(seed)
    n, m = 8, 3
    A = rng.normal(size=(m, n))
    z0 = np.concatenate([rng.uniform(0.2, 0.8, 4), rng.uniform(-0.3, 0.3, 4)])
    w = np.concatenate([rng.uniform(0.5, 3, 4), np.repeat(rng.uniform(0.5, 3, 2), 2)])
    lo = np.r_[np.zeros(4), np.full(4, -np.inf)]
    hi = np.r_[np.ones(4), np.full(4, np.inf)]
    return A, A @ z0, w, rng.normal(0, 2, n), lo, hi, np.array([[4, 5], [6, 7]]), np.array([0.6, 0.5])


@pytest.mark.parametrize("seed", range(6))
def test_discs_match_qp_oracle(seed):
    A, b, w, c, lo, hi, pairs, radius = _disc_instance(seed)
    got = solve_separable_qp(A, b, w, c, lo, hi, pairs, radius).z
    ref = qp_oracle(w, -w * c, A, b, lo, hi, pairs, radius)
    assert ref.kkt_residual <= 1e-9
    assert np.max(np.abs(got - ref.z)) <= 1e-8


@pytest.mark.parametrize("seed", range(6))
def test_discs_optimal_against_cvxpy(seed):
    A, b, w, c, lo, hi, pairs, radius = _disc_instance(seed)
    got = solve_separable_qp(A, b, w, c, lo, hi, pairs, radius).z
    z = cp.Variable(c.size)
    cons = [A @ z == b, z[:4] >= 0, z[:4] <= 1]
    cons += [cp.norm(z[list(p)]) <= r for p, r in zip(pairs, radius)]
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum(cp.multiply(w, cp.square(z - c)))), cons)
    prob.solve(solver=cp.CLARABEL)
    # conic solvers stop near weakly active cones; compare on the optimal value,
    # which with strong convexity (modulus min w) also bounds the distance
    f = 0.5 * np.sum(w * (got - c) ** 2)
    assert np.max(np.abs(A @ got - b)) <= 1e-9
    assert np.all(np.hypot(got[pairs[:, 0]], got[pairs[:, 1]]) <= radius * (1 + 1e-12))
    assert f <= prob.value + 1e-7
    assert np.linalg.norm(got - z.value) <= np.sqrt(2 * max(0.0, prob.value - f + 1e-7) / w.min()) + 1e-4


def test_infeasible_raises():
    A = np.array([[1.0, 1.0]])
    with pytest.raises(QPFailure):
        solve_separable_qp(A, np.array([5.0]), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))


def test_disc_pairs_reject_finite_boxes():
    with pytest.raises(ValueError):
        solve_separable_qp(np.ones((1, 2)), np.zeros(1), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2),
                           pairs=[[0, 1]], radius=[1.0])
