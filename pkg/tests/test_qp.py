import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskmpc.errors import ContractViolation
from riskmpc.qp import INF, PRIMAL_INFEASIBLE, SOLVED, QpProblem, QpSettings, check_kkt, solve


def random_problem(rng, n=6, m=10, inf_frac=0.2):
    """Feasible instance: the box around ``A z0`` always contains a point."""
    mm = rng.normal(size=(n, n))
    p = mm @ mm.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3
    a = rng.normal(size=(m, n))
    z0 = rng.normal(size=n)
    az = a @ z0
    lo = az - rng.uniform(0.05, 1.0, m)
    hi = az + rng.uniform(0.05, 1.0, m)
    lo[rng.random(m) < inf_frac] = -np.inf
    hi[rng.random(m) < inf_frac] = np.inf
    return QpProblem(p, q, a, lo, hi), z0


def dual_projected_gradient(prob, iters=1_000_000, tol=1e-14):
    """Accelerated projected gradient ascent on the dual of a strictly convex QP.

    Multipliers ``mu >= 0`` for ``A z <= u`` and ``nu >= 0`` for ``A z >= l``;
    ``z(mu, nu) = -P^-1 (q + A'(mu - nu))``.
    """
    p_inv = np.linalg.inv(prob.p_mat)
    a = prob.a_mat
    lip = np.linalg.norm(a @ p_inv @ a.T, 2) * 2.0
    up_ok = prob.u_vec < INF
    lo_ok = prob.l_vec > -INF
    mu = np.zeros(prob.m)
    nu = np.zeros(prob.m)
    ym, yn = mu.copy(), nu.copy()
    t = 1.0
    for _ in range(iters):
        z = -p_inv @ (prob.q_vec + a.T @ (ym - yn))
        az = a @ z
        mu_new = np.where(up_ok, np.maximum(ym + (az - prob.u_vec) / lip, 0.0), 0.0)
        nu_new = np.where(lo_ok, np.maximum(yn + (prob.l_vec - az) / lip, 0.0), 0.0)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        step = max(np.max(np.abs(mu_new - mu)), np.max(np.abs(nu_new - nu)))
        ym = mu_new + (t - 1) / t_new * (mu_new - mu)
        yn = nu_new + (t - 1) / t_new * (nu_new - nu)
        mu, nu, t = mu_new, nu_new, t_new
        if step < tol:
            break
    return -p_inv @ (prob.q_vec + a.T @ (mu - nu))


def test_interior_minimum():
    sol = solve(QpProblem([[1.0]], [0.0], [[1.0]], [-1.0], [1.0]))
    assert sol.status == SOLVED and abs(sol.z_star[0]) <= 1e-8


def test_active_bound():
    # 0.5 (z - 2)^2 = 0.5 z^2 - 2 z + const
    sol = solve(QpProblem([[1.0]], [-2.0], [[1.0]], [-np.inf], [1.0]))
    assert sol.status == SOLVED and abs(sol.z_star[0] - 1.0) <= 1e-8


def test_matches_projected_gradient_oracle():
    rng = np.random.default_rng(42)
    for _ in range(5):
        prob, _ = random_problem(rng)
        sol = solve(prob)
        ref = dual_projected_gradient(prob)
        assert sol.status == SOLVED
        assert abs(prob.objective(sol.z_star) - prob.objective(ref)) <= 1e-4


def test_kkt_of_solution_and_perturbation():
    rng = np.random.default_rng(5)
    prob, _ = random_problem(rng)
    sol = solve(prob)
    prim, dual, comp = check_kkt(prob, sol.z_star, sol.y)
    assert max(prim, dual, comp) <= 1e-6
    for _ in range(20):
        dz = rng.normal(size=prob.n)
        z = sol.z_star + 0.1 * dz / np.max(np.abs(dz))
        prim, dual, _ = check_kkt(prob, z, sol.y)
        assert max(prim, dual) > 1e-3


def test_complementarity_zero_for_inactive():
    prob = QpProblem(np.eye(2), [0.0, 0.0], np.eye(2), [-1.0, -1.0], [1.0, 1.0])
    _, _, comp = check_kkt(prob, np.array([0.5, -0.2]), np.zeros(2))
    assert comp == 0.0


def test_repeat_is_bit_identical():
    prob, _ = random_problem(np.random.default_rng(9))
    s1, s2 = solve(prob), solve(prob)
    assert s1.z_star.tobytes() == s2.z_star.tobytes()


def test_scaling_invariance():
    prob, _ = random_problem(np.random.default_rng(10))
    scaled = QpProblem(7.5 * prob.p_mat, 7.5 * prob.q_vec, prob.a_mat, prob.l_vec, prob.u_vec)
    assert np.max(np.abs(solve(prob).z_star - solve(scaled).z_star)) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_beats_random_feasible_points(seed):
    rng = np.random.default_rng(seed)
    prob, z0 = random_problem(rng, n=4, m=6)
    sol = solve(prob)
    assert sol.status == SOLVED
    f_star = prob.objective(sol.z_star)
    found = 0
    while found < 100:
        z = z0 + rng.normal(size=prob.n) * rng.uniform(0.01, 0.5)
        az = prob.a_mat @ z
        if np.all(az >= prob.l_vec) and np.all(az <= prob.u_vec):
            found += 1
            assert f_star <= prob.objective(z) + 1e-9


def test_detects_primal_infeasibility():
    # z <= -1 and z >= 1
    prob = QpProblem([[1.0]], [0.0], [[1.0], [1.0]], [-np.inf, 1.0], [-1.0, np.inf])
    assert solve(prob).status == PRIMAL_INFEASIBLE


def test_max_iter_status():
    prob, _ = random_problem(np.random.default_rng(1))
    sol = solve(prob, QpSettings(max_iter=1, polish=False))
    assert sol.status != SOLVED or sol.iterations <= 1


def test_problem_validation():
    with pytest.raises(ContractViolation):
        QpProblem([[1.0, 2.0], [0.0, 1.0]], [0, 0], np.eye(2), [0, 0], [1, 1])
    with pytest.raises(ContractViolation):
        QpProblem(np.eye(1), [0.0], [[1.0]], [1.0], [0.0])
