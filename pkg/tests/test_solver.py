import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpal.linops import dense_operator, finite_difference_2d, identity_operator
from vpal.problems import ProblemInstance, build_problem
from vpal.solver import (
    DegenerateDirection,
    SolverDivergence,
    SolverOptions,
    admm_solve,
    exact_line_search,
    f_joint,
    f_proj,
    linearized_step,
    outer_stop,
    shrink,
    shrinkage_map,
    vpal_gradient,
    vpal_solve,
)


def _grid_argmin(d, gamma, step=1e-4):
    """Minimiser of ``gamma |y| + (d - y)^2 / 2`` on a grid of spacing ``step``."""
    grid = np.arange(-abs(d) - 1.0, abs(d) + 1.0 + step, step)
    return grid[np.argmin(gamma * np.abs(grid) + 0.5 * (d - grid) ** 2)]


def _random_dense(m, n, ell, seed):
    rng = np.random.default_rng(seed)
    A, D = rng.standard_normal((m, n)), rng.standard_normal((ell, n))
    return A, D, rng.standard_normal(m), rng


def _lasso_oracle(A, b, mu, iters=200_000, tol=1e-13):
    """FISTA on ``||Ax - b||^2 / 2 + mu ||x||_1``."""
    L = np.linalg.norm(A, 2) ** 2
    x = z = np.zeros(A.shape[1])
    t = 1.0
    for _ in range(iters):
        x_new = shrink(z - A.T @ (A @ z - b) / L, mu / L)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = x_new + (t - 1) / t_new * (x_new - x)
        if np.linalg.norm(x_new - x) <= tol * (1 + np.linalg.norm(x)):
            return x_new
        x, t = x_new, t_new
    return x


def _lasso_problem(A, b):
    n = A.shape[1]
    return ProblemInstance(dense_operator(A), identity_operator(n), b)


# ---------------------------------------------------------------- shrinkage


def test_shrink_examples():
    np.testing.assert_array_equal(shrink(np.array([2.0, -0.5, 0.0]), 1.0), [1.0, 0.0, 0.0])
    d = np.array([0.3, -2.0, 0.0])
    np.testing.assert_array_equal(shrink(d, 0.0), d)
    with pytest.raises(ValueError):
        shrink(d, -1.0)


def test_shrink_random_vector_matches_grid():
    d = np.random.default_rng(0).standard_normal(5)
    out = shrink(d, 0.3)
    for di, oi in zip(d, out):
        assert abs(oi - _grid_argmin(di, 0.3)) <= 1e-4


@settings(max_examples=200, deadline=None)
@given(d=st.floats(-5, 5), gamma=st.floats(0, 3))
def test_shrink_grid_oracle_property(d, gamma):
    assert abs(shrink(np.array([d]), gamma)[0] - _grid_argmin(d, gamma)) <= 1e-4


def test_shrinkage_map_examples():
    D = finite_difference_2d(3, 3)
    assert not np.any(shrinkage_map(np.zeros(9), np.zeros(18), D, 0.5))
    x = np.random.default_rng(1).standard_normal(4)
    np.testing.assert_array_equal(shrinkage_map(x, np.zeros(4), identity_operator(4), 0.2), shrink(x, 0.2))
    A, Dm, b, rng = _random_dense(5, 4, 6, 2)
    c = rng.standard_normal(6)
    np.testing.assert_allclose(shrinkage_map(x, c, dense_operator(Dm), 0.2), shrink(Dm @ x + c, 0.2))


# ---------------------------------------------------------------- objectives


def test_f_joint_examples_and_dense_oracle():
    A, Dm, b, rng = _random_dense(6, 4, 5, 3)
    Aop, Dop = dense_operator(A), dense_operator(Dm)
    mu, lam = 0.7, 1.3
    zero_n, zero_l = np.zeros(4), np.zeros(5)
    assert f_joint(zero_n, zero_l, zero_l, Aop, Dop, b, mu, lam) == pytest.approx(0.5 * b @ b)
    x, c = rng.standard_normal(4), rng.standard_normal(5)
    y = Dm @ x + c
    assert f_joint(x, y, c, Aop, Dop, b, mu, lam) == pytest.approx(
        0.5 * np.sum((A @ x - b) ** 2) + mu * np.abs(y).sum()
    )
    y = rng.standard_normal(5)
    ref = 0.5 * np.sum((A @ x - b) ** 2) + mu * np.abs(y).sum() + 0.5 * lam**2 * np.sum((Dm @ x - y + c) ** 2)
    assert f_joint(x, y, c, Aop, Dop, b, mu, lam) == pytest.approx(ref, rel=1e-12)


def test_projection_properties():
    A, Dm, b, rng = _random_dense(7, 5, 6, 4)
    Aop, Dop = dense_operator(A), dense_operator(Dm)
    mu, lam = 0.9, 0.8
    for _ in range(20):
        x, c = rng.standard_normal(5), rng.standard_normal(6)
        z = shrinkage_map(x, c, Dop, mu / lam**2)
        fp = f_proj(x, c, Aop, Dop, b, mu, lam)
        assert fp == f_joint(x, z, c, Aop, Dop, b, mu, lam)
        for _ in range(50):
            y = z + rng.standard_normal(6) * rng.choice([1e-3, 1.0, 10.0])
            assert fp <= f_joint(x, y, c, Aop, Dop, b, mu, lam)


def test_f_proj_mu_zero_is_data_term():
    A, Dm, b, rng = _random_dense(5, 3, 4, 5)
    x, c = rng.standard_normal(3), rng.standard_normal(4)
    val = f_proj(x, c, dense_operator(A), dense_operator(Dm), b, 0.0, 2.0)
    assert val == pytest.approx(0.5 * np.sum((A @ x - b) ** 2), rel=1e-14)


# ---------------------------------------------------------------- direction and steps


def test_vpal_gradient_zero_state():
    A, Dm, b, _ = _random_dense(5, 3, 4, 6)
    r, g = vpal_gradient(np.zeros(3), np.zeros(4), np.zeros(4), dense_operator(A), dense_operator(Dm), b, 1.5)
    np.testing.assert_allclose(r, np.concatenate([-b, np.zeros(4)]))
    np.testing.assert_allclose(g, -A.T @ b)


def test_vpal_gradient_dense_oracle_and_stationary_point():
    A, Dm, b, rng = _random_dense(6, 4, 5, 7)
    lam = 0.6
    x, y, c = rng.standard_normal(4), rng.standard_normal(5), rng.standard_normal(5)
    M = np.vstack([A, lam * Dm])
    rhs = np.concatenate([b, lam * (y - c)])
    r, g = vpal_gradient(x, y, c, dense_operator(A), dense_operator(Dm), b, lam)
    np.testing.assert_allclose(r, M @ x - rhs, atol=1e-12)
    np.testing.assert_allclose(g, M.T @ (M @ x - rhs), atol=1e-12)
    x_ls = np.linalg.solve(M.T @ M, M.T @ rhs)
    _, g_ls = vpal_gradient(x_ls, y, c, dense_operator(A), dense_operator(Dm), b, lam)
    assert np.linalg.norm(g_ls) <= 1e-10 * np.linalg.norm(M.T @ rhs)


def test_linearized_step_examples():
    g = np.array([1.0, -2.0, 0.5])
    I3 = identity_operator(3)
    assert linearized_step(g, I3, I3, 0.0) == pytest.approx(1.0)
    assert linearized_step(g, dense_operator(2 * np.eye(3)), I3, 0.0) == pytest.approx(0.25)
    with pytest.raises(DegenerateDirection):
        linearized_step(np.zeros(3), I3, I3, 1.0)


def test_linearized_step_is_quadratic_minimiser():
    A, Dm, b, rng = _random_dense(7, 4, 5, 8)
    lam = 0.9
    x, y, c = rng.standard_normal(4), rng.standard_normal(5), rng.standard_normal(5)
    M = np.vstack([A, lam * Dm])
    rhs = np.concatenate([b, lam * (y - c)])
    _, g = vpal_gradient(x, y, c, dense_operator(A), dense_operator(Dm), b, lam)
    # d/da ||M(x - a g) - rhs||^2 = 0
    res, Mg = M @ x - rhs, M @ g
    alpha_ref = (res @ Mg) / (Mg @ Mg)
    assert linearized_step(g, dense_operator(A), dense_operator(Dm), lam) == pytest.approx(alpha_ref, rel=1e-12)


def test_exact_step_mu_zero_closed_form():
    # with mu = 0 the projected objective is 1/2 ||A x - b||^2, minimised at g^T g / ||A g||^2
    A, Dm, b, rng = _random_dense(6, 4, 5, 9)
    Aop, Dop = dense_operator(A), dense_operator(Dm)
    x, c = rng.standard_normal(4), np.zeros(5)
    y = Dm @ x + c
    for lam in (1.1, 1e-4):
        _, g = vpal_gradient(x, y, c, Aop, Dop, b, lam)
        a_ex = exact_line_search(x, g, c, Aop, Dop, b, 0.0, lam)
        assert a_ex == pytest.approx((g @ g) / np.sum((A @ g) ** 2), rel=1e-6)
    # the linearized step charges lam^2 ||D g||^2 too, so it matches only as lam -> 0
    a_lin = linearized_step(g, Aop, Dop, 1e-4)
    assert abs(a_ex - a_lin) <= 1e-6 * a_lin


def test_exact_step_beats_grid():
    A, Dm, b, rng = _random_dense(6, 4, 5, 10)
    Aop, Dop = dense_operator(A), dense_operator(Dm)
    mu, lam = 0.8, 0.7
    x, c = rng.standard_normal(4), rng.standard_normal(5)
    y = shrinkage_map(x, c, Dop, mu / lam**2)
    _, g = vpal_gradient(x, y, c, Aop, Dop, b, lam)
    a = exact_line_search(x, g, c, Aop, Dop, b, mu, lam)
    a_lin = linearized_step(g, Aop, Dop, lam)
    grid = np.linspace(0, 4 * a_lin, 1001)
    vals = [f_proj(x - t * g, c, Aop, Dop, b, mu, lam) for t in grid]
    best = min(vals)
    assert f_proj(x - a * g, c, Aop, Dop, b, mu, lam) <= best + 1e-12 * (1 + abs(best))


def test_linearized_underestimates_exact_on_tv_denoise():
    prob = build_problem("denoise", 16, 0.1, "tv", seed=0)
    mu, lam = 10.0, 0.3
    x, c = prob.b.copy(), np.zeros(prob.ell)
    y = shrinkage_map(x, c, prob.D, mu / lam**2)
    _, g = vpal_gradient(x, y, c, prob.A, prob.D, prob.b, lam)
    a_lin = linearized_step(g, prob.A, prob.D, lam)
    assert a_lin <= exact_line_search(x, g, c, prob.A, prob.D, prob.b, mu, lam)


def test_outer_stop_examples():
    x = np.array([1.0, 2.0])
    assert outer_stop(3.0, 3.0, x, x, 1e-4)
    assert not outer_stop(11.0, 1.0, x, x, 1e-4)
    tau, f_curr = 0.25, 3.0
    assert outer_stop(f_curr + tau * (1 + f_curr), f_curr, x, x, tau)
    assert not outer_stop(3.0, 3.0, x, x + 10.0, 1e-4)
    # an objective increase counts as no decrease
    assert outer_stop(1.0, 5.0, x, x, 1e-4)


# ---------------------------------------------------------------- full solves


@pytest.mark.parametrize("solve", [vpal_solve, admm_solve])
def test_mu_zero_gives_least_squares(solve):
    A, _, b, _ = _random_dense(8, 5, 1, 11)
    opts = SolverOptions(mu=0.0, lam=1.0, tol=1e-14, max_outer=20000, admm_inner_tol=1e-12)
    res = solve(_lasso_problem(A, b), opts)
    ref = np.linalg.lstsq(A, b, rcond=None)[0]
    assert np.linalg.norm(res.x_hat - ref) <= 1e-6 * np.linalg.norm(ref)


@pytest.mark.parametrize("solve", [vpal_solve, admm_solve])
def test_large_mu_gives_zero(solve):
    A, _, b, _ = _random_dense(8, 5, 1, 12)
    mu = 1.01 * np.max(np.abs(A.T @ b))
    opts = SolverOptions(mu=mu, lam=1.0, tol=1e-20, max_outer=20000, admm_inner_tol=1e-12)
    res = solve(_lasso_problem(A, b), opts)
    assert np.max(np.abs(res.x_hat)) <= 1e-8


def test_lasso_matches_proximal_oracle_and_admm():
    A, _, b, _ = _random_dense(6, 4, 1, 13)
    mu = 0.5
    ref = _lasso_oracle(A, b, mu)
    grad = A.T @ (A @ ref - b)
    nz = np.abs(ref) > 1e-9
    assert np.all(np.abs(grad[nz] + mu * np.sign(ref[nz])) <= 1e-8)
    assert np.all(np.abs(grad[~nz]) <= mu + 1e-8)
    prob = _lasso_problem(A, b)
    xv = vpal_solve(prob, SolverOptions(mu=mu, lam=1.0, tol=1e-14, max_outer=50000)).x_hat
    assert np.linalg.norm(xv - ref) <= 1e-6 * np.linalg.norm(ref)
    opts6 = SolverOptions(mu=mu, lam=1.0, tol=1e-6, max_outer=50000)
    xv6 = vpal_solve(prob, opts6).x_hat
    xa6 = admm_solve(prob, opts6).x_hat
    assert np.linalg.norm(xa6 - xv6) <= 1e-3 * np.linalg.norm(xv6)


def test_tv_denoise_objectives_agree():
    prob = build_problem("denoise", 16, 0.1, "tv", seed=0)
    opts = SolverOptions(mu=10.0, lam=0.3, tol=1e-6, max_outer=5000)
    fv = vpal_solve(prob, opts).final_objective
    fa = admm_solve(prob, opts).final_objective
    assert abs(fv - fa) <= 1e-4 * abs(fv)


def test_counter_accounting_single_step():
    prob = build_problem("denoise", 8, 0.1, "tv", seed=1)
    res = vpal_solve(prob, SolverOptions(mu=5.0, lam=0.5, tol=1e-6, max_outer=40))
    k = res.total_inner_iterations
    assert k == res.outer_iterations
    for name in ("A", "D"):
        cnt = res.matvecs_by_operator[name]
        assert (cnt.forward_count, cnt.adjoint_count) == (2 * k, k)
    assert res.matvecs.total == 6 * k
    assert len(res.forward_history) == res.outer_iterations + 1


def test_history_lengths_and_final_objective_below_initial():
    prob = build_problem("blur", 16, 0.1, "tv", seed=2)
    res = vpal_solve(prob, SolverOptions(mu=10.0, lam=0.3, tol=1e-4))
    n = res.outer_iterations + 1
    assert len(res.objective_history) == len(res.residual_history) == len(res.error_history) == n
    assert res.objective_history[-1] <= res.objective_history[0]
    assert res.converged and res.termination_reason == "converged"


def test_max_outer_reports_non_convergence():
    prob = build_problem("blur", 16, 0.1, "tv", seed=2)
    res = vpal_solve(prob, SolverOptions(mu=10.0, lam=0.3, tol=1e-12, max_outer=5))
    assert res.outer_iterations == 5
    assert not res.converged and res.termination_reason == "max_outer"


def test_descent_with_exact_line_search_fixed_c():
    A, Dm, b, rng = _random_dense(10, 6, 8, 14)
    Aop, Dop = dense_operator(A), dense_operator(Dm)
    mu, lam = 0.6, 0.9
    c = rng.standard_normal(8)
    x = rng.standard_normal(6)
    prev = f_proj(x, c, Aop, Dop, b, mu, lam)
    for _ in range(100):
        y = shrinkage_map(x, c, Dop, mu / lam**2)
        _, g = vpal_gradient(x, y, c, Aop, Dop, b, lam)
        if not np.any(g):
            break
        x = x - exact_line_search(x, g, c, Aop, Dop, b, mu, lam) * g
        cur = f_proj(x, c, Aop, Dop, b, mu, lam)
        assert cur <= prev + 1e-12 * abs(prev)
        prev = cur


def test_iterate_to_tol_mode_runs_multiple_inner_steps():
    prob = build_problem("denoise", 8, 0.1, "tv", seed=3)
    opts = SolverOptions(mu=5.0, lam=0.5, tol=1e-6, inner_mode="iterate_to_tol", step_rule="exact_line_search")
    res = vpal_solve(prob, opts)
    ref = admm_solve(prob, SolverOptions(mu=5.0, lam=0.5, tol=1e-6)).x_hat
    assert res.total_inner_iterations > res.outer_iterations
    assert np.linalg.norm(res.x_hat - ref) <= 1e-3 * np.linalg.norm(ref)


def test_fixed_point_is_stationary():
    A, _, b, _ = _random_dense(8, 5, 1, 15)
    prob = _lasso_problem(A, b)
    opts = SolverOptions(mu=0.4, lam=1.0, tol=1e-30, max_outer=20000)
    res = vpal_solve(prob, opts)
    again = vpal_solve(prob, SolverOptions(mu=0.4, lam=1.0, max_outer=1), x0=res.x_hat, y0=res.y, c0=res.c)
    assert np.max(np.abs(again.x_hat - res.x_hat)) <= 1e-10


def test_divergence_guard():
    prob = ProblemInstance(identity_operator(4), finite_difference_2d(2, 2), np.array([1.0, 3.0, 0.0, 2.0]))
    x0 = np.array([1e308, -1e308, 1e308, -1e308])
    for solve in (vpal_solve, admm_solve):
        with pytest.raises(SolverDivergence), np.errstate(all="ignore"):
            solve(prob, SolverOptions(mu=1.0, lam=1.0), x0=x0)


def test_non_finite_data_rejected():
    with pytest.raises(ValueError):
        ProblemInstance(identity_operator(2), identity_operator(2), np.array([1.0, np.inf]))


def test_options_validation_and_gamma():
    with pytest.raises(ValueError):
        SolverOptions(mu=-1.0, lam=1.0)
    with pytest.raises(ValueError):
        SolverOptions(mu=1.0, lam=0.0)
    with pytest.raises(ValueError):
        SolverOptions(mu=1.0, lam=1.0, inner_mode="bogus")
    opts = SolverOptions.from_gamma(2.0, 0.5)
    assert opts.lam == pytest.approx(2.0) and opts.gamma == pytest.approx(0.5)
