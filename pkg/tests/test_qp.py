import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeode.numerics import finite_diff_grad, finite_diff_jac
from safeode.qp import (
    DegenerateActiveSetError,
    QpInfeasibleError,
    QpProblem,
    ZeroConstraintRowError,
    qp_backward,
    qp_jacobian_full,
    qp_project_halfspace,
    qp_solve,
    x_block_slices,
)


def _random_problem(rng, n, m, p):
    M = rng.normal(size=(n, n))
    Q = M @ M.T + np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(m, n)) if m else None
    b = rng.normal(size=m) if m else None
    G = rng.normal(size=(p, n)) if p else None
    h = rng.normal(size=p) if p else None
    return QpProblem(Q, q, A, b, G, h)


def _margin(prob, sol):
    if prob.p == 0:
        return np.inf
    return float(np.min(np.maximum(sol.lambda_star,
                                   prob.h - prob.G @ sol.u_star)))


# ---------------------------------------------------------------- forward


def test_unconstrained_minimizer():
    sol = qp_solve(QpProblem(np.array([[1.0]]), np.array([-2.0])))
    assert np.allclose(sol.u_star, [2.0])
    assert sol.nu_star.size == 0 and sol.lambda_star.size == 0


def test_active_halfspace():
    prob = QpProblem(np.eye(2), np.array([-1.0, -1.0]),
                     G=np.array([[1.0, 0.0]]), h=np.array([0.0]))
    sol = qp_solve(prob)
    assert np.allclose(sol.u_star, [0.0, 1.0], atol=1e-9)
    assert np.allclose(sol.lambda_star, [1.0], atol=1e-9)


def test_inactive_constraint():
    prob = QpProblem(np.eye(2), np.array([-1.0, -1.0]),
                     G=np.array([[1.0, 0.0]]), h=np.array([5.0]))
    sol = qp_solve(prob)
    assert np.allclose(sol.u_star, [1.0, 1.0], atol=1e-9)
    assert np.allclose(sol.lambda_star, [0.0])


def test_equality_constrained():
    # minimize 1/2||u||^2 s.t. u1 + u2 = 2 -> u = (1, 1)
    prob = QpProblem(np.eye(2), np.zeros(2), A=np.array([[1.0, 1.0]]),
                     b=np.array([2.0]))
    sol = qp_solve(prob)
    assert np.allclose(sol.u_star, [1.0, 1.0], atol=1e-9)


def test_infeasible_raises():
    # u <= 0 and -u <= -1 cannot both hold
    prob = QpProblem(np.array([[1.0]]), np.zeros(1),
                     G=np.array([[1.0], [-1.0]]), h=np.array([0.0, -1.0]))
    with pytest.raises(QpInfeasibleError):
        qp_solve(prob)


def test_q_symmetrized_on_construction():
    prob = QpProblem(np.array([[2.0, 1.0], [0.0, 2.0]]), np.zeros(2))
    assert np.allclose(prob.Q, prob.Q.T)


def test_non_psd_rejected():
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2))


def test_joint_presence_rejected():
    with pytest.raises(ValueError):
        QpProblem(np.eye(1), np.zeros(1), G=np.array([[1.0]]), h=None)


def test_kkt_residual_small():
    rng = np.random.default_rng(2)
    for _ in range(50):
        prob = _random_problem(rng, 3, 0, 2)
        try:
            sol = qp_solve(prob)
        except QpInfeasibleError:
            continue
        assert sol.kkt_residual <= 1e-8
        # complementary slackness elementwise
        viol = prob.G @ sol.u_star - prob.h
        assert np.max(np.abs(sol.lambda_star * viol)) <= 1e-8
        assert np.min(sol.lambda_star) >= -1e-8
        assert np.max(viol) <= 1e-8


def test_scaling_invariance():
    rng = np.random.default_rng(4)
    prob = _random_problem(rng, 2, 0, 2)
    try:
        base = qp_solve(prob).u_star
    except QpInfeasibleError:
        pytest.skip("sampled infeasible instance")
    for c in (0.5, 2.0, 10.0):
        scaled = QpProblem(c * prob.Q, c * prob.q, G=prob.G, h=prob.h)
        assert np.allclose(qp_solve(scaled).u_star, base, atol=1e-8)


# ------------------------------------------------- half-space projection


def test_project_pushes_to_plane():
    u, lam = qp_project_halfspace(np.array([2.0, 0.0]),
                                  np.array([1.0, 0.0]), 1.0)
    assert np.allclose(u, [1.0, 0.0])
    assert lam == pytest.approx(1.0)


def test_project_feasible_point_unchanged():
    u, lam = qp_project_halfspace(np.zeros(2), np.array([0.3, -0.7]), 1.0)
    assert np.allclose(u, 0.0)
    assert lam == 0.0


def test_project_1d():
    u, lam = qp_project_halfspace(np.array([3.0]), np.array([1.0]), 0.0)
    assert np.allclose(u, [0.0])
    assert lam == pytest.approx(3.0)


def test_project_zero_row_raises():
    with pytest.raises(ZeroConstraintRowError):
        qp_project_halfspace(np.ones(2), np.zeros(2), 1.0)


def test_project_matches_grid_search():
    # brute-force the feasible half-space on a grid
    u_ref = np.array([2.0, 0.0])
    g = np.array([1.0, 0.0])
    h = 1.0
    grid = np.linspace(-3, 3, 601)
    best, best_val = None, np.inf
    for a in grid:
        for b in (0.0,):  # optimum keeps the unconstrained coordinate
            u = np.array([a, b])
            if g @ u <= h + 1e-12:
                val = 0.5 * np.sum((u - u_ref) ** 2)
                if val < best_val:
                    best, best_val = u, val
    proj, _ = qp_project_halfspace(u_ref, g, h)
    assert np.allclose(proj, best, atol=2e-2)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_solver_matches_projection_oracle(n, seed):
    rng = np.random.default_rng(seed)
    u_ref = rng.normal(size=n) * 3.0
    g = rng.normal(size=n)
    if np.linalg.norm(g) < 1e-6:
        return
    h = float(rng.normal()) * 2.0
    u_oracle, lam_oracle = qp_project_halfspace(u_ref, g, h)
    sol = qp_solve(QpProblem(np.eye(n), -u_ref, G=g[None, :],
                             h=np.array([h])))
    assert np.max(np.abs(sol.u_star - u_oracle)) <= 1e-8
    assert abs(sol.lambda_star[0] - lam_oracle) <= 1e-8


# ------------------------------------------------------------- backward


def test_backward_unconstrained_1d():
    prob = QpProblem(np.array([[2.0]]), np.array([1.0]))
    sol = qp_solve(prob)
    grads = qp_backward(prob, sol, np.array([1.0]))
    assert grads.dq == pytest.approx(-0.5)


def test_backward_inactive_constraint_dh_zero():
    prob = QpProblem(np.eye(2), np.array([-1.0, -1.0]),
                     G=np.array([[1.0, 0.0]]), h=np.array([5.0]))
    sol = qp_solve(prob)
    grads = qp_backward(prob, sol, np.array([1.0, 1.0]))
    assert np.allclose(grads.dh, 0.0)
    assert np.allclose(grads.dG, 0.0)


def test_backward_matches_fd_on_active_case():
    prob = QpProblem(np.eye(2), np.array([-1.0, -1.0]),
                     G=np.array([[1.0, 0.0]]), h=np.array([0.0]))
    sol = qp_solve(prob)
    w = np.array([0.7, -0.4])
    grads = qp_backward(prob, sol, w)

    def loss_q(q):
        return float(w @ qp_solve(QpProblem(prob.Q, q, G=prob.G,
                                            h=prob.h)).u_star)

    def loss_h(h):
        return float(w @ qp_solve(QpProblem(prob.Q, prob.q, G=prob.G,
                                            h=h)).u_star)

    assert np.allclose(grads.dq, finite_diff_grad(loss_q, prob.q), atol=1e-6)
    assert np.allclose(grads.dh, finite_diff_grad(loss_h, prob.h), atol=1e-6)


def test_backward_fd_all_data_random():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 25:
        n = int(rng.integers(1, 4))
        p = int(rng.integers(0, 3))
        m = int(rng.integers(0, 2)) if n > 1 else 0
        prob = _random_problem(rng, n, m, p)
        try:
            sol = qp_solve(prob)
        except QpInfeasibleError:
            continue
        if _margin(prob, sol) < 1e-4:
            continue
        checked += 1
        w = rng.normal(size=n)
        grads = qp_backward(prob, sol, w)

        def loss(name, flat, shape):
            def inner(vec):
                data = dict(Q=prob.Q, q=prob.q, A=prob.A, b=prob.b,
                            G=prob.G, h=prob.h)
                data[name] = vec.reshape(shape)
                return float(w @ qp_solve(QpProblem(**data)).u_star)
            return inner

        pairs = [("q", grads.dq, (n,)), ("Q", grads.dQ, (n, n))]
        if p:
            pairs += [("h", grads.dh, (p,)), ("G", grads.dG, (p, n))]
        if m:
            pairs += [("b", grads.db, (m,)), ("A", grads.dA, (m, n))]
        for name, analytic, shape in pairs:
            flat = np.asarray(getattr(prob, name)).ravel()
            fd = finite_diff_grad(loss(name, flat, shape), flat, eps=1e-6)
            assert np.allclose(np.asarray(analytic).ravel(), fd,
                               rtol=1e-4, atol=1e-6), name


def test_backward_degenerate_raises_and_inactive_fallback():
    # constraint exactly touching the unconstrained optimum: lam=0, slack=0
    prob = QpProblem(np.eye(1), np.array([-1.0]), G=np.array([[1.0]]),
                     h=np.array([1.0]))
    sol = qp_solve(prob)
    with pytest.raises(DegenerateActiveSetError):
        qp_backward(prob, sol, np.array([1.0]))
    grads = qp_backward(prob, sol, np.array([1.0]), degenerate="inactive")
    # feasible-side limit: constraint ignored, du*/dq = -Q^-1
    assert grads.dq == pytest.approx(-1.0)
    assert np.allclose(grads.dh, 0.0)


# -------------------------------------------------------- full Jacobian


def test_jacobian_unconstrained_q_block():
    prob = QpProblem(np.eye(2), np.array([0.3, -0.2]))
    sol = qp_solve(prob)
    J = qp_jacobian_full(prob, sol)
    cols = x_block_slices(2, 0, 0)
    assert np.allclose(J[:2, cols["q"]], -np.eye(2))


def test_jacobian_projection_h_sensitivity():
    g = np.array([1.0, 2.0])
    prob = QpProblem(np.eye(2), np.array([-3.0, -3.0]), G=g[None, :],
                     h=np.array([0.0]))
    sol = qp_solve(prob)
    J = qp_jacobian_full(prob, sol)
    cols = x_block_slices(2, 0, 1)
    assert np.allclose(J[:2, cols["h"]].ravel(), g / (g @ g), atol=1e-9)


def test_jacobian_directional_fd():
    rng = np.random.default_rng(21)
    checked = 0
    while checked < 10:
        n = int(rng.integers(1, 4))
        p = int(rng.integers(0, 3))
        prob = _random_problem(rng, n, 0, p)
        try:
            sol = qp_solve(prob)
        except QpInfeasibleError:
            continue
        if _margin(prob, sol) < 1e-3:
            continue
        checked += 1
        J = qp_jacobian_full(prob, sol)
        cols = x_block_slices(n, 0, p)
        dQ = rng.normal(size=(n, n))
        dQ = 0.5 * (dQ + dQ.T)
        dq = rng.normal(size=n)
        dG = rng.normal(size=(p, n)) if p else None
        dh = rng.normal(size=p) if p else None
        eps = 1e-6

        def solve_pert(sign):
            data = dict(
                Q=prob.Q + sign * eps * dQ, q=prob.q + sign * eps * dq,
                G=None if p == 0 else prob.G + sign * eps * dG,
                h=None if p == 0 else prob.h + sign * eps * dh)
            return qp_solve(QpProblem(**data)).u_star

        fd = (solve_pert(+1) - solve_pert(-1)) / (2 * eps)
        dX = np.zeros(J.shape[1])
        dX[cols["Q"]] = dQ.ravel()
        dX[cols["q"]] = dq
        if p:
            dX[cols["G"]] = dG.ravel()
            dX[cols["h"]] = dh
        assert np.allclose((J @ dX)[:n], fd, rtol=1e-5, atol=1e-7)


def test_jacobian_consistent_with_backward():
    prob = QpProblem(np.eye(2), np.array([-1.0, -1.0]),
                     G=np.array([[1.0, 0.0]]), h=np.array([0.0]))
    sol = qp_solve(prob)
    J = qp_jacobian_full(prob, sol)
    cols = x_block_slices(2, 0, 1)
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1.0
        grads = qp_backward(prob, sol, e)
        assert np.allclose(grads.dq, J[i, cols["q"]], atol=1e-8)
        assert np.allclose(grads.dh, J[i, cols["h"]], atol=1e-8)
