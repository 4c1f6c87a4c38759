import numpy as np
import pytest

from safeode.numerics import (
    SingularMatrixError,
    finite_diff_grad,
    finite_diff_jac,
    kron,
    solve_linear,
)


def test_solve_identity():
    assert np.allclose(solve_linear(np.eye(2), np.array([3.0, -1.0])),
                       [3.0, -1.0])


def test_solve_diagonal():
    M = np.array([[2.0, 0.0], [0.0, 4.0]])
    assert np.allclose(solve_linear(M, np.array([2.0, 8.0])), [1.0, 2.0])


def test_solve_residual_random():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(5, 5)) + 5.0 * np.eye(5)
    r = rng.normal(size=5)
    s = solve_linear(M, r)
    assert np.max(np.abs(M @ s - r)) <= 1e-9 * (1.0 + np.max(np.abs(r)))


def test_solve_matrix_rhs():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(4, 4)) + 4.0 * np.eye(4)
    R = rng.normal(size=(4, 3))
    S = solve_linear(M, R)
    assert np.allclose(M @ S, R, atol=1e-10)


def test_solve_singular_raises():
    M = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularMatrixError):
        solve_linear(M, np.ones(2))


def test_solve_near_singular_pivot_raises():
    M = np.array([[1.0, 0.0], [0.0, 1e-14]])
    with pytest.raises(SingularMatrixError):
        solve_linear(M, np.ones(2))


def test_solve_shape_errors():
    with pytest.raises(ValueError):
        solve_linear(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        solve_linear(np.eye(2), np.ones(3))


def test_solve_roundtrip_well_conditioned():
    # multiply-then-solve is the identity to 1e-8 relative for cond < 1e6
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = rng.integers(2, 7)
        U, _ = np.linalg.qr(rng.normal(size=(n, n)))
        V, _ = np.linalg.qr(rng.normal(size=(n, n)))
        sing = np.exp(rng.uniform(-2.5, 2.5, size=n))  # cond <= 1e5
        M = U @ np.diag(sing) @ V
        s = rng.normal(size=n)
        back = solve_linear(M, M @ s)
        assert np.max(np.abs(back - s)) <= 1e-8 * (1.0 + np.max(np.abs(s)))


def test_kron_identity():
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose(kron(np.eye(1), M), M)


def test_kron_hand_expansion():
    out = kron(np.array([[1.0, 2.0]]), np.array([[0.0], [3.0]]))
    assert np.allclose(out, [[0.0, 0.0], [3.0, 6.0]])


def test_kron_shapes():
    out = kron(np.ones((2, 3)), np.ones((4, 5)))
    assert out.shape == (8, 15)


def test_kron_mixed_product():
    # (A (x) B)(C (x) D) == (AC) (x) (BD)
    rng = np.random.default_rng(3)
    for _ in range(10):
        A, C = rng.normal(size=(2, 2, 2))
        B, D = rng.normal(size=(2, 3, 3))
        assert np.allclose(kron(A, B) @ kron(C, D), kron(A @ C, B @ D))


def test_finite_diff_quadratic():
    f = lambda v: 0.5 * float(v @ v)
    g = finite_diff_grad(f, np.array([1.0, -2.0]), eps=1e-5)
    assert np.allclose(g, [1.0, -2.0], atol=1e-6)


def test_finite_diff_constant():
    g = finite_diff_grad(lambda v: 7.0, np.array([1.0, 2.0, 3.0]))
    assert np.allclose(g, 0.0)


def test_finite_diff_sin():
    g = finite_diff_grad(lambda v: float(np.sin(v[0])), np.array([0.0]))
    assert np.allclose(g, [1.0], atol=1e-8)


def test_finite_diff_cubic_order():
    # error on polynomials of degree <= 3 is O(eps^2)
    rng = np.random.default_rng(5)
    c3, c2, c1 = rng.normal(size=3)

    def f(v):
        return float(c3 * v[0] ** 3 + c2 * v[0] ** 2 + c1 * v[0])

    x = np.array([0.7])
    exact = 3 * c3 * 0.7 ** 2 + 2 * c2 * 0.7 + c1
    for eps in (1e-3, 1e-4):
        err = abs(finite_diff_grad(f, x, eps)[0] - exact)
        assert err <= 10.0 * abs(c3) * eps ** 2 + 1e-10


def test_finite_diff_jac_linear():
    rng = np.random.default_rng(9)
    M = rng.normal(size=(3, 4))
    J = finite_diff_jac(lambda v: M @ v, np.zeros(4))
    assert np.allclose(J, M, atol=1e-8)
