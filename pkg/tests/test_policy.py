import numpy as np
import pytest

from safeode.numerics import finite_diff_grad, finite_diff_jac
from safeode.policy import (
    ClassKParams,
    MlpPolicy,
    class_k_apply,
    class_k_dtheta,
    load_checkpoint,
    param_count,
    save_checkpoint,
)


def _reference_forward(layer_dims, theta, x):
    """Independent loop-based MLP evaluation used as an oracle."""
    a = np.asarray(x, dtype=float)
    off = 0
    n_layers = len(layer_dims) - 1
    for li in range(n_layers):
        d_in, d_out = layer_dims[li], layer_dims[li + 1]
        W = theta[off:off + d_out * d_in].reshape(d_out, d_in)
        off += d_out * d_in
        b = theta[off:off + d_out]
        off += d_out
        z = np.array([W[r] @ a + b[r] for r in range(d_out)])
        a = np.tanh(z) if li < n_layers - 1 else z
    return a


def test_zero_params_zero_output():
    pol = MlpPolicy((3, 8, 2), np.zeros(param_count((3, 8, 2))))
    assert np.allclose(pol.forward(np.array([0.4, -2.0, 1.0])), 0.0)


def test_single_linear_layer_identity():
    theta = np.concatenate([np.eye(2).ravel(), np.zeros(2)])
    pol = MlpPolicy((2, 2), theta)
    x = np.array([0.3, -0.8])
    assert np.allclose(pol.forward(x), x)


def test_forward_matches_reference():
    rng = np.random.default_rng(0)
    dims = (3, 5, 4, 2)
    pol = MlpPolicy.init_random(dims, seed=7)
    for _ in range(10):
        x = rng.normal(size=3)
        assert np.allclose(pol.forward(x),
                           _reference_forward(dims, pol.theta1, x), atol=1e-12)


def test_param_count_formula():
    dims = (3, 64, 2)
    assert param_count(dims) == 3 * 64 + 64 + 64 * 2 + 2


def test_jacobian_zero_params():
    pol = MlpPolicy((3, 4, 2), np.zeros(param_count((3, 4, 2))))
    assert np.allclose(pol.jacobian_x(np.ones(3)), 0.0)


def test_jacobian_linear_layer_is_weight():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(2, 3))
    pol = MlpPolicy((3, 2), np.concatenate([W.ravel(), np.zeros(2)]))
    assert np.allclose(pol.jacobian_x(rng.normal(size=3)), W)


def test_jacobian_matches_fd():
    pol = MlpPolicy.init_random((3, 64, 2), seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=3)
    J = pol.jacobian_x(x)
    J_fd = finite_diff_jac(pol.forward, x, eps=1e-6)
    assert np.allclose(J, J_fd, rtol=1e-5, atol=1e-7)


def test_grad_theta_zero_cotangent():
    pol = MlpPolicy.init_random((2, 4, 1), seed=0)
    g = pol.grad_theta(np.ones(2), np.zeros(1))
    assert np.allclose(g, 0.0)


def test_grad_theta_linear_layer():
    # row-1 weight gradient is x, bias-1 gradient is 1
    pol = MlpPolicy((3, 2), np.zeros(param_count((3, 2))))
    x = np.array([0.5, -1.0, 2.0])
    g = pol.grad_theta(x, np.array([1.0, 0.0]))
    W_grad = g[:6].reshape(2, 3)
    b_grad = g[6:]
    assert np.allclose(W_grad[0], x)
    assert np.allclose(W_grad[1], 0.0)
    assert np.allclose(b_grad, [1.0, 0.0])


def test_derivatives_match_fd_many_instances():
    rng = np.random.default_rng(5)
    for trial in range(100):
        dims = (int(rng.integers(1, 4)), int(rng.integers(2, 6)),
                int(rng.integers(1, 3)))
        pol = MlpPolicy.init_random(dims, seed=trial)
        x = rng.normal(size=dims[0])
        cot = rng.normal(size=dims[-1])
        g = pol.grad_theta(x, cot)
        g_fd = finite_diff_grad(
            lambda th: float(cot @ MlpPolicy(dims, th).forward(x)),
            pol.theta1, eps=1e-6)
        denom = max(np.max(np.abs(g_fd)), 1e-8)
        assert np.max(np.abs(g - g_fd)) / denom <= 1e-5
        J = pol.jacobian_x(x)
        J_fd = finite_diff_jac(pol.forward, x, eps=1e-6)
        denom = max(np.max(np.abs(J_fd)), 1e-8)
        assert np.max(np.abs(J - J_fd)) / denom <= 1e-5


def test_backward_combined_equals_separate():
    pol = MlpPolicy.init_random((3, 6, 2), seed=9)
    x = np.array([0.2, -0.4, 1.1])
    cot = np.array([0.5, -1.5])
    g, dx = pol.backward(x, cot)
    assert np.allclose(g, pol.grad_theta(x, cot))
    assert np.allclose(dx, cot @ pol.jacobian_x(x))


def test_lipschitz_bound():
    pol = MlpPolicy.init_random((3, 16, 2), seed=11)
    bound = 1.0
    for W, _ in pol._weights():
        bound *= np.linalg.norm(W, 2)
    rng = np.random.default_rng(12)
    x = rng.normal(size=3)
    for _ in range(20):
        d = rng.normal(size=3) * 0.1
        lhs = np.linalg.norm(pol.forward(x + d) - pol.forward(x))
        assert lhs <= bound * np.linalg.norm(d) + 1e-12


def test_init_reproducible():
    a = MlpPolicy.init_random((3, 8, 2), seed=42)
    b = MlpPolicy.init_random((3, 8, 2), seed=42)
    assert np.array_equal(a.theta1, b.theta1)
    bound = 1.0 / np.sqrt(3)
    W0 = a.theta1[:24]
    assert np.max(np.abs(W0)) <= bound


# ------------------------------------------------------------- class-K


def test_class_k_zero_at_zero():
    ck = ClassKParams(np.array([2.3, -1.0]))
    assert class_k_apply(ck, 0, 0.0) == 0.0
    assert class_k_apply(ck, 1, 0.0) == 0.0


def test_class_k_linear_scaling():
    ck = ClassKParams(np.array([np.log(5.0)]))
    assert class_k_apply(ck, 0, 2.0) == pytest.approx(10.0)


def test_class_k_strictly_increasing_positive_kappa():
    rng = np.random.default_rng(13)
    for _ in range(50):
        ck = ClassKParams(rng.normal(size=2) * 3)
        assert ck.kappa(0) > 0 and ck.kappa(1) > 0
        b1, b2 = sorted(rng.normal(size=2))
        if b1 < b2:
            assert class_k_apply(ck, 0, b1) < class_k_apply(ck, 0, b2)


def test_class_k_dtheta_matches_fd():
    ck = ClassKParams(np.array([0.4]))
    B = 1.7
    fd = finite_diff_grad(
        lambda th: class_k_apply(ClassKParams(th), 0, B), ck.theta2)
    assert class_k_dtheta(ck, 0, B) == pytest.approx(fd[0], rel=1e-6)


# ---------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    pol = MlpPolicy.init_random((3, 8, 2), seed=1)
    ck = ClassKParams(np.array([0.25, -0.5]))
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, pol, ck, seed=123, extra={"note": 1})
    pol2, ck2, header = load_checkpoint(path)
    assert pol2.layer_dims == pol.layer_dims
    assert np.array_equal(pol2.theta1, pol.theta1)
    assert np.array_equal(ck2.theta2, ck.theta2)
    assert header["seed"] == 123
    assert header["theta2_length"] == 2
    assert header["extra"] == {"note": 1}
