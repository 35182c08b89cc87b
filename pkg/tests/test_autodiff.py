import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphbnn import autodiff as ad
from graphbnn.errors import NonFiniteValue


def fd_grad(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (float(ad.value(f(w + e))) - float(ad.value(f(w - e)))) / (2 * h)
    return g


def fd_hessian(f, w, h=1e-4):
    n = w.size
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            H[i, j] = (f(w + ei + ej) - f(w + ei - ej) - f(w - ei + ej) + f(w - ei - ej)) / (4 * h * h)
    return H


def smooth(x):
    return ad.sum(ad.tanh(x) * x) + ad.sum(ad.exp(0.3 * x)) * ad.sigmoid(x[0]) + (x[1] * x[2]) ** 2


def test_grad_quadratic():
    assert np.allclose(ad.grad(lambda w: ad.sum(w * w), np.array([1.0, 2.0])), [2.0, 4.0])


def test_grad_constant_is_zero():
    g = ad.grad(lambda w: 3.0, np.array([1.0, -2.0, 5.0]))
    assert np.array_equal(g, np.zeros(3))


def test_grad_linear_gaussian_log_posterior_vs_fd():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((8, 2))
    y = rng.standard_normal(8)

    def logp(w):
        r = ad.matmul(X, w) - y
        return -0.5 * ad.sum(r * r) / 0.05 ** 2 - 0.5 * ad.sum(w * w)

    w = np.array([0.3, -0.7])
    g = ad.grad(logp, w)
    fd = fd_grad(logp, w)
    assert np.max(np.abs(g - fd) / np.abs(fd)) < 1e-5


def test_hvp_identity_hessian():
    hv = ad.hvp(lambda w: 0.5 * ad.sum(w * w), np.array([0.4, 1.1]), np.array([3.0, -1.0]))
    assert np.allclose(hv, [3.0, -1.0])


def test_hvp_symbolic():
    hv = ad.hvp(lambda w: w[0] ** 2 * w[1], np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    assert np.allclose(hv, [2.0, 2.0], atol=1e-14)


def test_hvp_matches_nested_finite_differences():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(6) * 0.5
    H = np.stack([ad.hvp(smooth, w, e) for e in np.eye(6)], axis=1)
    Hfd = fd_hessian(lambda x: float(smooth(x)), w)
    assert np.max(np.abs(H - Hfd)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_hvp_symmetry(seed):
    rng = np.random.default_rng(seed)
    w, v1, v2 = rng.standard_normal((3, 5))
    a = v1 @ ad.hvp(smooth, w, v2)
    b = v2 @ ad.hvp(smooth, w, v1)
    assert abs(a - b) < 1e-10 * max(1.0, abs(a))


def test_jvp_and_gauss_newton_match_explicit_jacobian():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((4, 3))

    def f(w):
        return ad.tanh(ad.matmul(A, w)) * w[0]

    w = rng.standard_normal(3)
    v = rng.standard_normal(3)
    J = ad.jacobian(f, w)
    assert J.shape == (4, 3)
    assert np.allclose(ad.jvp(f, w, v), J @ v, atol=1e-13)
    jv, jtjv = ad.jtj_apply(f, w, v)
    assert np.allclose(jtjv, J.T @ (J @ v), atol=1e-12)
    assert np.allclose(ad.vjp(f, w, jv), J.T @ jv, atol=1e-12)


def test_nonfinite_value_raises():
    with pytest.raises(NonFiniteValue):
        ad.grad(lambda w: ad.sum(ad.log(w)), np.array([1.0, -1.0]))


def test_nonfinite_gradient_raises():
    with pytest.raises(NonFiniteValue):
        ad.grad(lambda w: ad.sum(ad.sqrt(w)), np.array([0.0, 1.0]))


def test_deterministic_bitwise():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(5)
    g1 = ad.grad(smooth, w)
    g2 = ad.grad(smooth, w)
    assert g1.tobytes() == g2.tobytes()


def test_ops_without_tape_fall_through_to_numpy():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(x, x), x @ x)
    assert ad.sum(x) == 10.0
    assert np.array_equal(ad.concatenate([x, x], axis=1), np.hstack([x, x]))


@pytest.mark.parametrize("op", [
    lambda x: ad.sum(ad.swish(x)),
    lambda x: ad.sum(ad.relu(x) * x),
    lambda x: ad.sum(ad.div(x, 2.0 + x * x)),
    lambda x: ad.sum(ad.stack([x, x * 2.0])[1] ** 3),
    lambda x: ad.sum(ad.mean(ad.reshape(x, (2, 2)), axis=0) ** 2),
    lambda x: ad.sum(ad.broadcast_to(x[:2], (3, 2)) * np.arange(6.0).reshape(3, 2)),
    lambda x: ad.sum(ad.transpose(ad.reshape(x, (2, 2))) @ np.array([1.0, -2.0])),
])
def test_op_gradients_vs_fd(op):
    w = np.array([0.3, -0.8, 1.2, 0.5])
    g = ad.grad(op, w)
    assert np.allclose(g, fd_grad(op, w), rtol=1e-6, atol=1e-8)


def test_spmm_gradient():
    import scipy.sparse as sp
    S = ad._Const(sp.random(4, 3, density=0.6, random_state=0, format="csr"))
    w = np.array([0.2, -1.0, 0.7])

    def f(x):
        return ad.sum(ad.spmm(S, x) ** 2)

    assert np.allclose(ad.grad(f, w), fd_grad(f, w), rtol=1e-6)
