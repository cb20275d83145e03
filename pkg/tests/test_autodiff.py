import numpy as np
import pytest

import tsedarts.autodiff as ad
from tsedarts.oracles import fd_gradient, fd_hessian


def scalar(x):
    return float(np.asarray(x))


def test_square_value_and_grad():
    x = ad.param(3.0, "x")
    y = x * x
    assert scalar(y.value) == 9.0
    (g,) = ad.grad(y, [x])
    assert scalar(g.value) == 6.0


def test_identity_graph_passthrough():
    x = ad.param([1.0, 2.0], "x")
    (g,) = ad.grad(x, [x], seed=np.array([1.0, 1.0]))
    assert np.array_equal(x.value, np.array([1.0, 2.0]))
    assert np.array_equal(g.value, np.ones(2))


def test_product_rule():
    x = ad.param(2.0, "x")
    y = ad.param(5.0, "y")
    gx, gy = ad.grad(x * y, [x, y])
    assert scalar(gx.value) == 5.0
    assert scalar(gy.value) == 2.0


def _mlp_loss(theta, x):
    """Straight-line numpy reimplementation of the tiny test network."""
    w1 = theta[:8].reshape(4, 2)
    b1 = theta[8:10]
    w2 = theta[10:12].reshape(2, 1)
    h = np.tanh(x @ w1 + b1)
    return float(((h @ w2) ** 2).sum())


def _mlp_loss_var(theta_var, x):
    w1 = ad.reshape(ad.vslice(theta_var, slice(0, 8)), (4, 2))
    b1 = ad.vslice(theta_var, slice(8, 10))
    w2 = ad.reshape(ad.vslice(theta_var, slice(10, 12)), (2, 1))
    h = ad.vtanh(ad.const(x) @ w1 + b1)
    out = h @ w2
    return ad.vsum(out * out)


def test_forward_matches_straightline_reimplementation():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(12)
    x = rng.standard_normal((5, 4))
    leaf = ad.param(theta, "theta")
    got = float(_mlp_loss_var(leaf, x).value)
    assert got == pytest.approx(_mlp_loss(theta, x), abs=1e-12)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    theta = rng.standard_normal(12)
    x = rng.standard_normal((6, 4))
    leaf = ad.param(theta, "theta")
    (g,) = ad.grad(_mlp_loss_var(leaf, x), [leaf])
    fd = fd_gradient(lambda t: _mlp_loss(t, x), theta, step=1e-5)
    denom = max(np.max(np.abs(fd)), 1e-8)
    assert np.max(np.abs(g.value - fd)) / denom < 1e-5


def test_gradcheck_many_graphs():
    # Random compositions of the primitive ops, <=100 params each.
    rng = np.random.default_rng(2)
    for trial in range(5):
        n = int(rng.integers(4, 30))
        theta = rng.standard_normal(n)
        a = rng.standard_normal((n, n))

        def f_np(t):
            h = np.tanh(a @ t)
            return float(np.exp(-np.sum(h * h) / n) + np.log(1.0 + np.sum(t * t)))

        def f_var(leaf):
            h = ad.vtanh(ad.reshape(ad.const(a) @ ad.reshape(leaf, (n, 1)), (n,)))
            s = ad.vsum(h * h) / ad.const(float(n))
            return ad.vexp(-s) + ad.vlog(ad.const(1.0) + ad.vsum(leaf * leaf))

        leaf = ad.param(theta, "t")
        (g,) = ad.grad(f_var(leaf), [leaf])
        fd = fd_gradient(f_np, theta, step=1e-5)
        denom = max(np.max(np.abs(fd)), 1e-6)
        assert np.max(np.abs(g.value - fd)) / denom < 1e-4


def test_backward_linearity_in_seed():
    x = ad.param(np.array([1.0, -2.0, 0.5]), "x")

    def build():
        return ad.vsum(ad.vexp(x * x), axis=0, keepdims=False)

    (g1,) = ad.grad(build(), [x], seed=np.asarray(1.0))
    (g3,) = ad.grad(build(), [x], seed=np.asarray(3.0))
    assert np.max(np.abs(g3.value - 3.0 * g1.value)) < 1e-12


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(12)
    x = rng.standard_normal((4, 4))
    results = []
    for _ in range(2):
        leaf = ad.param(theta.copy(), "theta")
        loss = _mlp_loss_var(leaf, x)
        (g,) = ad.grad(loss, [leaf])
        results.append((loss.value.tobytes(), g.value.tobytes()))
    assert results[0] == results[1]


def test_tape_single_use():
    x = ad.param(2.0, "x")
    t = ad.tape(x * x)
    ad.backward(t, wrt=[x])
    with pytest.raises(ad.TapeConsumedError):
        ad.backward(t, wrt=[x])


def test_unused_parameter_gets_zero_gradient():
    x = ad.param(2.0, "x")
    y = ad.param(3.0, "y")
    gx, gy = ad.grad(x * x, [x, y])
    assert scalar(gx.value) == 4.0
    assert scalar(gy.value) == 0.0


def test_nonfinite_value_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.const(np.array([1.0, np.inf]))
    x = ad.const(np.array([0.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.vlog(x)


def test_shape_mismatch_rejected():
    a = ad.const(np.ones((2, 3)))
    b = ad.const(np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, b)


def test_seed_shape_checked():
    x = ad.param(np.ones(3), "x")
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.tape(x * x), seed=np.ones(4), wrt=[x])


class TestHvp:
    def _quad_closure(self, a):
        def closure(theta):
            leaf = ad.param(theta.reshape(1, -1), name="theta")
            return ad.vsum((leaf @ ad.const(a)) * leaf) * ad.const(0.5), leaf
        return closure

    def test_diagonal_quadratic(self):
        a = np.diag([3.0, 1.0])
        hv = ad.hvp(self._quad_closure(a), np.zeros(2), np.array([1.0, 0.0]))
        assert np.max(np.abs(hv - np.array([3.0, 0.0]))) < 1e-6

    def test_zero_direction(self):
        a = np.diag([3.0, 1.0])
        hv = ad.hvp(self._quad_closure(a), np.zeros(2), np.zeros(2))
        assert np.array_equal(hv, np.zeros(2))

    def test_zero_length_direction_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.hvp(self._quad_closure(np.eye(1)), np.zeros(0), np.zeros(0))

    def test_matches_dense_fd_hessian(self):
        rng = np.random.default_rng(4)
        n = 6
        a = rng.standard_normal((n, n))

        def f_np(t):
            h = np.tanh(a @ t)
            return float(np.sum(h * h))

        def closure(theta):
            leaf = ad.param(theta, name="theta")
            h = ad.vtanh(ad.reshape(ad.const(a) @ ad.reshape(leaf, (n, 1)), (n,)))
            return ad.vsum(h * h), leaf

        theta = 0.3 * rng.standard_normal(n)
        v = rng.standard_normal(n)
        hv = ad.hvp(closure, theta, v)
        ref = fd_hessian(f_np, theta) @ v
        assert np.linalg.norm(hv - ref) / np.linalg.norm(ref) < 1e-3

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        n = 5
        a = rng.standard_normal((n, n))

        def closure(theta):
            leaf = ad.param(theta, name="theta")
            h = ad.vtanh(ad.reshape(ad.const(a) @ ad.reshape(leaf, (n, 1)), (n,)))
            return ad.vsum(h * h), leaf

        theta = 0.2 * rng.standard_normal(n)
        u = rng.standard_normal(n)
        v = rng.standard_normal(n)
        left = float(v @ ad.hvp(closure, theta, u))
        right = float(u @ ad.hvp(closure, theta, v))
        assert abs(left - right) / max(abs(left), abs(right), 1e-8) < 1e-4


def test_im2col_col2im_adjoint_pair():
    # <Ax, y> == <x, A^T y> for the patch extraction pair.
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4, 4))
    y = rng.standard_normal((2, 27, 4, 4))
    ax = ad.im2col3(ad.const(x)).value
    aty = ad.col2im3(ad.const(y), 3, 4, 4).value
    assert abs(np.sum(ax * y) - np.sum(x * aty)) < 1e-9


def test_cross_entropy_uniform_logits():
    logits = ad.const(np.zeros((4, 5)))
    loss = ad.cross_entropy(logits, np.array([0, 1, 2, 3]))
    assert float(loss.value) == pytest.approx(np.log(5.0), abs=1e-12)


def test_cross_entropy_label_validation():
    with pytest.raises(ad.AutodiffError):
        ad.cross_entropy(ad.const(np.zeros((2, 3))), np.array([0, 3]))
