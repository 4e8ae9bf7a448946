import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import promptpsi.tensor as T
from promptpsi.tensor import _kernels_py, kernels


def _probe(shape, rng):
    """Fixed random weights so each check reduces to a scalar."""
    return T.Tensor(rng.normal(size=shape))


def _dot(fn, shape, rng):
    w = _probe(shape, rng)
    return lambda x: T.sum_(T.mul(fn(x), w))


def _op_cases(rng):
    W = rng.normal(size=(3, 4))
    g8, b8 = rng.normal(size=8), rng.normal(size=8)
    return {
        "matmul": (_dot(lambda x: T.matmul(x, T.Tensor(W)), (2, 4), rng), (2, 3)),
        "bmm": (_dot(lambda x: T.matmul(x, T.transpose(x)), (2, 3, 3), rng), (2, 3, 4)),
        "add": (lambda x: T.sum_(T.mul(T.add(x, x), x)), (3, 4)),
        "sub": (lambda x: T.sum_(T.mul(T.sub(x, T.scale(x, 0.3)), x)), (3, 4)),
        "mul": (lambda x: T.sum_(T.mul(x, T.mul(x, x))), (5,)),
        "scale": (lambda x: T.sum_(T.mul(T.scale(x, -2.5), x)), (4,)),
        "bias_add": (lambda x: T.sum_(T.mul(T.bias_add(T.Tensor(W), x), T.Tensor(W))), (4,)),
        "concat": (_dot(lambda x: T.concat([x, T.scale(x, 2.0)], axis=0), (6, 2), rng), (3, 2)),
        "slice": (_dot(lambda x: T.slice_(x, 1, 1, 3), (3, 2), rng), (3, 4)),
        "take": (_dot(lambda x: T.take(x, np.array([[2, 2], [0, 1]])), (2, 2), rng), (2, 3)),
        "reshape": (_dot(lambda x: T.reshape(x, (2, 6)), (2, 6), rng), (3, 4)),
        "permute": (_dot(lambda x: T.permute(x, (2, 0, 1)), (4, 2, 3), rng), (2, 3, 4)),
        "expand": (_dot(lambda x: T.expand(x, 1, 3), (4, 3), rng), (4,)),
        "mean": (_dot(lambda x: T.mean(x, axis=0), (4,), rng), (3, 4)),
        "sum": (_dot(lambda x: T.sum_(x, axis=1), (3,), rng), (3, 4)),
        "transpose": (_dot(lambda x: T.transpose(x), (4, 3), rng), (3, 4)),
        "softmax": (_dot(lambda x: T.softmax(x), (3, 5), rng), (3, 5)),
        "layer_norm": (_dot(lambda x: T.layer_norm(x, T.Tensor(g8), T.Tensor(b8)), (2, 8), rng), (2, 8)),
        "gelu": (_dot(lambda x: T.gelu(x), (3, 4), rng), (3, 4)),
        "sigmoid": (_dot(lambda x: T.sigmoid(x), (3, 4), rng), (3, 4)),
        "tanh": (_dot(lambda x: T.tanh(x), (3, 4), rng), (3, 4)),
        "power_normalize": (_dot(lambda x: T.power_normalize(x), (2, 5), rng), (2, 5)),
        "l2_normalize": (_dot(lambda x: T.l2_normalize(x), (2, 5), rng), (2, 5)),
        "mse_loss": ((lambda y: lambda x: T.mse_loss(x, y))(_probe((3, 4), rng)), (3, 4)),
    }


OPS = sorted(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
@pytest.mark.parametrize("seed", range(10))
def test_grad_check_every_op(op, seed):
    rng = np.random.default_rng(seed)
    f, shape = _op_cases(rng)[op]
    x = rng.normal(size=shape)
    assert T.grad_check(f, x, eps=1e-5) < 1e-5


def test_relu_grad_away_from_kink():
    x = np.array([-1.0, -0.3, 0.4, 2.0])
    assert T.grad_check(lambda t: T.sum_(T.mul(T.relu(t), t)), x) < 1e-8


def test_matmul_identity():
    a = np.random.default_rng(1).normal(size=(2, 2))
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(T.Tensor(np.zeros((1, 4)))).data, [[0.25] * 4])


def test_mse_self_is_zero():
    x = T.Tensor(np.random.default_rng(2).normal(size=(3, 3)))
    assert T.mse_loss(x, x).item() == 0.0


def test_mean_gradient():
    x = T.Tensor(np.arange(4.0), requires_grad=True)
    (g,) = T.grad(T.mean(x), [x])
    np.testing.assert_allclose(g, [0.25] * 4)


def test_least_squares_gradient_matches_closed_form():
    rng = np.random.default_rng(3)
    W0, x, y = rng.normal(size=(4, 3)), rng.normal(size=(3, 1)), rng.normal(size=(4, 1))
    W = T.Tensor(W0, requires_grad=True)
    (g,) = T.grad(T.mse_loss(T.matmul(W, T.Tensor(x)), T.Tensor(y)), [W])
    expected = 2.0 * (W0 @ x - y) @ x.T / y.size
    np.testing.assert_allclose(g, expected, rtol=1e-12)


def test_constant_function_has_zero_error():
    assert T.grad_check(lambda t: T.Tensor(3.0), np.ones(5)) == 0.0


def test_unused_leaf_gets_exact_zero():
    a = T.Tensor(np.ones(3), requires_grad=True)
    b = T.Tensor(np.ones(3), requires_grad=True)
    ga, gb = T.grad(T.sum_(T.mul(a, a)), [a, b])
    np.testing.assert_array_equal(gb, np.zeros(3))
    np.testing.assert_array_equal(ga, 2 * np.ones(3))


def test_shared_node_accumulates_once():
    x = T.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    h = T.tanh(x)
    loss = T.sum_(T.add(T.mul(h, h), h))
    (g,) = T.grad(loss, [x])
    t = np.tanh(x.data)
    np.testing.assert_allclose(g, (2 * t + 1) * (1 - t * t), rtol=1e-12)


def test_non_scalar_loss_rejected():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.scale(x, 2.0))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"add.*\(2, 3\).*\(3, 2\)"):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_no_broadcasting():
    with pytest.raises(T.ShapeError):
        T.mul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(3)))


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 9))
def test_softmax_rows_are_distributions(seed, rows, cols):
    x = np.random.default_rng(seed).normal(scale=10.0, size=(rows, cols))
    y = T.softmax(T.Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(2, 16))
def test_layer_norm_moments(seed, rows, cols):
    x = np.random.default_rng(seed).normal(loc=3.0, scale=2.0, size=(rows, cols))
    y = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(cols)), T.Tensor(np.zeros(cols))).data
    assert np.abs(y.mean(axis=1)).max() < 1e-10
    assert np.abs(y.var(axis=1) - 1.0).max() < 1e-8


@pytest.mark.parametrize("name", ["layer_norm", "softmax", "gelu", "adam"])
def test_compiled_kernels_match_numpy(name):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    from promptpsi.tensor import _kernels as K
    rng = np.random.default_rng(4)
    x = rng.normal(size=(7, 9))
    g = rng.normal(size=(7, 9))
    if name == "layer_norm":
        gain, bias = rng.normal(size=9), rng.normal(size=9)
        a, b = K.layer_norm_fwd(x, gain, bias, 1e-12), _kernels_py.layer_norm_fwd(x, gain, bias, 1e-12)
        for u, v in zip(a, b):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
        for u, v in zip(K.layer_norm_bwd(g, a[1], a[2], gain), _kernels_py.layer_norm_bwd(g, b[1], b[2], gain)):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
    elif name == "softmax":
        y = K.softmax_fwd(x)
        np.testing.assert_allclose(y, _kernels_py.softmax_fwd(x), rtol=1e-12)
        np.testing.assert_allclose(K.softmax_bwd(g, y), _kernels_py.softmax_bwd(g, y), atol=1e-13)
    elif name == "gelu":
        (y, t), (y2, t2) = K.gelu_fwd(x), _kernels_py.gelu_fwd(x)
        np.testing.assert_allclose(y, y2, atol=1e-13)
        np.testing.assert_allclose(K.gelu_bwd(g, x, t), _kernels_py.gelu_bwd(g, x, t2), atol=1e-13)
    else:
        p1, p2 = x.reshape(-1).copy(), x.reshape(-1).copy()
        m1, m2 = np.zeros(63), np.zeros(63)
        v1, v2 = np.zeros(63), np.zeros(63)
        for _ in range(3):
            K.adam_update(p1, g.reshape(-1), m1, v1, 1e-2, 0.9, 0.999, 0.1, 0.001, 1e-8)
            _kernels_py.adam_update(p2, g.reshape(-1), m2, v2, 1e-2, 0.9, 0.999, 0.1, 0.001, 1e-8)
        np.testing.assert_allclose(p1, p2, rtol=1e-12)


def test_adam_minimizes_quadratic():
    x = T.Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = T.Adam([x], lr=0.1)
    for _ in range(300):
        opt.step(T.grad(T.sum_(T.mul(x, x)), [x]))
    assert np.abs(x.data).max() < 1e-2


def test_adam_state_roundtrip():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = T.Adam([x], lr=0.1)
    opt.step([np.array([0.5, -0.5])])
    other = T.Adam([T.Tensor(x.data.copy(), requires_grad=True)], lr=0.1)
    other.load_state_dict(opt.state_dict())
    g = [np.array([0.1, 0.2])]
    opt.step(g)
    other.step(g)
    np.testing.assert_array_equal(x.data, other.params[0].data)
