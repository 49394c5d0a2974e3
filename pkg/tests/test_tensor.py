import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisylab import tensor as T
from noisylab.tensor import Graph, Tensor, grad_rel_error, numerical_grad


def param(rng, *shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)
    return Tensor(x, requires_grad=True)


def analytic_grads(f, params):
    with Graph() as g:
        loss = f()
    g.backward(loss, params)
    return [p.grad.copy() for p in params]


def check(f, params, tol=1e-4):
    grads = analytic_grads(f, params)
    for p, ga in zip(params, grads):
        err = grad_rel_error(ga, numerical_grad(f, p))
        assert err < tol, (p.shape, err)


# ---------------------------------------------------------------- forward


def test_relu_definition():
    np.testing.assert_array_equal(T.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(2, 5))
    np.testing.assert_array_equal(T.matmul(np.eye(2), x).data, x)


def test_conv_pointwise_scaling():
    x = np.ones((1, 3, 3, 1))
    w = np.full((1, 1, 1, 1), 2.0)
    np.testing.assert_array_equal(T.conv2d(x, w).data, np.full((1, 3, 3, 1), 2.0))


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(x, w, stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                for o in range(4):
                    ref[n, i, j, o] = np.sum(patch * w[o].transpose(1, 2, 0))
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_input_rejected():
    with pytest.raises(T.NumericContractError):
        T.relu([1.0, np.nan])
    with pytest.raises(T.NumericContractError):
        Tensor([np.inf])


def test_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_batchnorm_train_mode_standardizes():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.5, size=(4, 5, 5, 6))
    y = T.batchnorm2d(x, np.ones(6), np.zeros(6), np.zeros(6), np.ones(6), training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
    # eps=1e-5 inside the sqrt shifts the variance by ~eps/var
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1.0, atol=1e-5)


def test_batchnorm_running_stats_and_eval_mode():
    rng = np.random.default_rng(2)
    x = rng.normal(1.0, 2.0, size=(3, 4, 4, 2))
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm2d(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.9)
    m = x.reshape(-1, 2).mean(axis=0)
    np.testing.assert_allclose(rm, 0.1 * m)
    y = T.batchnorm2d(x[:1], np.ones(2), np.zeros(2), rm, rv, training=False).data
    np.testing.assert_allclose(y, (x[:1] - rm) / np.sqrt(rv + 1e-5))


def test_forward_bitwise_deterministic():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(2, 6, 6, 3)), rng.normal(size=(5, 3, 3, 3))
    a = T.conv2d(x, w, 1, 1).data
    b = T.conv2d(x.copy(), w.copy(), 1, 1).data
    assert a.tobytes() == b.tobytes()


# --------------------------------------------------------------- backward


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(T.mul(x, x))
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unused_parameter_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([[3.0]], requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(x)
    g.backward(loss, [x, p])
    np.testing.assert_array_equal(p.grad, [[0.0]])


def test_backward_non_scalar_and_double_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = T.scalar_mul(x, 2.0)
    with pytest.raises(T.GraphError, match="scalar"):
        g.backward(y)
    with Graph() as g:
        loss = T.sum_all(x)
    g.backward(loss)
    with pytest.raises(T.GraphError, match="double"):
        g.backward(loss)


def test_backward_visits_reverse_topological_order():
    x = Tensor([0.5, -1.5], requires_grad=True)
    with Graph() as g:
        a = T.scalar_mul(x, 3.0)
        b = T.relu(a)
        loss = T.sum_all(T.add(a, b))
    kinds = [n.kind for n in g.nodes]
    assert kinds == ["scalar_mul", "relu", "add", "sum"]
    ids = {id(n.output): k for k, n in enumerate(g.nodes)}
    for k, node in enumerate(g.nodes):
        assert all(ids.get(id(t), -1) < k for t in node.inputs)
    g.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0, 3.0])


def test_micro_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = param(rng, 1, 2)
    b1 = param(rng, 1)  # broadcast bias: 5 parameters in total
    w2 = param(rng, 2, 1)
    x = Tensor(rng.normal(size=(3, 1)))

    def f():
        h = T.relu(T.add(T.matmul(x, w1), b1))
        return T.sum_all(T.mul(T.matmul(h, w2), T.matmul(h, w2)))

    check(f, [w1, b1, w2])


def test_softmax_cross_entropy_values():
    assert T.softmax_cross_entropy(np.zeros((3, 5)), [0, 2, 4]).item() == pytest.approx(np.log(5))
    assert T.softmax_cross_entropy([[30.0, -30.0]], [0]).item() == pytest.approx(0.0, abs=1e-20)
    # scalar evaluation straight from the definition
    ref = (-math.log(math.exp(2) / (math.exp(1) + math.exp(2)))
           - math.log(math.exp(3) / (math.exp(3) + math.exp(1)))) / 2
    got = T.softmax_cross_entropy([[1.0, 2.0], [3.0, 1.0]], [1, 0]).item()
    assert got == pytest.approx(ref, rel=1e-14)


def test_softmax_cross_entropy_rejects_bad_target():
    with pytest.raises(ValueError, match="targets"):
        T.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


# gradient checks per primitive on randomized small shapes

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 8), st.integers(1, 6))
def test_grad_matmul_add(seed, n, k, m):
    rng = np.random.default_rng(seed)
    a, b, c = param(rng, n, k), param(rng, k, m), param(rng, m)
    r = Tensor(rng.normal(size=(n, m)))
    check(lambda: T.sum_all(T.mul(T.add(T.matmul(a, b), c), r)), [a, b, c])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(4, 8), st.integers(1, 4),
       st.integers(1, 4), st.sampled_from([(1, 0), (3, 1), (3, 0)]), st.integers(1, 2))
def test_grad_conv2d(seed, n, hw, cin, cout, kp, stride):
    k, pad = kp
    rng = np.random.default_rng(seed)
    x, w = param(rng, n, hw, hw, cin), param(rng, cout, cin, k, k)
    out_shape = T.conv2d(x, w, stride, pad).shape
    r = Tensor(rng.normal(size=out_shape))
    check(lambda: T.sum_all(T.mul(T.conv2d(x, w, stride, pad), r)), [x, w])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(1, 5), st.integers(1, 8),
       st.booleans())
def test_grad_batchnorm(seed, n, hw, c, training):
    rng = np.random.default_rng(seed)
    x, gam, bet = param(rng, n, hw, hw, c), param(rng, c), param(rng, c)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    r = Tensor(rng.normal(size=(n, hw, hw, c)))

    def f():
        # fresh buffer copies: train mode mutates them
        return T.sum_all(T.mul(T.batchnorm2d(x, gam, bet, rm.copy(), rv.copy(), training), r))

    check(f, [x, gam, bet])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 8), st.integers(1, 8))
def test_grad_relu_pool_reshape_scalar(seed, n, hw, c):
    rng = np.random.default_rng(seed)
    x = param(rng, n, hw, hw, c, away_from_zero=True)
    r = Tensor(rng.normal(size=(1, n * c)))

    def f():
        h = T.global_avg_pool(T.relu(T.scalar_mul(x, 1.5)))
        return T.sum_all(T.mul(T.reshape(h, (1, n * c)), r))

    check(f, [x])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(2, 8))
def test_grad_concat_normalize_xent(seed, n1, n2, k):
    rng = np.random.default_rng(seed)
    a, b = param(rng, n1, k), param(rng, n2, k)
    t = rng.integers(0, k, size=n1 + n2)

    def f():
        z = T.l2_normalize_rows(T.concat([a, b]))
        return T.softmax_cross_entropy(T.scalar_mul(z, 3.0), t)

    check(f, [a, b])
