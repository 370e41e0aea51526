import numpy as np
import pytest

from distillbev import checkpoint
from distillbev import tensor as T
from distillbev.tensor import Tensor

from oracles import conv2d_loops


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])


def test_conv_identity_1x1():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_ones_kernel_center():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 1, 1] == 9.0
    assert out.data[0, 0, 0] == 4.0


@pytest.mark.parametrize("k,pad", [(3, 1), (3, 0), (1, 0)])
def test_conv_matches_loop_oracle(k, pad):
    rng = np.random.default_rng(k + pad)
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad)
    assert np.max(np.abs(out.data - conv2d_loops(x, w, b, pad))) <= 1e-12


def test_conv_shape_errors():
    x = Tensor(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), padding=1)
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))


def test_conv_gradients_fd():
    rng = np.random.default_rng(1)
    x, w, b = leaf(rng.normal(size=(2, 4, 4))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
    r = rng.normal(size=(3, 4, 4))
    err = T.grad_check(lambda: T.tsum(T.mul(T.conv2d(x, w, b, padding=1), r)), [x, w, b])
    assert err <= 1e-7


def test_batchnorm_infer_identity():
    x = np.random.default_rng(2).normal(size=(2, 3, 3))
    rv = np.full(2, 1.0 - T.BN_EPS)
    out = T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), rv, training=False)
    np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-12)


def test_batchnorm_constant_input_gives_beta():
    beta = np.array([0.3, -1.2])
    out = T.batchnorm(Tensor(np.full((2, 3, 3), 7.0)), Tensor(np.array([2.0, 5.0])), Tensor(beta),
                      np.zeros(2), np.ones(2), training=True)
    np.testing.assert_allclose(out.data, beta[:, None, None] * np.ones((2, 3, 3)), atol=1e-12)


def test_batchnorm_train_statistics_and_running_update():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 3.0, size=(3, 6, 5))
    gamma, beta = np.array([0.5, 2.0, 1.5]), np.array([1.0, -1.0, 0.0])
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(1, 2)), beta, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(1, 2)), gamma ** 2, atol=1e-6 * 10)
    n = 30
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(1, 2)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(1, 2)) * n / (n - 1), rtol=1e-12)


def test_batchnorm_gradients_fd():
    rng = np.random.default_rng(4)
    x, g, b = leaf(rng.normal(size=(2, 3, 3))), leaf(rng.uniform(0.5, 2, 2)), leaf(rng.normal(size=2))
    r = rng.normal(size=(2, 3, 3))

    def f():
        return T.tsum(T.mul(T.batchnorm(x, g, b, np.zeros(2), np.ones(2), True), r))
    assert T.grad_check(f, [x, g, b]) <= 1e-6


def test_relu_values_and_subgradient():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    pos = np.array([0.5, 3.0])
    assert np.array_equal(T.relu(Tensor(pos)).data, pos)
    x = leaf([-1.0, 2.0])
    grads = T.backward(T.tsum(T.relu(x)))
    assert np.array_equal(grads[x], [0.0, 1.0])


def test_upsample():
    x = Tensor(np.arange(4.0).reshape(1, 2, 2))
    assert T.upsample_nearest(x, 1) is x
    five = T.upsample_nearest(Tensor(np.full((1, 1, 1), 5.0)), 2)
    assert np.array_equal(five.data, np.full((1, 2, 2), 5.0))
    x = leaf(np.ones((1, 2, 2)))
    assert np.array_equal(T.backward(T.tsum(T.upsample_nearest(x, 2)))[x], np.full((1, 2, 2), 4.0))
    with pytest.raises(ValueError):
        T.upsample_nearest(x, 0)


def test_avg_pool_gradient_fd():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(2, 4, 6)))
    r = rng.normal(size=(2, 2, 3))
    assert T.grad_check(lambda: T.tsum(T.mul(T.avg_pool(x, 2), r)), [x]) <= 1e-7


def test_softmax_scaled():
    np.testing.assert_allclose(T.softmax_scaled(Tensor(np.full(5, 3.3)), 0.7).data, np.full(5, 0.2), atol=1e-15)
    out = T.softmax_scaled(Tensor([np.log(4.0), 0.0, 0.0, 0.0]), 1.0).data
    np.testing.assert_allclose(out, [0.5714285714285714, 0.14285714285714285, 0.14285714285714285,
                                     0.14285714285714285], rtol=1e-14)
    big = T.softmax_scaled(Tensor([1e6, 0.0, 0.0]), 1.0).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0
    for tau in (0.0, -1.0):
        with pytest.raises(ValueError):
            T.softmax_scaled(Tensor([1.0, 2.0]), tau)


def test_softmax_gradient_fd():
    rng = np.random.default_rng(6)
    x = leaf(rng.normal(size=7))
    r = rng.normal(size=7)
    assert T.grad_check(lambda: T.tsum(T.mul(T.softmax_scaled(x, 0.5), r)), [x]) <= 1e-7


def test_backward_examples():
    x = leaf(3.0)
    assert T.backward(T.square(x))[x] == pytest.approx(6.0)
    rng = np.random.default_rng(7)
    a, b = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(3, 2)))
    grads = T.backward(T.tsum(T.mul(a, b)))
    assert np.array_equal(grads[a], b.data) and np.array_equal(grads[b], a.data)
    with pytest.raises(ValueError):
        T.backward(T.mul(a, b))


def test_backward_accumulates_shared_subexpressions():
    x = leaf(2.0)
    y = T.mul(x, x)
    loss = T.add(y, T.mul(y, 3.0))  # 4 x^2
    assert T.backward(loss)[x] == pytest.approx(16.0)


def test_broadcast_and_concat_gradients_fd():
    rng = np.random.default_rng(8)
    a, b = leaf(rng.normal(size=(2, 3, 3))), leaf(rng.normal(size=(1, 3, 3)))
    c = leaf(rng.normal(size=3))
    r = rng.normal(size=(3, 3, 3))

    def f():
        return T.tsum(T.mul(T.concat([T.mul(a, c), T.sub(b, 1.0)], axis=0), r))
    assert T.grad_check(f, [a, b, c]) <= 1e-6


def test_gather_cells_gradient():
    x = leaf(np.arange(4.0).reshape(1, 2, 2))
    idx = np.array([3, 3, -1, 0])
    y = T.gather_cells(x, idx)
    assert np.array_equal(y.data.reshape(-1), [3.0, 3.0, 0.0, 0.0])
    g = T.backward(T.tsum(y))[x]
    assert np.array_equal(g.reshape(-1), [1.0, 0.0, 0.0, 2.0])


def test_grad_check_examples():
    x = leaf(2.0)
    assert T.grad_check(lambda: T.mul(T.square(x), x), [x]) <= 1e-7
    z = leaf([0.0, 1.5, -2.0])
    # the kink at zero would give rel. error 1 (fd 0.5 vs subgradient 0)
    assert T.grad_check(lambda: T.tsum(T.relu(z)), [z], kink_inputs=[z]) <= 1e-9
    assert T.grad_check(lambda: T.tsum(T.relu(z)), [z]) > 0.4
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.square(x), [x], h=1e-2)


def test_feature_loss_grad_check_1x2x2():
    from distillbev.losses import feature_imitation_loss
    rng = np.random.default_rng(9)
    f_t = rng.normal(size=(1, 2, 2))
    f_s = leaf(rng.normal(size=(1, 2, 2)))
    m = np.array([[1.0, 0.0], [20.0, 0.0]])
    s, a = rng.uniform(0.1, 1, (2, 2)), rng.uniform(0.5, 2, (2, 2))
    f = lambda: feature_imitation_loss(f_t, f_s, m, (m == 0) * 1.0, s, a, 6e-3, 4e-2)  # noqa: E731
    assert T.grad_check(f, [f_s]) <= 1e-6


def test_topological_order_parents_first():
    a = leaf(1.0)
    b = T.mul(a, 2.0)
    c = T.add(b, a)
    order = T.topological_order(c)
    assert order.index(a) < order.index(b) < order.index(c)


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"w": np.random.default_rng(0).normal(size=(3, 2, 1, 1)), "b": np.zeros(3), "s": np.array(2.5)}
    path = tmp_path / "x.dbw"
    checkpoint.save(path, arrays)
    blob = path.read_bytes()
    assert blob[:4] == b"DBW1"
    back = checkpoint.load(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and np.array_equal(back[k], arrays[k])
    assert checkpoint.dumps(back) == blob
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOPE" + blob[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-3])
