import math

import numpy as np
import pytest

from budgetprune import tensor as T
from budgetprune.errors import InputError, NonFiniteError, ShapeError, UsageError
from budgetprune.tensor import Tensor
from conftest import numeric_grad, rel_err

rng = np.random.default_rng(1234)


def leaf(shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def check_grad(build, leaves, tol=1e-6, floor=1e-6):
    """Compare autodiff grads of scalar ``build()`` with central differences."""
    for p in leaves:
        p.grad = None
    build().backward()
    for p in leaves:
        num = numeric_grad(lambda: float(build().data), p.data)
        got = np.zeros_like(p.data) if p.grad is None else p.grad
        assert rel_err(got, num, floor) <= tol, p


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    m = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_matmul_hand_value():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_is_row_broadcast_of_column_sums():
    a, b = leaf((4, 3)), leaf((3, 5))
    T.sum(T.matmul(a, b)).backward()
    expected = np.broadcast_to(b.data.sum(axis=1), (4, 3))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)
    check_grad(lambda: T.sum(T.square(T.matmul(a, b))), [a, b])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(leaf((2, 3)), leaf((2, 3)))


# ---------------------------------------------------------------- conv2d


def test_conv_unit_kernel_is_identity(backend):
    x = rng.standard_normal((2, 1, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_on_constant(backend):
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, 9.0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_output_size_and_brute_force(backend, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (7 + 2 * pad - 3) // stride + 1
    ow = (6 + 2 * pad - 3) // stride + 1
    ref = np.zeros((2, 4, oh, ow))
    for n in range(2):
        for f in range(4):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[n, f, i, j] = np.sum(patch * k[f])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_grad_fd(backend):
    x, k, b = leaf((2, 3, 8, 8)), leaf((4, 3, 3, 3)), leaf((4,))
    w = rng.standard_normal((2, 4, 8, 8))
    check_grad(lambda: T.sum(T.mul(T.conv2d(x, k, b, 1, 1), w)), [x, k, b], tol=1e-4)


def test_conv_grad_strided_fd(backend):
    x, k = leaf((1, 2, 7, 7)), leaf((3, 2, 3, 3))
    w = rng.standard_normal((1, 3, 4, 4))
    check_grad(lambda: T.sum(T.mul(T.conv2d(x, k, None, 2, 1), w)), [x, k], tol=1e-6)


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(leaf((1, 1, 2, 2)), leaf((1, 1, 3, 3)))


# ---------------------------------------------------------------- elementwise / reductions


def test_relu_values_and_subgradient():
    x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
    y = T.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 3.0])
    T.sum(y).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_uniform_logits_cross_entropy():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 7, 9]))
    assert math.isclose(float(loss.data), math.log(10), rel_tol=1e-15)


def test_cross_entropy_label_range():
    with pytest.raises(InputError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_even_power_value_and_grad():
    x = Tensor([-2.0], requires_grad=True)
    y = T.even_power(x, 4)
    assert y.data[0] == 16.0
    T.sum(y).backward()
    assert x.grad[0] == -32.0
    num = numeric_grad(lambda: float(T.sum(T.even_power(x, 4)).data), x.data)
    assert abs(num[0] + 32.0) < 1e-6
    with pytest.raises(UsageError):
        T.even_power(x, 3)


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: T.sum(T.add(a, b)),
        lambda a, b: T.sum(T.sub(T.mul(a, b), b)),
        lambda a, b: T.mean(T.square(a)),
        lambda a, b: T.sum(T.exp(T.mul(a, 0.3))),
        lambda a, b: T.sum(T.reciprocal(T.add(T.square(a), 1.0))),
        lambda a, b: T.sum(T.mul(T.abs(a), b)),
        lambda a, b: T.sum(T.even_power(a, 6)),
        lambda a, b: T.sum(T.mul(T.relu(a), b)),
        lambda a, b: T.sum(T.mean(T.mul(a, b), axis=1)),
    ],
)
def test_elementwise_grads_fd(op):
    a = Tensor(rng.standard_normal((3, 4)) + 0.05, requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    check_grad(lambda: op(a, b), [a, b])


def test_broadcast_add_grad():
    a, b = leaf((3, 4)), leaf((4,))
    check_grad(lambda: T.sum(T.square(T.add(a, b))), [a, b])


def test_maxpool_values_ties_and_grad(backend):
    x = Tensor(np.array([[[[1.0, 1.0], [0.0, 1.0]]]]), requires_grad=True)
    y = T.maxpool2d(x, 2)
    assert y.data.item() == 1.0
    T.sum(y).backward()
    # tie goes to the first row-major maximum
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])
    z = leaf((2, 3, 6, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    check_grad(lambda: T.sum(T.mul(T.maxpool2d(z, 2), w)), [z])


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_grad_fd(training):
    x, g, b = leaf((4, 3, 3, 3)), leaf((3,)), leaf((3,))
    w = rng.standard_normal((4, 3, 3, 3))
    rm, rv = np.zeros(3), np.ones(3) * 1.5

    def f():
        return T.sum(T.mul(T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training), w))

    check_grad(f, [x, g, b], tol=1e-5)


def test_batchnorm_running_stats_update():
    x = Tensor(rng.standard_normal((8, 2, 4, 4)) * 3 + 1)
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))


def test_cross_entropy_grad_fd():
    z = leaf((5, 4))
    y = np.array([0, 1, 2, 3, 1])
    check_grad(lambda: T.softmax_cross_entropy(z, y), [z])


# ---------------------------------------------------------------- backward contract


def test_backward_sum_and_square():
    w = leaf((3, 2))
    T.sum(w).backward()
    np.testing.assert_array_equal(w.grad, np.ones((3, 2)))
    w.zero_grad()
    T.sum(T.mul(w, w)).backward()
    np.testing.assert_array_equal(w.grad, 2 * w.data)


def test_backward_accumulates_without_reset():
    w = leaf((2,))
    T.sum(w).backward()
    T.sum(w).backward()
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_backward_nonscalar_rejected():
    with pytest.raises(UsageError):
        T.mul(leaf((2,)), 2.0).backward()


def test_nonfinite_loss_rejected():
    w = Tensor([0.0], requires_grad=True)
    with np.errstate(divide="ignore"):
        loss = T.sum(T.reciprocal(w))
    with pytest.raises(NonFiniteError):
        loss.backward()


def test_backward_linearity():
    w = leaf((3, 3))
    l1 = lambda: T.sum(T.exp(T.mul(w, 0.5)))  # noqa: E731
    l2 = lambda: T.sum(T.square(T.matmul(w, w)))  # noqa: E731
    l1().backward()
    g1 = w.grad.copy()
    w.zero_grad()
    l2().backward()
    g2 = w.grad.copy()
    w.zero_grad()
    T.add(T.mul(l1(), 2.5), T.mul(l2(), -0.7)).backward()
    np.testing.assert_allclose(w.grad, 2.5 * g1 - 0.7 * g2, rtol=1e-12, atol=1e-12)


def test_shared_subexpression_diamond():
    x = leaf((2,))
    y = T.square(x)
    T.sum(T.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_no_grad_builds_no_graph():
    w = leaf((2,))
    with T.no_grad():
        y = T.mul(w, 3.0)
    assert y.is_leaf and not y.requires_grad


def test_float32_opt_in_preserved():
    a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    b = T.matmul(a, a)
    assert b.dtype == np.float32
