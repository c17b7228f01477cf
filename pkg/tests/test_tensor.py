import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covidnet import tensor as T
from covidnet.errors import ShapeError
from oracles import naive_conv2d


# --- Tensor --------------------------------------------------------------------

def test_tensor_is_immutable_float64():
    t = T.Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64 and t.shape == (2, 2) and t.size == 4
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0


def test_ops_keep_extreme_finite_inputs_finite():
    big = T.Tensor([[1e300, -1e300, 0.0]])
    p = T.softmax(big)
    assert np.isfinite(p.data).all()
    assert np.isfinite(T.cross_entropy(p, np.array([1])).data).all()
    assert np.isfinite(T.relu(big).data).all()


# --- conv2d --------------------------------------------------------------------

def test_identity_pointwise_conv_returns_input():
    x = T.Tensor(np.random.default_rng(0).standard_normal((2, 5, 4, 3)))
    w = T.Tensor(np.eye(5)[:, :, None, None])
    y = T.conv2d(x, w, T.Tensor(np.zeros(5)), T.ConvSpec(1, 1, 5, 5))
    np.testing.assert_array_equal(y.data, x.data)


def test_depthwise_all_ones_sums_each_neighbourhood():
    x = np.random.default_rng(1).standard_normal((1, 4, 8, 8))
    spec = T.ConvSpec(3, 3, 4, 4, stride=1, padding=1, groups=4)
    y = T.conv2d(T.Tensor(x), T.Tensor(np.ones((4, 1, 3, 3))), None, spec).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expect = np.zeros_like(x)
    for c in range(4):
        for i in range(8):
            for j in range(8):
                expect[0, c, i, j] = xp[0, c, i : i + 3, j : j + 3].sum()
    np.testing.assert_allclose(y, expect, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(y, naive_conv2d(x, np.ones((4, 1, 3, 3)), None, 1, 1, 4), rtol=1e-13, atol=1e-13)


def test_pointwise_conv_is_per_pixel_matmul():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((1, 6, 5, 4)), rng.standard_normal((3, 6, 1, 1))
    y = T.conv2d(T.Tensor(x), T.Tensor(w), None, T.ConvSpec(1, 1, 6, 3)).data
    for i in range(5):
        for j in range(4):
            np.testing.assert_allclose(y[0, :, i, j], w[:, :, 0, 0] @ x[0, :, i, j], rtol=1e-13)


def test_conv_output_size_formula():
    spec = T.ConvSpec(7, 5, 1, 2, stride=3, padding=2)
    x = T.Tensor(np.zeros((1, 1, 17, 13)))
    y = T.conv2d(x, T.Tensor(np.zeros(spec.weight_shape)), None, spec)
    assert y.shape == (1, 2, (17 + 4 - 7) // 3 + 1, (13 + 4 - 5) // 3 + 1)


def test_group_decomposition():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 6, 5, 5)), rng.standard_normal((4, 3, 3, 3))
    grouped = T.conv2d(T.Tensor(x), T.Tensor(w), None, T.ConvSpec(3, 3, 6, 4, padding=1, groups=2)).data
    halves = [
        T.conv2d(T.Tensor(x[:, 3 * g : 3 * g + 3]), T.Tensor(w[2 * g : 2 * g + 2]), None,
                 T.ConvSpec(3, 3, 3, 2, padding=1)).data
        for g in range(2)
    ]
    np.testing.assert_allclose(grouped, np.concatenate(halves, axis=1), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("kwargs,msg", [
    (dict(in_channels=6, out_channels=4, groups=4), "groups=4"),
    (dict(in_channels=0, out_channels=4), "in_channels"),
])
def test_convspec_rejects_bad_groups(kwargs, msg):
    with pytest.raises(ShapeError, match=msg):
        T.ConvSpec(3, 3, **kwargs)


def test_conv_diagnostics_name_dimension():
    spec = T.ConvSpec(3, 3, 4, 8)
    with pytest.raises(ShapeError, match="axis 1"):
        T.conv2d(T.Tensor(np.zeros((1, 3, 8, 8))), T.Tensor(np.zeros(spec.weight_shape)), None, spec)
    with pytest.raises(ShapeError, match="weight dimension 1"):
        T.conv2d(T.Tensor(np.zeros((1, 4, 8, 8))), T.Tensor(np.zeros((8, 2, 3, 3))), None, spec)


# --- head ops ------------------------------------------------------------------

def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(T.softmax(T.Tensor(np.zeros((1, 3)))).data, [[1 / 3] * 3], rtol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(-100, 100))
@settings(max_examples=200, deadline=None)
def test_softmax_sums_to_one_and_argmax_shift_invariant(logits, c):
    z = np.array([logits])
    p = T.softmax(T.Tensor(z)).data
    assert abs(p.sum() - 1) < 1e-12
    assert np.argmax(T.softmax(T.Tensor(z + c)).data) == np.argmax(p)


def test_cross_entropy_closed_forms():
    onehot = T.Tensor(np.eye(3))
    assert abs(T.cross_entropy(onehot, np.arange(3)).item()) < 1e-12
    uniform = T.Tensor(np.full((4, 3), 1 / 3))
    assert T.cross_entropy(uniform, np.array([0, 1, 2, 0])).item() == pytest.approx(math.log(3), rel=1e-14)


def test_cross_entropy_clamps_and_rejects_bad_labels():
    p = T.Tensor([[1.0, 0.0, 0.0]])
    assert T.cross_entropy(p, np.array([1])).item() == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        T.cross_entropy(p, np.array([3]))
    with pytest.raises(ValueError):
        T.cross_entropy(p, np.array([-1]))


def test_global_avg_pool_and_dense_values():
    x = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
    np.testing.assert_allclose(T.global_avg_pool(T.Tensor(x)).data, x.mean(axis=(2, 3)))
    W, b = np.arange(6.0).reshape(2, 3), np.array([1.0, -1.0])
    v = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(T.dense(T.Tensor(v), T.Tensor(W), T.Tensor(b)).data, [[9.0, 25.0]])


# --- backward ------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = T.Tensor(np.random.default_rng(4).standard_normal((3, 4)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(x)
    np.testing.assert_array_equal(T.backward(tape, loss).array(x), np.ones((3, 4)))


def test_backward_of_relu_sum_is_positive_mask():
    data = np.array([[-1.0, 2.0, -0.5], [3.0, -4.0, 0.25]])
    x = T.Tensor(data, requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.relu(x))
    np.testing.assert_array_equal(T.backward(tape, loss).array(x), (data > 0).astype(float))


def test_unreached_tensor_gets_zero_gradient():
    x = T.Tensor(np.ones(3), requires_grad=True)
    unused = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(x)
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads.array(unused), np.zeros((2, 2)))


def test_backward_rejects_nonscalar_loss():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.relu(x)
    with pytest.raises(ShapeError):
        T.backward(tape, y)


def test_gradient_accumulates_over_shared_use():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.mul(x, x))
    np.testing.assert_allclose(T.backward(tape, loss).array(x), [2.0, 4.0])


def test_tape_records_in_topological_order():
    x = T.Tensor(np.ones((1, 2)), requires_grad=True)
    with T.Tape() as tape:
        T.sum(T.relu(T.add(x, x)))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(t) in seen or not t.requires_grad for t in node.inputs)
        seen.add(id(node.out))


# --- grad_check examples -------------------------------------------------------

def test_grad_check_dense_4x8():
    rng = np.random.default_rng(5)
    err = T.grad_check(lambda x, w, b: T.dense(x, w, b),
                       lambda: (rng.standard_normal((4, 8)), rng.standard_normal((5, 8)), rng.standard_normal(5)))
    assert err <= 1e-3


@pytest.mark.parametrize("groups,cin,cout", [(1, 3, 4), (3, 3, 3)])
def test_grad_check_conv(groups, cin, cout):
    rng = np.random.default_rng(6)
    spec = T.ConvSpec(3, 3, cin, cout, padding=1, groups=groups)
    err = T.grad_check(lambda x, w, b: T.conv2d(x, w, b, spec),
                       lambda: (rng.standard_normal((2, cin, 5, 5)), rng.standard_normal(spec.weight_shape),
                                rng.standard_normal(cout)))
    assert err <= 1e-3


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        return T._result(x.data ** 2, (x,), lambda g: (g * x.data,))  # true derivative is 2x

    err = T.grad_check(bad, lambda: (np.random.default_rng(7).uniform(0.5, 1.0, (3,)),))
    assert err > 0.3
