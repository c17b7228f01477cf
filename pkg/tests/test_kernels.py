import os
import subprocess
import sys

import numpy as np
import pytest

from covidnet import kernels
from oracles import naive_conv2d, naive_maxpool

CONV_CASES = [
    # x shape, w shape, stride, pad, groups
    ((2, 3, 7, 6), (4, 3, 3, 3), 1, 1, 1),
    ((2, 3, 9, 9), (5, 3, 3, 3), 2, 0, 1),
    ((1, 1, 11, 11), (4, 1, 7, 7), 2, 3, 1),
    ((2, 4, 8, 8), (4, 1, 3, 3), 1, 1, 4),
    ((2, 6, 7, 5), (6, 1, 3, 3), 2, 1, 6),
    ((2, 6, 6, 6), (4, 3, 3, 3), 1, 1, 2),
    ((1, 8, 5, 5), (8, 2, 1, 1), 1, 0, 4),
    ((2, 5, 4, 4), (3, 5, 1, 1), 1, 0, 1),
    ((1, 4, 6, 6), (2, 4, 1, 1), 2, 1, 1),
]


@pytest.mark.parametrize("use_numba", [False, True])
@pytest.mark.parametrize("xs,ws,stride,pad,groups", CONV_CASES)
def test_conv_forward_matches_loop_nest(xs, ws, stride, pad, groups, use_numba):
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal(xs), rng.standard_normal(ws), rng.standard_normal(ws[0])
    got = kernels.conv2d_forward(x, w, b, stride, pad, groups, use_numba=use_numba)
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad, groups), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("xs,ws,stride,pad,groups", CONV_CASES)
def test_conv_backends_agree_on_gradients(xs, ws, stride, pad, groups):
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal(xs), rng.standard_normal(ws)
    y = kernels.conv2d_forward_np(x, w, np.zeros(ws[0]), stride, pad, groups)
    g = rng.standard_normal(y.shape)
    gx_np, gw_np = kernels.conv2d_backward_np(x, w, g, stride, pad, groups)
    gx_nb, gw_nb = kernels.conv2d_backward_nb(x, w, g, stride, pad, groups)
    np.testing.assert_allclose(gx_np, gx_nb, rtol=1e-11, atol=1e-11)
    np.testing.assert_allclose(gw_np, gw_nb, rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("xs,ws,stride,pad,groups", CONV_CASES[:6])
def test_conv_backward_is_adjoint_of_forward(xs, ws, stride, pad, groups):
    # <conv(x), g> is linear in x and in w, so its gradients are exact
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal(xs), rng.standard_normal(ws)
    zero = np.zeros(ws[0])
    y = kernels.conv2d_forward(x, w, zero, stride, pad, groups)
    g = rng.standard_normal(y.shape)
    gx, gw, gb = kernels.conv2d_backward(x, w, g, stride, pad, groups)
    dx, dw = rng.standard_normal(xs), rng.standard_normal(ws)
    lhs_x = np.sum(kernels.conv2d_forward(dx, w, zero, stride, pad, groups) * g)
    lhs_w = np.sum(kernels.conv2d_forward(x, dw, zero, stride, pad, groups) * g)
    assert lhs_x == pytest.approx(np.sum(gx * dx), rel=1e-10)
    assert lhs_w == pytest.approx(np.sum(gw * dw), rel=1e-10)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))


def test_need_input_false_skips_input_gradient():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 1, 9, 9)), rng.standard_normal((3, 1, 3, 3))
    g = rng.standard_normal((2, 3, 9, 9))
    gx, gw, _ = kernels.conv2d_backward(x, w, g, 1, 1, 1, need_input=False)
    assert gx is None
    np.testing.assert_allclose(gw, kernels.conv2d_backward_np(x, w, g, 1, 1, 1)[1])


@pytest.mark.parametrize("use_numba", [False, True])
@pytest.mark.parametrize("shape,window,stride", [((2, 3, 8, 8), 2, 2), ((1, 2, 7, 5), 2, 2), ((1, 2, 7, 7), 3, 2)])
def test_maxpool_matches_loop_nest(shape, window, stride, use_numba):
    x = np.random.default_rng(4).standard_normal(shape)
    y, arg = kernels.maxpool_forward(x, window, stride, use_numba=use_numba)
    np.testing.assert_array_equal(y, naive_maxpool(x, window, stride))
    g = np.ones_like(y)
    gx = kernels.maxpool_backward(g, arg, x.shape, window, stride, use_numba=use_numba)
    # each output routes its unit gradient to one input holding the window max
    assert gx.sum() == y.size
    assert np.sum(x * gx) == pytest.approx(y.sum(), rel=1e-12)


def test_maxpool_backends_agree():
    x = np.random.default_rng(5).standard_normal((3, 4, 10, 10))
    y1, a1 = kernels.maxpool_forward_np(x, 2, 2)
    y2, a2 = kernels.maxpool_forward_nb(x, 2, 2)
    np.testing.assert_array_equal(y1, y2)
    g = np.random.default_rng(6).standard_normal(y1.shape)
    np.testing.assert_array_equal(kernels.maxpool_backward_np(g, a1, x.shape, 2, 2),
                                  kernels.maxpool_backward_nb(g, a2, x.shape, 2, 2))


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(7)
    x, w, b = rng.standard_normal((2, 8, 6, 6)), rng.standard_normal((8, 1, 3, 3)), rng.standard_normal(8)
    a = kernels.conv2d_forward(x, w, b, 1, 1, 8)
    c = kernels.conv2d_forward(x, w, b, 1, 1, 8)
    assert a.tobytes() == c.tobytes()


def test_env_flag_disables_numba():
    code = "import covidnet._jit as j, covidnet.kernels as k; print(j.NUMBA_ENABLED, k.NUMBA_ENABLED)"
    env = dict(os.environ, COVIDNET_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "False"]
