"""Backend equivalence and gradient checks for the hot kernels."""

import os
import subprocess
import sys

import numpy as np
import pytest

from loopfit import autograd, kernels
from loopfit.autograd import Parameter
from loopfit.gradcheck import gradient_check
from loopfit.kernels import _fallback

RNG = np.random.default_rng(99)


def _random_case(dtype, b=2, c_in=3, c_out=5, h=7, w=6):
    x = RNG.normal(size=(b, c_in, h, w)).astype(dtype)
    wgt = RNG.normal(size=(c_out, c_in, 3, 3)).astype(dtype)
    bias = RNG.normal(size=c_out).astype(dtype)
    return x, wgt, bias


@pytest.mark.skipif(not kernels.HAVE_COMPILED, reason="compiled extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv_forward_backends_agree(dtype):
    x, w, b = _random_case(dtype)
    y_fast = kernels._impl.conv2d_forward(x, w, b)
    y_slow = _fallback.conv2d_forward(x, w, b)
    assert y_fast.dtype == dtype
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(y_fast, y_slow, rtol=tol, atol=tol)


@pytest.mark.skipif(not kernels.HAVE_COMPILED, reason="compiled extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv_backward_backends_agree(dtype):
    x, w, b = _random_case(dtype)
    dy = RNG.normal(size=_fallback.conv2d_forward(x, w, b).shape).astype(dtype)
    fast = kernels._impl.conv2d_backward(x, w, dy)
    slow = _fallback.conv2d_backward(x, w, dy)
    tol = 1e-4 if dtype == np.float32 else 1e-11
    for a, s in zip(fast, slow):
        np.testing.assert_allclose(a, s, rtol=tol, atol=tol)


@pytest.mark.skipif(not kernels.HAVE_COMPILED, reason="compiled extension not built")
def test_dtw_backends_agree():
    for _ in range(20):
        la, lb = RNG.integers(1, 40, size=2)
        dist = np.abs(RNG.normal(size=(la, lb)))
        c_fast, b_fast = kernels._impl.dtw_table(dist)
        c_slow, b_slow = _fallback.dtw_table(dist)
        np.testing.assert_allclose(c_fast, c_slow, rtol=1e-14)
        np.testing.assert_array_equal(b_fast, b_slow)


def test_conv_op_gradient_check():
    x, w, b = _random_case(np.float64, b=2, c_in=2, c_out=3, h=5, w=4)
    xp = Parameter(x)
    wp = Parameter(w)
    bp = Parameter(b)
    probe = np.asarray(RNG.normal(size=(2, 3, 5, 4)))

    def closure():
        out = autograd.conv2d(xp, wp, bp)
        return (out * autograd.Tensor(probe)).sum()

    err = gradient_check(closure, [xp, wp, bp], step=1e-5)
    assert err < 1e-7


def test_conv_same_padding_shape_and_identity_kernel():
    x = RNG.normal(size=(1, 1, 6, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0  # center tap only: convolution is the identity
    y = kernels.conv2d_forward(x, w, np.zeros(1))
    assert y.shape == x.shape
    np.testing.assert_allclose(y, x, rtol=1e-14)


def test_dtw_table_simple_hand_case():
    dist = np.array([[1.0, 9.0], [9.0, 1.0]])
    cost, back = kernels.dtw_table(dist)
    assert cost[1, 1] == 2.0  # diagonal path
    assert back[1, 1] == 0


def test_env_var_forces_numpy_fallback():
    code = "import loopfit.kernels as k; print(k.backend_name())"
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={**os.environ, "LOOPFIT_NO_EXT": "1"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
