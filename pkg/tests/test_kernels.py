"""Backend parity: the compiled patch kernels must agree with the numpy
fallback on every shape, including padding edge cases."""
from __future__ import annotations

import numpy as np
import pytest

from fldkit import _kernels_py, kernels

try:
    from fldkit import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None

needs_compiled = pytest.mark.skipif(_compiled is None, reason="compiled kernels not built")

SHAPES = [
    (1, 5, 5, 1, 3, 1, 0),
    (2, 8, 8, 3, 3, 2, 1),
    (4, 7, 6, 2, 2, 3, 2),
    (1, 3, 3, 4, 3, 1, 2),
]


def test_backend_reports_name():
    assert kernels.BACKEND in {"compiled", "python"}


@needs_compiled
@pytest.mark.parametrize("b,h,w,c,k,s,p", SHAPES)
def test_im2col_parity(b, h, w, c, k, s, p):
    x = np.random.default_rng(0).normal(size=(b, h, w, c))
    got = _compiled.im2col(x, k, k, s, p)
    want = _kernels_py.im2col(x, k, k, s, p)
    np.testing.assert_array_equal(got, want)


@needs_compiled
@pytest.mark.parametrize("b,h,w,c,k,s,p", SHAPES)
def test_col2im_parity(b, h, w, c, k, s, p):
    oh = _kernels_py.out_size(h, k, s, p)
    ow = _kernels_py.out_size(w, k, s, p)
    cols = np.random.default_rng(1).normal(size=(b * oh * ow, k * k * c))
    got = _compiled.col2im(cols, (b, h, w, c), k, k, s, p)
    want = _kernels_py.col2im(cols, (b, h, w, c), k, k, s, p)
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-13)


def test_col2im_is_adjoint_of_im2col():
    """<im2col(x), c> == <x, col2im(c)> for random x, c (gather/scatter duality)."""
    rng = np.random.default_rng(2)
    b, h, w, ch, k, s, p = 2, 6, 5, 3, 3, 2, 1
    x = rng.normal(size=(b, h, w, ch))
    cols_shape = _kernels_py.im2col(x, k, k, s, p).shape
    c = rng.normal(size=cols_shape)
    lhs = float(np.sum(_kernels_py.im2col(x, k, k, s, p) * c))
    rhs = float(np.sum(x * _kernels_py.col2im(c, x.shape, k, k, s, p)))
    assert abs(lhs - rhs) < 1e-9


@needs_compiled
def test_conv_forward_backward_parity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 9, 9, 2))
    kern = rng.normal(size=(3, 3, 2, 4))
    dy_shape = (3, kernels.out_size(9, 3, 2, 1), kernels.out_size(9, 3, 2, 1), 4)
    dy = rng.normal(size=dy_shape)

    def run(impl):
        cols = impl.im2col(x, 3, 3, 2, 1)
        y = (cols @ kern.reshape(-1, 4)).reshape(dy_shape)
        dk = (cols.T @ dy.reshape(-1, 4)).reshape(kern.shape)
        dx = impl.col2im(dy.reshape(-1, 4) @ kern.reshape(-1, 4).T, x.shape, 3, 3, 2, 1)
        return y, dk, dx

    y1, dk1, dx1 = run(_kernels_py)
    y2, dk2, dx2 = run(_compiled)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(dk1, dk2)
    np.testing.assert_allclose(dx1, dx2, rtol=1e-13, atol=1e-13)
