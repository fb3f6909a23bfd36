"""Conv2d backend dispatch.

Selects the compiled extension when it imports cleanly, otherwise the
pure-numpy fallback. FLDKIT_KERNEL_BACKEND={compiled,python} forces one;
forcing "compiled" when the extension is missing is an import-time error.
Both backends share the same GEMM (numpy/BLAS): the backend only supplies
the patch gather/scatter.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_requested = os.environ.get("FLDKIT_KERNEL_BACKEND", "").strip().lower()
if _requested == "python":
    _impl = _kernels_py
elif _requested == "compiled":
    from . import _kernels as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND_NAME


def out_size(size: int, k: int, stride: int, padding: int) -> int:
    return _impl.out_size(size, k, stride, padding)


def conv2d_forward(x: np.ndarray, kern: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """x (B,H,W,Cin), kern (KH,KW,Cin,Cout) -> (B,OH,OW,Cout)."""
    b, h, w, _ = x.shape
    kh, kw, _, co = kern.shape
    oh = out_size(h, kh, stride, padding)
    ow = out_size(w, kw, stride, padding)
    cols = _impl.im2col(np.ascontiguousarray(x), kh, kw, stride, padding)
    y = cols @ kern.reshape(kh * kw * kern.shape[2], co)
    return y.reshape(b, oh, ow, co)


def conv2d_backward(
    x: np.ndarray,
    kern: np.ndarray,
    dy: np.ndarray,
    stride: int,
    padding: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients wrt input and kernel for conv2d_forward."""
    kh, kw, ci, co = kern.shape
    cols = _impl.im2col(np.ascontiguousarray(x), kh, kw, stride, padding)
    dy2 = np.ascontiguousarray(dy).reshape(-1, co)
    dkern = (cols.T @ dy2).reshape(kh, kw, ci, co)
    dcols = dy2 @ kern.reshape(kh * kw * ci, co).T
    dx = _impl.col2im(dcols, x.shape, kh, kw, stride, padding)
    return dx, dkern
