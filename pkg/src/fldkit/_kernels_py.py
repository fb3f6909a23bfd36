"""Pure-numpy conv2d patch kernels (fallback backend).

Layouts: images are (B, H, W, C) float64 C-contiguous, kernels are
(KH, KW, Cin, Cout). im2col returns (B*OH*OW, KH*KW*Cin) so the convolution
reduces to one GEMM against the kernel reshaped to (KH*KW*Cin, Cout).
"""
from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    b, h, w, c = x.shape
    oh = out_size(h, kh, stride, padding)
    ow = out_size(w, kw, stride, padding)
    if padding > 0:
        xp = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=np.float64)
        xp[:, padding:padding + h, padding:padding + w, :] = x
    else:
        xp = x
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols.reshape(b * oh * ow, kh * kw * c)


def col2im(
    cols: np.ndarray,
    shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Scatter-add of im2col's gather; returns an array of the given image shape."""
    b, h, w, c = shape
    oh = out_size(h, kh, stride, padding)
    ow = out_size(w, kw, stride, padding)
    xp = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=np.float64)
    cols6 = cols.reshape(b, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols6[:, :, :, i, j, :]
    if padding > 0:
        return xp[:, padding:padding + h, padding:padding + w, :]
    return xp
