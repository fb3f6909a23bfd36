# cython: language_level=3
"""Compiled conv2d patch kernels.

Same contract as _kernels_py: (B, H, W, C) float64 images, single-pass
im2col gather and col2im scatter-add with zero padding handled in the loop
instead of materializing a padded copy.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "compiled"


def out_size(int size, int k, int stride, int padding):
    return (size + 2 * padding - k) // stride + 1


def im2col(cnp.ndarray[cnp.float64_t, ndim=4] x, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cols = np.zeros((b * oh * ow, kh * kw * c), dtype=np.float64)
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, ::1] cv = cols
    cdef Py_ssize_t n, oi, oj, i, j, ch, row, ii, jj, col0
    for n in range(b):
        for oi in range(oh):
            for oj in range(ow):
                row = (n * oh + oi) * ow + oj
                for i in range(kh):
                    ii = oi * stride + i - padding
                    if ii < 0 or ii >= h:
                        continue
                    for j in range(kw):
                        jj = oj * stride + j - padding
                        if jj < 0 or jj >= w:
                            continue
                        col0 = (i * kw + j) * c
                        for ch in range(c):
                            cv[row, col0 + ch] = xv[n, ii, jj, ch]
    return cols


def col2im(cnp.ndarray[cnp.float64_t, ndim=2] cols, shape, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t b = shape[0], h = shape[1], w = shape[2], c = shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = np.zeros((b, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef double[:, ::1] cv = np.ascontiguousarray(cols)
    cdef Py_ssize_t n, oi, oj, i, j, ch, row, ii, jj, col0
    for n in range(b):
        for oi in range(oh):
            for oj in range(ow):
                row = (n * oh + oi) * ow + oj
                for i in range(kh):
                    ii = oi * stride + i - padding
                    if ii < 0 or ii >= h:
                        continue
                    for j in range(kw):
                        jj = oj * stride + j - padding
                        if jj < 0 or jj >= w:
                            continue
                        col0 = (i * kw + j) * c
                        for ch in range(c):
                            ov[n, ii, jj, ch] += cv[row, col0 + ch]
    return out
