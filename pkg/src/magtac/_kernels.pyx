# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels for strided, zero-padded 2-D convolution.

Column layout matches :mod:`magtac._fallback`: rows ordered ``(n, oh, ow)``,
columns ``(c, kh, kw)``.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_batch = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t oh = (height + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (width + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_batch * oh * ow, chans * kh * kw), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t n, c, i, j, p, q, row, col, yy, xx
    with nogil:
        for n in range(n_batch):
            for i in range(oh):
                for j in range(ow):
                    row = (n * oh + i) * ow + j
                    col = 0
                    for c in range(chans):
                        for p in range(kh):
                            yy = i * stride + p - pad
                            if yy < 0 or yy >= height:
                                col += kw
                                continue
                            for q in range(kw):
                                xx = j * stride + q - pad
                                if 0 <= xx < width:
                                    cols[row, col] = x[n, c, yy, xx]
                                col += 1
    return out


def col2im(real[:, ::1] cols, Py_ssize_t n_batch, Py_ssize_t chans,
           Py_ssize_t height, Py_ssize_t width, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (height + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (width + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_batch, chans, height, width), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, i, j, p, q, row, col, yy, xx
    with nogil:
        for n in range(n_batch):
            for i in range(oh):
                for j in range(ow):
                    row = (n * oh + i) * ow + j
                    col = 0
                    for c in range(chans):
                        for p in range(kh):
                            yy = i * stride + p - pad
                            if yy < 0 or yy >= height:
                                col += kw
                                continue
                            for q in range(kw):
                                xx = j * stride + q - pad
                                if 0 <= xx < width:
                                    dx[n, c, yy, xx] += cols[row, col]
                                col += 1
    return out
