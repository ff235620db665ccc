# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im kernels for conv2d.

Same contracts as fadct._kernels.fallback; see that module for the layout
documentation. These exist because the scatter-add in col2im and the strided
gather in im2col dominate ResNet-branch training time in pure numpy.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(cnp.ndarray[cnp.float64_t, ndim=4] x, int kh, int kw, int stride):
    cdef Py_ssize_t bsz = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=3] cols = \
        np.empty((bsz, c * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, :, ::1] cv = cols
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row
    with nogil:
        for b in range(bsz):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for oi in range(oh):
                            for oj in range(ow):
                                cv[b, row, oi * ow + oj] = \
                                    xv[b, ch, oi * stride + ki, oj * stride + kj]
    return cols


def col2im(cnp.ndarray[cnp.float64_t, ndim=3] cols, tuple x_shape,
           int kh, int kw, int stride):
    cdef Py_ssize_t bsz = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = \
        np.zeros((bsz, c, h, w), dtype=np.float64)
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row
    with nogil:
        for b in range(bsz):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for oi in range(oh):
                            for oj in range(ow):
                                ov[b, ch, oi * stride + ki, oj * stride + kj] += \
                                    cv[b, row, oi * ow + oj]
    return out
