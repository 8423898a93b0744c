# cython: language_level=3
"""Compiled hot loops: dilated convolution, transposed convolution, max pooling.

Each function mirrors the signature and, for the forward passes, the exact
per-element floating-point accumulation order of ``dilseg._kernels_py`` so
the two backends agree bitwise on forward outputs. Kernel tap order is
fixed to (input channel, kernel row, kernel column), bias added last.

Inputs arrive pre-padded; all shape/padding policy lives in ``dilseg.ops``.
"""

from libc.stdint cimport int64_t

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, ::1] xpad, double[:, :, :, ::1] weight,
                   double[::1] bias, Py_ssize_t dilation, Py_ssize_t stride,
                   Py_ssize_t out_h, Py_ssize_t out_w):
    """out[o,i,j] = sum_{c,mi,ni} xpad[c, i*s+r*mi, j*s+r*ni] * w[o,c,mi,ni] + b[o]."""
    cdef Py_ssize_t c_out = weight.shape[0]
    cdef Py_ssize_t c_in = weight.shape[1]
    cdef Py_ssize_t m = weight.shape[2]
    out_arr = np.zeros((c_out, out_h, out_w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t o, c, mi, ni, i, j, row, col0
    cdef double kv, bv
    with nogil:
        for o in range(c_out):
            for c in range(c_in):
                for mi in range(m):
                    for ni in range(m):
                        kv = weight[o, c, mi, ni]
                        col0 = dilation * ni
                        for i in range(out_h):
                            row = i * stride + dilation * mi
                            for j in range(out_w):
                                out[o, i, j] += xpad[c, row, col0 + j * stride] * kv
            bv = bias[o]
            for i in range(out_h):
                for j in range(out_w):
                    out[o, i, j] += bv
    return out_arr


def conv2d_grad_input(double[:, :, ::1] grad_out, double[:, :, :, ::1] weight,
                      Py_ssize_t dilation, Py_ssize_t stride,
                      Py_ssize_t pad_h, Py_ssize_t pad_w):
    """Adjoint of conv2d_forward w.r.t. the (padded) input."""
    cdef Py_ssize_t c_out = weight.shape[0]
    cdef Py_ssize_t c_in = weight.shape[1]
    cdef Py_ssize_t m = weight.shape[2]
    cdef Py_ssize_t out_h = grad_out.shape[1]
    cdef Py_ssize_t out_w = grad_out.shape[2]
    gx_arr = np.zeros((c_in, pad_h, pad_w), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t o, c, mi, ni, i, j, row, col0
    cdef double kv
    with nogil:
        for o in range(c_out):
            for c in range(c_in):
                for mi in range(m):
                    for ni in range(m):
                        kv = weight[o, c, mi, ni]
                        col0 = dilation * ni
                        for i in range(out_h):
                            row = i * stride + dilation * mi
                            for j in range(out_w):
                                gx[c, row, col0 + j * stride] += grad_out[o, i, j] * kv
    return gx_arr


def conv2d_grad_kernel(double[:, :, ::1] grad_out, double[:, :, ::1] xpad,
                       Py_ssize_t dilation, Py_ssize_t stride, Py_ssize_t m):
    """gw[o,c,mi,ni] = sum_{i,j} grad_out[o,i,j] * xpad[c, i*s+r*mi, j*s+r*ni]."""
    cdef Py_ssize_t c_out = grad_out.shape[0]
    cdef Py_ssize_t out_h = grad_out.shape[1]
    cdef Py_ssize_t out_w = grad_out.shape[2]
    cdef Py_ssize_t c_in = xpad.shape[0]
    gw_arr = np.zeros((c_out, c_in, m, m), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t o, c, mi, ni, i, j, row, col0
    cdef double acc
    with nogil:
        for o in range(c_out):
            for c in range(c_in):
                for mi in range(m):
                    for ni in range(m):
                        col0 = dilation * ni
                        acc = 0.0
                        for i in range(out_h):
                            row = i * stride + dilation * mi
                            for j in range(out_w):
                                acc += grad_out[o, i, j] * xpad[c, row, col0 + j * stride]
                        gw[o, c, mi, ni] = acc
    return gw_arr


def tconv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] weight,
                    Py_ssize_t stride):
    """y[o, i*s+mi, j*s+ni] += x[c,i,j] * w[c,o,mi,ni]; y is (H-1)*s+M per axis."""
    cdef Py_ssize_t c_in = weight.shape[0]
    cdef Py_ssize_t c_out = weight.shape[1]
    cdef Py_ssize_t m = weight.shape[2]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t w = x.shape[2]
    cdef Py_ssize_t out_h = (h - 1) * stride + m
    cdef Py_ssize_t out_w = (w - 1) * stride + m
    y_arr = np.zeros((c_out, out_h, out_w), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef Py_ssize_t c, o, mi, ni, i, j, row
    cdef double kv
    with nogil:
        for c in range(c_in):
            for o in range(c_out):
                for mi in range(m):
                    for ni in range(m):
                        kv = weight[c, o, mi, ni]
                        for i in range(h):
                            row = i * stride + mi
                            for j in range(w):
                                y[o, row, j * stride + ni] += x[c, i, j] * kv
    return y_arr


def tconv2d_grad_input(double[:, :, ::1] grad_out, double[:, :, :, ::1] weight,
                       Py_ssize_t stride, Py_ssize_t h, Py_ssize_t w):
    """gx[c,i,j] = sum_{o,mi,ni} grad_out[o, i*s+mi, j*s+ni] * w[c,o,mi,ni]."""
    cdef Py_ssize_t c_in = weight.shape[0]
    cdef Py_ssize_t c_out = weight.shape[1]
    cdef Py_ssize_t m = weight.shape[2]
    gx_arr = np.zeros((c_in, h, w), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t c, o, mi, ni, i, j, row
    cdef double kv
    with nogil:
        for c in range(c_in):
            for o in range(c_out):
                for mi in range(m):
                    for ni in range(m):
                        kv = weight[c, o, mi, ni]
                        for i in range(h):
                            row = i * stride + mi
                            for j in range(w):
                                gx[c, i, j] += grad_out[o, row, j * stride + ni] * kv
    return gx_arr


def tconv2d_grad_kernel(double[:, :, ::1] grad_out, double[:, :, ::1] x,
                        Py_ssize_t stride, Py_ssize_t m):
    """gw[c,o,mi,ni] = sum_{i,j} x[c,i,j] * grad_out[o, i*s+mi, j*s+ni]."""
    cdef Py_ssize_t c_in = x.shape[0]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t w = x.shape[2]
    cdef Py_ssize_t c_out = grad_out.shape[0]
    gw_arr = np.zeros((c_in, c_out, m, m), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t c, o, mi, ni, i, j, row
    cdef double acc
    with nogil:
        for c in range(c_in):
            for o in range(c_out):
                for mi in range(m):
                    for ni in range(m):
                        acc = 0.0
                        for i in range(h):
                            row = i * stride + mi
                            for j in range(w):
                                acc += x[c, i, j] * grad_out[o, row, j * stride + ni]
                        gw[c, o, mi, ni] = acc
    return gw_arr


def maxpool2d_forward(double[:, :, ::1] x, Py_ssize_t window, Py_ssize_t stride):
    """Per-window max; winner index is flat row*W+col, first max in scan order."""
    cdef Py_ssize_t c_n = x.shape[0]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t w = x.shape[2]
    cdef Py_ssize_t out_h = (h - window) // stride + 1
    cdef Py_ssize_t out_w = (w - window) // stride + 1
    y_arr = np.empty((c_n, out_h, out_w), dtype=np.float64)
    idx_arr = np.empty((c_n, out_h, out_w), dtype=np.int64)
    cdef double[:, :, ::1] y = y_arr
    cdef int64_t[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t c, i, j, a, b, row, col
    cdef double best, v
    cdef int64_t bi
    with nogil:
        for c in range(c_n):
            for i in range(out_h):
                for j in range(out_w):
                    best = x[c, i * stride, j * stride]
                    bi = (i * stride) * w + j * stride
                    for a in range(window):
                        row = i * stride + a
                        for b in range(window):
                            col = j * stride + b
                            v = x[c, row, col]
                            if v > best:
                                best = v
                                bi = row * w + col
                    y[c, i, j] = best
                    idx[c, i, j] = bi
    return y_arr, idx_arr


def maxpool2d_backward(double[:, :, ::1] grad_out, int64_t[:, :, ::1] idx,
                       Py_ssize_t h, Py_ssize_t w):
    """Route each output gradient to its recorded winner; overlaps accumulate."""
    cdef Py_ssize_t c_n = grad_out.shape[0]
    cdef Py_ssize_t out_h = grad_out.shape[1]
    cdef Py_ssize_t out_w = grad_out.shape[2]
    gx_arr = np.zeros((c_n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t c, i, j
    cdef int64_t f
    with nogil:
        for c in range(c_n):
            for i in range(out_h):
                for j in range(out_w):
                    f = idx[c, i, j]
                    gx[c, f // w, f % w] += grad_out[c, i, j]
    return gx_arr
