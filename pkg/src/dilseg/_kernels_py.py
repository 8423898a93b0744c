"""Pure-numpy kernel fallback.

Same signatures as the compiled ``dilseg._kernels`` extension. Forward
passes accumulate kernel taps in the same (input channel, kernel row,
kernel column) order with bias added last, one rounded multiply and one
rounded add per tap, so forward outputs match the compiled backend
bitwise. Backward passes reduce with BLAS and agree to rounding noise.
"""

import numpy as np


def _window(arr2d, start_r, start_c, stride, out_h, out_w):
    return arr2d[start_r : start_r + stride * (out_h - 1) + 1 : stride,
                 start_c : start_c + stride * (out_w - 1) + 1 : stride]


def conv2d_forward(xpad, weight, bias, dilation, stride, out_h, out_w):
    c_out, c_in, m, _ = weight.shape
    out = np.zeros((c_out, out_h, out_w))
    for c in range(c_in):
        for mi in range(m):
            for ni in range(m):
                win = _window(xpad[c], dilation * mi, dilation * ni, stride, out_h, out_w)
                out += win[None, :, :] * weight[:, c, mi, ni][:, None, None]
    out += bias[:, None, None]
    return out


def conv2d_grad_input(grad_out, weight, dilation, stride, pad_h, pad_w):
    c_out, c_in, m, _ = weight.shape
    out_h, out_w = grad_out.shape[1], grad_out.shape[2]
    gx = np.zeros((c_in, pad_h, pad_w))
    for c in range(c_in):
        for mi in range(m):
            for ni in range(m):
                contrib = np.tensordot(weight[:, c, mi, ni], grad_out, axes=(0, 0))
                _window(gx[c], dilation * mi, dilation * ni, stride, out_h, out_w)[...] += contrib
    return gx


def conv2d_grad_kernel(grad_out, xpad, dilation, stride, m):
    c_out = grad_out.shape[0]
    out_h, out_w = grad_out.shape[1], grad_out.shape[2]
    c_in = xpad.shape[0]
    gw = np.empty((c_out, c_in, m, m))
    for mi in range(m):
        for ni in range(m):
            win = xpad[:, dilation * mi : dilation * mi + stride * (out_h - 1) + 1 : stride,
                       dilation * ni : dilation * ni + stride * (out_w - 1) + 1 : stride]
            gw[:, :, mi, ni] = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))
    return gw


def tconv2d_forward(x, weight, stride):
    c_in, c_out, m, _ = weight.shape
    h, w = x.shape[1], x.shape[2]
    out_h = (h - 1) * stride + m
    out_w = (w - 1) * stride + m
    y = np.zeros((c_out, out_h, out_w))
    # pre[o, mi, ni, i, j]: contributions summed over input channels
    pre = np.tensordot(weight, x, axes=(0, 0))
    for mi in range(m):
        for ni in range(m):
            y[:, mi : mi + stride * (h - 1) + 1 : stride,
              ni : ni + stride * (w - 1) + 1 : stride] += pre[:, mi, ni]
    return y


def tconv2d_grad_input(grad_out, weight, stride, h, w):
    c_in, c_out, m, _ = weight.shape
    gx = np.zeros((c_in, h, w))
    for mi in range(m):
        for ni in range(m):
            win = grad_out[:, mi : mi + stride * (h - 1) + 1 : stride,
                           ni : ni + stride * (w - 1) + 1 : stride]
            gx += np.tensordot(weight[:, :, mi, ni], win, axes=(1, 0))
    return gx


def tconv2d_grad_kernel(grad_out, x, stride, m):
    c_in, h, w = x.shape
    c_out = grad_out.shape[0]
    gw = np.empty((c_in, c_out, m, m))
    for mi in range(m):
        for ni in range(m):
            win = grad_out[:, mi : mi + stride * (h - 1) + 1 : stride,
                           ni : ni + stride * (w - 1) + 1 : stride]
            gw[:, :, mi, ni] = np.tensordot(x, win, axes=([1, 2], [1, 2]))
    return gw


def maxpool2d_forward(x, window, stride):
    c_n, h, w = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(c_n, out_h, out_w, window, window),
        strides=(sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    ).reshape(c_n, out_h, out_w, window * window)
    local = patches.argmax(axis=3)  # first max in window scan order
    y = np.take_along_axis(patches, local[..., None], axis=3)[..., 0]
    rows = (np.arange(out_h) * stride)[None, :, None] + local // window
    cols = (np.arange(out_w) * stride)[None, None, :] + local % window
    idx = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(y), np.ascontiguousarray(idx)


def maxpool2d_backward(grad_out, idx, h, w):
    c_n = grad_out.shape[0]
    gx = np.zeros((c_n, h * w))
    ch = np.broadcast_to(np.arange(c_n)[:, None, None], idx.shape)
    np.add.at(gx, (ch.ravel(), idx.ravel()), grad_out.ravel())
    return gx.reshape(c_n, h, w)
