"""Numba-jitted convolution kernels.

float32 (training) runs a jitted im2col gather feeding one BLAS matmul;
the patch matrix is kept as the forward context so both backward passes
reuse it, and the input gradient scatters back through a jitted col2im.

float64 (verification) runs direct loops instead, accumulating every
output element in (in-channel, kernel-row, kernel-col) order, so 64-bit
results match a naive loop oracle bitwise.  fastmath stays off everywhere.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _fwd_direct(x, kernel, bias, stride, out):
    b, cin, h, w = x.shape
    cout = kernel.shape[0]
    k = kernel.shape[2]
    ho = out.shape[2]
    wo = out.shape[3]
    for n in range(b):
        for co in range(cout):
            for i in range(ho):
                row = out[n, co, i]
                for j in range(wo):
                    row[j] = bias[co]
                for ci in range(cin):
                    for p in range(k):
                        xrow = x[n, ci, i * stride + p]
                        for q in range(k):
                            wv = kernel[co, ci, p, q]
                            for j in range(wo):
                                row[j] += xrow[j * stride + q] * wv
    return out


@njit(cache=True)
def _im2col(x, k, stride, ho, wo, out):
    b, c, _, _ = x.shape
    row = 0
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                js = j * stride
                orow = out[row]
                col = 0
                for ci in range(c):
                    for p in range(k):
                        xrow = x[n, ci, i * stride + p]
                        for q in range(k):
                            orow[col + q] = xrow[js + q]
                        col += k
                row += 1
    return out


@njit(cache=True)
def _col2im(gcols, k, stride, ho, wo, gx):
    b, c, _, _ = gx.shape
    row = 0
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                js = j * stride
                grow = gcols[row]
                col = 0
                for ci in range(c):
                    for p in range(k):
                        xrow = gx[n, ci, i * stride + p]
                        for q in range(k):
                            xrow[js + q] += grow[col + q]
                        col += k
                row += 1
    return gx


def _geometry(x_shape, k, stride):
    b, c, h, w = x_shape
    return (h - k) // stride + 1, (w - k) // stride + 1


def conv2d_forward(x, kernel, bias, stride):
    from . import take_buffer

    b, cin, h, w = x.shape
    cout, _, k, _ = kernel.shape
    ho, wo = _geometry(x.shape, k, stride)
    if x.dtype == np.float64:
        out = np.empty((b, cout, ho, wo), dtype=x.dtype)
        return _fwd_direct(x, kernel, bias, stride, out), None
    cols = take_buffer((b * ho * wo, cin * k * k), x.dtype)
    _im2col(np.ascontiguousarray(x), k, stride, ho, wo, cols)
    out = cols @ kernel.reshape(cout, -1).T
    out += bias[None, :]
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, cols


def conv2d_backward_input(gout, kernel, x_shape, stride, ctx=None):
    from . import release_buffer, take_buffer

    b, cout, ho, wo = gout.shape
    cin = kernel.shape[1]
    k = kernel.shape[2]
    gx = np.zeros(x_shape, dtype=gout.dtype)
    g2 = gout.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
    gcols = take_buffer((b * ho * wo, cin * k * k), gout.dtype)
    np.matmul(g2, kernel.reshape(cout, -1), out=gcols)
    _col2im(gcols, k, stride, ho, wo, gx)
    release_buffer(gcols)
    return gx


def conv2d_backward_kernel(gout, x, kernel_shape, stride, ctx=None):
    from . import release_buffer, take_buffer

    cout, cin, k, _ = kernel_shape
    b, _, ho, wo = gout.shape
    cols = ctx
    borrowed = cols is None
    if borrowed:
        cols = take_buffer((b * ho * wo, cin * k * k), gout.dtype)
        _im2col(np.ascontiguousarray(x), k, stride, ho, wo, cols)
    g2 = gout.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
    gk = np.ascontiguousarray((g2.T @ cols).reshape(kernel_shape))
    if borrowed:
        release_buffer(cols)
    return gk
