"""Pure-numpy convolution kernels (the fallback when numba is disabled).

float32 uses im2col plus one BLAS matmul; the patch matrix is returned
as forward context so the kernel-gradient pass can reuse it.  float64
uses an offset-accumulation loop whose per-element summation order is
(in-channel, kernel-row, kernel-col), matching a naive nested-loop
convolution bitwise for verification.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _out_hw(h, w, k, stride):
    return (h - k) // stride + 1, (w - k) // stride + 1


def _im2col(x, k, stride):
    """(B,C,H,W) -> (B*Ho*Wo, C*K*K) patch matrix (copies)."""
    b, c, h, w = x.shape
    ho, wo = _out_hw(h, w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k), (ho, wo)


def conv2d_forward(x, kernel, bias, stride):
    b, c, h, w = x.shape
    cout, cin, k, _ = kernel.shape
    ho, wo = _out_hw(h, w, k, stride)
    if x.dtype == np.float64:
        # offset-by-offset accumulation keeps each output element's
        # summation in (ci, p, q) order; verification sizes only.
        out = np.empty((b, cout, ho, wo), dtype=x.dtype)
        out[:] = bias[None, :, None, None]
        for ci in range(cin):
            for p in range(k):
                for q in range(k):
                    xs = x[:, ci, p : p + stride * ho : stride, q : q + stride * wo : stride]
                    out += xs[:, None, :, :] * kernel[None, :, ci, p, q, None, None]
        return out, None
    cols, _ = _im2col(x, k, stride)
    out = cols @ kernel.reshape(cout, cin * k * k).T
    out += bias[None, :]
    return np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)), cols


def conv2d_backward_input(gout, kernel, x_shape, stride, ctx=None):
    b, c, h, w = x_shape
    cout, cin, k, _ = kernel.shape
    ho, wo = gout.shape[2], gout.shape[3]
    g2 = gout.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
    gcols = g2 @ kernel.reshape(cout, cin * k * k)
    g6 = gcols.reshape(b, ho, wo, cin, k, k)
    gx = np.zeros(x_shape, dtype=gout.dtype)
    for p in range(k):
        for q in range(k):
            gx[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride] += (
                g6[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            )
    return gx


def conv2d_backward_kernel(gout, x, kernel_shape, stride, ctx=None):
    cout, cin, k, _ = kernel_shape
    b, _, ho, wo = gout.shape
    cols = ctx
    if cols is None:
        cols, _ = _im2col(x, k, stride)
    g2 = gout.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
    return (g2.T @ cols).reshape(kernel_shape)
