"""Pure-numpy convolution kernels (fallback for the compiled module).

Same signatures and layout as ``_ckernels``: batched ``B x C x H x W``
inputs, ``O x C x k x k`` kernels, no padding. Reductions run in float64.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride):
    k = w.shape[2]
    win = _windows(x, k, stride).astype(np.float64)
    out = np.tensordot(win, w.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(x.dtype)


def conv2d_backward_input(gy, w, stride, H, W):
    B, O, Ho, Wo = gy.shape
    C, k = w.shape[1], w.shape[2]
    gx = np.zeros((B, C, H, W), dtype=np.float64)
    g64 = gy.astype(np.float64)
    w64 = w.astype(np.float64)
    for p in range(k):
        for q in range(k):
            contrib = np.tensordot(g64, w64[:, :, p, q], axes=([1], [0]))
            gx[:, :, p:p + stride * (Ho - 1) + 1:stride, q:q + stride * (Wo - 1) + 1:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return gx.astype(gy.dtype)


def conv2d_backward_weight(gy, x, k, stride):
    win = _windows(x, k, stride).astype(np.float64)
    out = np.tensordot(gy.astype(np.float64), win, axes=([0, 2, 3], [0, 2, 3]))
    return out.astype(x.dtype)
