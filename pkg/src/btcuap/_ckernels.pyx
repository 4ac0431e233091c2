# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels. Layout is B x C x H x W, no padding.

Every reduction accumulates in double. For stride 1 the output is computed
as "wide rows": output pixel (i, j) sits at flat offset ``i * W + j`` of an
``Ho x W`` buffer, so each (channel, tap) pair is one contiguous
multiply-add over ``(Ho - 1) * W + Wo`` elements. The columns ``j >= Wo`` are
scratch and dropped. Strided convolutions use short row loops instead.
"""
import numpy as np

from cython cimport floating


cdef inline void _axpy(double *dst, const floating *src, double a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t t
    for t in range(n):
        dst[t] += <double>src[t] * a


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = (H - k) // stride + 1, Wo = (W - k) // stride + 1
    cdef Py_ssize_t span = (Ho - 1) * W + Wo
    cdef Py_ssize_t b, o, c, i, j, p, q
    cdef double wv
    cdef double *arow
    cdef const floating *xrow
    out = np.empty((B, O, Ho, Wo), dtype=np.asarray(x).dtype)
    cdef floating[:, :, :, ::1] y = out
    buf = np.empty(Ho * W, dtype=np.float64)
    cdef double[::1] acc = buf
    with nogil:
        for b in range(B):
            for o in range(O):
                acc[:] = 0.0
                for c in range(C):
                    for p in range(k):
                        for q in range(k):
                            wv = w[o, c, p, q]
                            if stride == 1:
                                _axpy(&acc[0], &x[b, c, p, q], wv, span)
                            else:
                                for i in range(Ho):
                                    arow = &acc[i * W]
                                    xrow = &x[b, c, i * stride + p, q]
                                    for j in range(Wo):
                                        arow[j] += <double>xrow[j * stride] * wv
                for i in range(Ho):
                    for j in range(Wo):
                        y[b, o, i, j] = <floating>acc[i * W + j]
    return out


def conv2d_backward_input(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] w,
                          int stride, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = gy.shape[0], O = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t C = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t span = (Ho - 1) * W + Wo
    cdef Py_ssize_t b, o, c, i, j, p, q
    cdef double wv
    cdef double *grow
    cdef const floating *yrow
    acc = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = acc
    # output gradient laid out as wide rows, zeros in the scratch columns
    wide_buf = np.zeros((O, Ho * W), dtype=np.float64)
    cdef double[:, ::1] wide = wide_buf
    with nogil:
        for b in range(B):
            if stride == 1:
                for o in range(O):
                    for i in range(Ho):
                        for j in range(Wo):
                            wide[o, i * W + j] = gy[b, o, i, j]
            for c in range(C):
                for o in range(O):
                    for p in range(k):
                        for q in range(k):
                            wv = w[o, c, p, q]
                            if stride == 1:
                                _axpy(&gx[b, c, p, q], &wide[o, 0], wv, span)
                            else:
                                for i in range(Ho):
                                    grow = &gx[b, c, i * stride + p, q]
                                    yrow = &gy[b, o, i, 0]
                                    for j in range(Wo):
                                        grow[j * stride] += <double>yrow[j] * wv
    return acc.astype(np.asarray(gy).dtype)


def conv2d_backward_weight(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] x,
                           Py_ssize_t k, int stride):
    cdef Py_ssize_t B = gy.shape[0], O = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t C = x.shape[1], W = x.shape[3]
    cdef Py_ssize_t span = (Ho - 1) * W + Wo
    cdef Py_ssize_t b, o, c, i, j, p, q, t
    cdef double a0, a1, a2, a3
    cdef const double *g
    cdef const floating *xs
    out = np.empty((O, C, k, k), dtype=np.asarray(x).dtype)
    cdef floating[:, :, :, ::1] gw = out
    wide_buf = np.zeros((B, O, Ho * W), dtype=np.float64)
    cdef double[:, :, ::1] wide = wide_buf
    with nogil:
        if stride == 1:
            for b in range(B):
                for o in range(O):
                    for i in range(Ho):
                        for j in range(Wo):
                            wide[b, o, i * W + j] = gy[b, o, i, j]
        for o in range(O):
            for c in range(C):
                for p in range(k):
                    for q in range(k):
                        # four fixed lanes keep the sum order deterministic
                        a0 = 0.0
                        a1 = 0.0
                        a2 = 0.0
                        a3 = 0.0
                        for b in range(B):
                            if stride == 1:
                                g = &wide[b, o, 0]
                                xs = &x[b, c, p, q]
                                t = 0
                                while t + 3 < span:
                                    a0 += g[t] * <double>xs[t]
                                    a1 += g[t + 1] * <double>xs[t + 1]
                                    a2 += g[t + 2] * <double>xs[t + 2]
                                    a3 += g[t + 3] * <double>xs[t + 3]
                                    t += 4
                                while t < span:
                                    a0 += g[t] * <double>xs[t]
                                    t += 1
                            else:
                                for i in range(Ho):
                                    for j in range(Wo):
                                        a0 += <double>gy[b, o, i, j] * <double>x[b, c, i * stride + p, j * stride + q]
                        gw[o, c, p, q] = <floating>((a0 + a1) + (a2 + a3))
    return out
