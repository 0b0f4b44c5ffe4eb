# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels: 3x3 convolution and the DTW table.

The convolution inner loops fuse the three horizontal taps per padded input
row, which keeps them a stream of contiguous fused multiply-adds the C
compiler can vectorize. The input-gradient pass reuses the forward kernel on
the upstream gradient with flipped, transposed weights (conv backprop is
itself a convolution).
"""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


cdef void _conv_accumulate(real[:, :, :, ::1] xp, real[:, :, :, ::1] w,
                           real[:, :, :, ::1] y) noexcept nogil:
    """y[b, co, i, j] += sum_{ci,u,v} xp[b, ci, i+u, j+v] * w[co, ci, u, v]."""
    cdef Py_ssize_t B = y.shape[0], Cout = y.shape[1], H = y.shape[2], W = y.shape[3]
    cdef Py_ssize_t Cin = xp.shape[1]
    cdef Py_ssize_t bt, co, ci, i, j, u
    cdef real w0, w1, w2
    for bt in range(B):
        for co in range(Cout):
            for ci in range(Cin):
                for i in range(H):
                    for u in range(3):
                        w0 = w[co, ci, u, 0]
                        w1 = w[co, ci, u, 1]
                        w2 = w[co, ci, u, 2]
                        for j in range(W):
                            y[bt, co, i, j] = y[bt, co, i, j] + (
                                w0 * xp[bt, ci, i + u, j]
                                + w1 * xp[bt, ci, i + u, j + 1]
                                + w2 * xp[bt, ci, i + u, j + 2]
                            )


def _pad(x):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    xp_arr = _pad(np.asarray(x))
    y_arr = np.empty((B, Cout, H, W), dtype=dtype)
    y_arr[:] = np.asarray(b)[None, :, None, None]
    cdef real[:, :, :, ::1] xp = xp_arr
    cdef real[:, :, :, ::1] y = y_arr
    _conv_accumulate(xp, w, y)
    return y_arr


def conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                    real[:, :, :, ::1] dy, bint need_dx=True):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0]
    cdef Py_ssize_t bt, co, ci, i, j, u
    cdef real a0, a1, a2, g
    cdef real[:, :, :, ::1] dyp
    cdef real[:, :, :, ::1] wf
    cdef real[:, :, :, ::1] dxv

    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    xp_arr = _pad(np.asarray(x))
    dw_arr = np.zeros((Cout, Cin, 3, 3), dtype=dtype)
    cdef real[:, :, :, ::1] xp = xp_arr
    cdef real[:, :, :, ::1] dw = dw_arr
    cdef real[:, :, :, ::1] dyv = dy

    # weight gradient: three fused per-tap dot products per padded row
    with nogil:
        for bt in range(B):
            for co in range(Cout):
                for ci in range(Cin):
                    for u in range(3):
                        for i in range(H):
                            a0 = 0
                            a1 = 0
                            a2 = 0
                            for j in range(W):
                                g = dyv[bt, co, i, j]
                                a0 = a0 + g * xp[bt, ci, i + u, j]
                                a1 = a1 + g * xp[bt, ci, i + u, j + 1]
                                a2 = a2 + g * xp[bt, ci, i + u, j + 2]
                            dw[co, ci, u, 0] += a0
                            dw[co, ci, u, 1] += a1
                            dw[co, ci, u, 2] += a2

    db = np.asarray(dy).sum(axis=(0, 2, 3))

    dx_arr = None
    if need_dx:
        # dx is a convolution of dy with channel-transposed, spatially
        # flipped weights
        w_flip = np.ascontiguousarray(
            np.asarray(w).transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        )
        dyp_arr = _pad(np.asarray(dy))
        dx_arr = np.zeros((B, Cin, H, W), dtype=dtype)
        dyp = dyp_arr
        wf = w_flip
        dxv = dx_arr
        _conv_accumulate(dyp, wf, dxv)
    return dx_arr, dw_arr, db


def dtw_table(real[:, ::1] dist):
    cdef Py_ssize_t la = dist.shape[0], lb = dist.shape[1]
    cdef Py_ssize_t i, j
    cdef double best
    cdef signed char move

    cost_arr = np.empty((la, lb), dtype=np.float64)
    back_arr = np.full((la, lb), -1, dtype=np.int8)
    cdef double[:, ::1] cost = cost_arr
    cdef signed char[:, ::1] back = back_arr

    cost[0, 0] = dist[0, 0]
    for j in range(1, lb):
        cost[0, j] = cost[0, j - 1] + dist[0, j]
        back[0, j] = 2
    for i in range(1, la):
        cost[i, 0] = cost[i - 1, 0] + dist[i, 0]
        back[i, 0] = 1
        for j in range(1, lb):
            best = cost[i - 1, j - 1]
            move = 0
            if cost[i - 1, j] < best:
                best = cost[i - 1, j]
                move = 1
            if cost[i, j - 1] < best:
                best = cost[i, j - 1]
                move = 2
            cost[i, j] = best + dist[i, j]
            back[i, j] = move
    return cost_arr, back_arr
