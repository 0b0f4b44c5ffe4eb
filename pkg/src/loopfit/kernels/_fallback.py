"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or disabled via
LOOPFIT_NO_EXT). Convolution goes through an explicit im2col so the matmul
lands in BLAS; the DTW table is a plain double loop and is the slow path
the compiled version exists for.
"""

import numpy as np


def _im2col(x):
    """(B, C, H, W) -> (B*H*W, C*9) patches under 3x3 same padding."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, h, w, c, 3, 3), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            cols[:, :, :, :, u, v] = xp[:, :, u : u + h, v : v + w].transpose(0, 2, 3, 1)
    return cols.reshape(b * h * w, c * 9)


def conv2d_forward(x, w, b):
    """3x3 stride-1 same-padding convolution.

    x: (B, C_in, H, W); w: (C_out, C_in, 3, 3); b: (C_out,).
    Returns (B, C_out, H, W).
    """
    bsz, _, h, wd = x.shape
    c_out = w.shape[0]
    cols = _im2col(x)
    y = cols @ w.reshape(c_out, -1).T
    y += b
    return np.ascontiguousarray(y.reshape(bsz, h, wd, c_out).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, dy, need_dx=True):
    """Gradients of conv2d_forward w.r.t. x, w, b given upstream dy."""
    bsz, c_in, h, wd = x.shape
    c_out = w.shape[0]
    g = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(bsz * h * wd, c_out)
    dw = (g.T @ _im2col(x)).reshape(c_out, c_in, 3, 3)
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dcols = (g @ w.reshape(c_out, -1)).reshape(bsz, h, wd, c_in, 3, 3)
        dxp = np.zeros((bsz, c_in, h + 2, wd + 2), dtype=x.dtype)
        for u in range(3):
            for v in range(3):
                dxp[:, :, u : u + h, v : v + wd] += dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        dx = np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])
    return dx, dw, db


def dtw_table(dist):
    """Cumulative-cost table and backpointers for the {diag, up, left} step set.

    Backpointer codes: 0 diagonal, 1 up (i-1, j), 2 left (i, j-1); ties break
    in that order. Cell (0, 0) has no predecessor (-1).
    """
    la, lb = dist.shape
    cost = np.empty((la, lb), dtype=np.float64)
    back = np.full((la, lb), -1, dtype=np.int8)
    cost[0, 0] = dist[0, 0]
    for j in range(1, lb):
        cost[0, j] = cost[0, j - 1] + dist[0, j]
        back[0, j] = 2
    for i in range(1, la):
        cost[i, 0] = cost[i - 1, 0] + dist[i, 0]
        back[i, 0] = 1
        row = cost[i]
        prev = cost[i - 1]
        for j in range(1, lb):
            best = prev[j - 1]
            move = 0
            if prev[j] < best:
                best = prev[j]
                move = 1
            if row[j - 1] < best:
                best = row[j - 1]
                move = 2
            row[j] = best + dist[i, j]
            back[i, j] = move
    return cost, back
