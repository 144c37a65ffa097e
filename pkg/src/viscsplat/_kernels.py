"""Compiled blend loops.

Every Gaussian is reduced to a 2D conic in the image plane:
w = amp * exp(-0.5 * q), q = k00 dx^2 + 2 k01 dx dy + k11 dy^2.
Gaussians arrive already sorted front to back.  Loops run in a fixed
order, so results do not depend on thread count.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def forward(cx, cy, k00, k01, k11, amp, op, col, roi, offsets, xs, ys,
            cutoff_q, alpha_max, bg, image, trans, t_store):
    H, W = trans.shape
    for r in range(H):
        for c in range(W):
            trans[r, c] = 1.0
            image[r, c, 0] = 0.0
            image[r, c, 1] = 0.0
            image[r, c, 2] = 0.0
    for i in range(cx.shape[0]):
        k = offsets[i]
        for r in range(roi[i, 0], roi[i, 1]):
            dy = ys[r] - cy[i]
            for c in range(roi[i, 2], roi[i, 3]):
                dx = xs[c] - cx[i]
                q = k00[i] * dx * dx + 2.0 * k01[i] * dx * dy + k11[i] * dy * dy
                if q <= cutoff_q:
                    w = amp[i] * math.exp(-0.5 * q)
                    a = op[i] * w
                    if a > alpha_max:
                        a = alpha_max
                    t = trans[r, c]
                    t_store[k] = t
                    for ch in range(3):
                        image[r, c, ch] += col[i, ch] * a * t
                    trans[r, c] = t * (1.0 - a)
                k += 1
    for r in range(H):
        for c in range(W):
            for ch in range(3):
                image[r, c, ch] += trans[r, c] * bg[ch]


@njit(cache=True)
def backward(cx, cy, k00, k01, k11, amp, op, col, roi, offsets, xs, ys,
             cutoff_q, alpha_max, bg, trans_final, t_store, dl_dc,
             g_cx, g_cy, g_k00, g_k01, g_k11, g_amp, g_op, g_col):
    H, W = trans_final.shape
    accum = np.empty((H, W, 3))
    for r in range(H):
        for c in range(W):
            for ch in range(3):
                accum[r, c, ch] = trans_final[r, c] * bg[ch]
    for i in range(cx.shape[0] - 1, -1, -1):
        k = offsets[i]
        for r in range(roi[i, 0], roi[i, 1]):
            dy = ys[r] - cy[i]
            for c in range(roi[i, 2], roi[i, 3]):
                dx = xs[c] - cx[i]
                q = k00[i] * dx * dx + 2.0 * k01[i] * dx * dy + k11[i] * dy * dy
                if q <= cutoff_q:
                    e = math.exp(-0.5 * q)
                    w = amp[i] * e
                    a = op[i] * w
                    clamped = a > alpha_max
                    if clamped:
                        a = alpha_max
                    t = t_store[k]
                    dl_da = 0.0
                    for ch in range(3):
                        g = dl_dc[r, c, ch]
                        dl_da += g * (col[i, ch] * t - accum[r, c, ch] / (1.0 - a))
                        g_col[i, ch] += g * a * t
                        accum[r, c, ch] += col[i, ch] * a * t
                    if not clamped:
                        g_op[i] += dl_da * w
                        dl_dw = dl_da * op[i]
                        g_amp[i] += dl_dw * e
                        dl_dq = -0.5 * dl_dw * w
                        g_cx[i] += -2.0 * dl_dq * (k00[i] * dx + k01[i] * dy)
                        g_cy[i] += -2.0 * dl_dq * (k01[i] * dx + k11[i] * dy)
                        g_k00[i] += dl_dq * dx * dx
                        g_k01[i] += 2.0 * dl_dq * dx * dy
                        g_k11[i] += dl_dq * dy * dy
                k += 1
