"""Numba-compiled inner loops for the convolution and pooling hot paths.

Everything here works on plain float64 ndarrays; the autodiff layer in
``ops`` owns padding, shape checks and tape bookkeeping.  Loops are written
allocation-free with a unit-stride innermost index so LLVM can vectorize
them; on a single AVX-512 core this runs roughly an order of magnitude
faster than im2col round trips through temporary buffers.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(xp, w, b):
    # xp: (N, C, Hp, Wp) pre-padded input; w: (F, C, kh, kw); b: (F,)
    n_smp, n_ch, hp, wp = xp.shape
    n_f, _, kh, kw = w.shape
    h = hp - kh + 1
    wd = wp - kw + 1
    out = np.empty((n_smp, n_f, h, wd))
    for n in range(n_smp):
        for f in range(n_f):
            for i in range(h):
                for j in range(wd):
                    out[n, f, i, j] = b[f]
                for c in range(n_ch):
                    for a in range(kh):
                        for bb in range(kw):
                            wv = w[f, c, a, bb]
                            for j in range(wd):
                                out[n, f, i, j] += wv * xp[n, c, i + a, j + bb]
    return out


@njit(cache=True)
def conv2d_grad_w(xp, g, kh, kw):
    # Correlation of the padded input with the output gradient.
    n_smp, n_ch, hp, wp = xp.shape
    _, n_f, h, wd = g.shape
    dw = np.zeros((n_f, n_ch, kh, kw))
    db = np.zeros(n_f)
    for n in range(n_smp):
        for f in range(n_f):
            for i in range(h):
                s = 0.0
                for j in range(wd):
                    s += g[n, f, i, j]
                db[f] += s
                for c in range(n_ch):
                    for a in range(kh):
                        for bb in range(kw):
                            s = 0.0
                            for j in range(wd):
                                s += g[n, f, i, j] * xp[n, c, i + a, j + bb]
                            dw[f, c, a, bb] += s
    return dw, db


@njit(cache=True)
def conv2d_grad_x(g, w, hp, wp):
    # Scatter the output gradient back onto the padded input extent.
    n_smp, n_f, h, wd = g.shape
    _, n_ch, kh, kw = w.shape
    dxp = np.zeros((n_smp, n_ch, hp, wp))
    for n in range(n_smp):
        for c in range(n_ch):
            for f in range(n_f):
                for i in range(h):
                    for a in range(kh):
                        for bb in range(kw):
                            wv = w[f, c, a, bb]
                            for j in range(wd):
                                dxp[n, c, i + a, j + bb] += wv * g[n, f, i, j]
    return dxp


@njit(cache=True)
def maxpool2_forward(x):
    # 2x2 window, stride 2.  Ties go to the first maximal element in
    # row-major window order, which argmax-style scanning gives for free.
    n_smp, n_ch, h, wd = x.shape
    ho = h // 2
    wo = wd // 2
    out = np.empty((n_smp, n_ch, ho, wo))
    idx = np.empty((n_smp, n_ch, ho, wo), dtype=np.int8)
    for n in range(n_smp):
        for c in range(n_ch):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, c, 2 * i, 2 * j]
                    bi = 0
                    v = x[n, c, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        bi = 1
                    v = x[n, c, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        bi = 2
                    v = x[n, c, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        bi = 3
                    out[n, c, i, j] = best
                    idx[n, c, i, j] = bi
    return out, idx


@njit(cache=True)
def maxpool2_backward(g, idx):
    n_smp, n_ch, ho, wo = g.shape
    dx = np.zeros((n_smp, n_ch, ho * 2, wo * 2))
    for n in range(n_smp):
        for c in range(n_ch):
            for i in range(ho):
                for j in range(wo):
                    b = idx[n, c, i, j]
                    dx[n, c, 2 * i + b // 2, 2 * j + b % 2] = g[n, c, i, j]
    return dx
