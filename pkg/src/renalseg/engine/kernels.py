"""Compiled inner loops for the convolution operations.

Every kernel writes each output element from exactly one thread with a fixed
accumulation order, so results are bit-identical for any thread count. No
fastmath: IEEE-754 evaluation order is part of the reproducibility contract.
"""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def conv3x3_fwd(xp, k, b, out):
    # xp: (C_in, D+2, H+2, W+2) zero-padded input
    # k: (C_out, C_in, 3, 3, 3), b: (C_out,), out: (C_out, D, H, W)
    c_out, c_in = k.shape[0], k.shape[1]
    d, h, w = out.shape[1], out.shape[2], out.shape[3]
    for o in prange(c_out):
        for z in range(d):
            for y in range(h):
                row = out[o, z, y]
                for x in range(w):
                    row[x] = b[o]
                for c in range(c_in):
                    for i in range(3):
                        for j in range(3):
                            w0 = k[o, c, i, j, 0]
                            w1 = k[o, c, i, j, 1]
                            w2 = k[o, c, i, j, 2]
                            src = xp[c, z + i, y + j]
                            for x in range(w):
                                row[x] += w0 * src[x] + w1 * src[x + 1] + w2 * src[x + 2]


@njit(parallel=True, cache=True)
def conv3x3_grad_kernel(xp, gout, gk):
    # gk[o, c, i, j, l] = sum_{z,y,x} gout[o, z, y, x] * xp[c, z+i, y+j, x+l]
    c_out, c_in = gk.shape[0], gk.shape[1]
    d, h, w = gout.shape[1], gout.shape[2], gout.shape[3]
    for o in prange(c_out):
        acc = np.empty((3, w), dtype=gout.dtype)
        for c in range(c_in):
            for i in range(3):
                for j in range(3):
                    for x in range(w):
                        acc[0, x] = 0.0
                        acc[1, x] = 0.0
                        acc[2, x] = 0.0
                    for z in range(d):
                        for y in range(h):
                            g = gout[o, z, y]
                            src = xp[c, z + i, y + j]
                            for x in range(w):
                                acc[0, x] += g[x] * src[x]
                                acc[1, x] += g[x] * src[x + 1]
                                acc[2, x] += g[x] * src[x + 2]
                    for l in range(3):
                        total = 0.0
                        for x in range(w):
                            total += acc[l, x]
                        gk[o, c, i, j, l] = total


@njit(parallel=True, cache=True)
def tconv2x2_fwd(x, k, b, out):
    # x: (C_in, D, H, W), k: (C_in, C_out, 2, 2, 2), out: (C_out, 2D, 2H, 2W)
    # out[o, 2z+i, 2y+j, 2x+l] = b[o] + sum_c x[c, z, y, x] * k[c, o, i, j, l]
    c_in, c_out = k.shape[0], k.shape[1]
    d, h, w = x.shape[1], x.shape[2], x.shape[3]
    for o in prange(c_out):
        for zz in range(2 * d):
            z, i = zz >> 1, zz & 1
            for yy in range(2 * h):
                y, j = yy >> 1, yy & 1
                row = out[o, zz, yy]
                for xx in range(2 * w):
                    row[xx] = b[o]
                for c in range(c_in):
                    k0 = k[c, o, i, j, 0]
                    k1 = k[c, o, i, j, 1]
                    src = x[c, z, y]
                    for xi in range(w):
                        v = src[xi]
                        row[2 * xi] += v * k0
                        row[2 * xi + 1] += v * k1


@njit(parallel=True, cache=True)
def conv2x2s2_fwd(y, k, b, out):
    # Stride-2 valid convolution, the adjoint of tconv2x2_fwd.
    # y: (C_out, 2D, 2H, 2W), k: (C_in, C_out, 2, 2, 2), out: (C_in, D, H, W)
    # out[c, z, yy, x] = b[c] + sum_{o,i,j,l} y[o, 2z+i, 2yy+j, 2x+l] * k[c, o, i, j, l]
    c_in, c_out = k.shape[0], k.shape[1]
    d, h, w = out.shape[1], out.shape[2], out.shape[3]
    for c in prange(c_in):
        for z in range(d):
            for yy in range(h):
                row = out[c, z, yy]
                for x in range(w):
                    row[x] = b[c]
                for o in range(c_out):
                    for i in range(2):
                        for j in range(2):
                            k0 = k[c, o, i, j, 0]
                            k1 = k[c, o, i, j, 1]
                            src = y[o, 2 * z + i, 2 * yy + j]
                            for x in range(w):
                                row[x] += src[2 * x] * k0 + src[2 * x + 1] * k1


@njit(parallel=True, cache=True)
def tconv2x2_grad_kernel(x, gout, gk):
    # gk[c, o, i, j, l] = sum_{z,y,xx} x[c, z, y, xx] * gout[o, 2z+i, 2y+j, 2xx+l]
    c_in, c_out = gk.shape[0], gk.shape[1]
    d, h, w = x.shape[1], x.shape[2], x.shape[3]
    for c in prange(c_in):
        acc = np.empty((2, w), dtype=x.dtype)
        for o in range(c_out):
            for i in range(2):
                for j in range(2):
                    for xx in range(w):
                        acc[0, xx] = 0.0
                        acc[1, xx] = 0.0
                    for z in range(d):
                        for y in range(h):
                            src = x[c, z, y]
                            g = gout[o, 2 * z + i, 2 * y + j]
                            for xx in range(w):
                                acc[0, xx] += src[xx] * g[2 * xx]
                                acc[1, xx] += src[xx] * g[2 * xx + 1]
                    for l in range(2):
                        total = 0.0
                        for xx in range(w):
                            total += acc[l, xx]
                        gk[c, o, i, j, l] = total


def warmup(dtype=np.float32):
    """Force compilation of all kernels for ``dtype`` (cached on disk)."""
    x = np.zeros((1, 2, 2, 2), dtype=dtype)
    xp = np.zeros((1, 4, 4, 4), dtype=dtype)
    k3 = np.zeros((1, 1, 3, 3, 3), dtype=dtype)
    k2 = np.zeros((1, 1, 2, 2, 2), dtype=dtype)
    b = np.zeros(1, dtype=dtype)
    out = np.empty((1, 2, 2, 2), dtype=dtype)
    big = np.zeros((1, 4, 4, 4), dtype=dtype)
    conv3x3_fwd(xp, k3, b, out)
    conv3x3_grad_kernel(xp, out, k3.copy())
    tconv2x2_fwd(x, k2, b, big.copy())
    conv2x2s2_fwd(big, k2, b, out)
    tconv2x2_grad_kernel(x, big, k2.copy())
