# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled patch kernels.

Every routine walks neighbors in raster order (k = ky * kw + kx) and
accumulates in ascending k, matching the numpy fallback in ``_pykernels``.
Norm codes: 0 = L1, 1 = L2, 2 = squared L2.
"""

import numpy as np
from libc.math cimport fabs, sqrt, INFINITY


def im2col(const double[:, :, ::1] x, int kh, int kw, int atrous):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], E = x.shape[2]
    cdef Py_ssize_t K = kh * kw
    out = np.zeros((H * W, K * E))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, c, ky, kx, yy, xx, e, k, row
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for ky in range(kh):
                yy = r + (ky - ry) * atrous
                if yy < 0 or yy >= H:
                    continue
                for kx in range(kw):
                    xx = c + (kx - rx) * atrous
                    if xx < 0 or xx >= W:
                        continue
                    k = ky * kw + kx
                    for e in range(E):
                        o[row, k * E + e] = x[yy, xx, e]
    return out


def masked_im2col(const double[:, :, ::1] x, const double[:, ::1] m,
                  int kh, int kw, int atrous):
    """im2col with every neighbor block scaled by its mask value."""
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], E = x.shape[2]
    cdef Py_ssize_t K = kh * kw
    out = np.zeros((H * W, K * E))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, c, ky, kx, yy, xx, e, k, row
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    cdef double w
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for ky in range(kh):
                yy = r + (ky - ry) * atrous
                if yy < 0 or yy >= H:
                    continue
                for kx in range(kw):
                    xx = c + (kx - rx) * atrous
                    if xx < 0 or xx >= W:
                        continue
                    k = ky * kw + kx
                    w = m[row, k]
                    for e in range(E):
                        o[row, k * E + e] = x[yy, xx, e] * w
    return out


def col2im(const double[:, ::1] cols, Py_ssize_t H, Py_ssize_t W, Py_ssize_t E,
           int kh, int kw, int atrous):
    out = np.zeros((H, W, E))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t r, c, ky, kx, yy, xx, e, k, row
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for ky in range(kh):
                yy = r + (ky - ry) * atrous
                if yy < 0 or yy >= H:
                    continue
                for kx in range(kw):
                    xx = c + (kx - rx) * atrous
                    if xx < 0 or xx >= W:
                        continue
                    k = ky * kw + kx
                    for e in range(E):
                        o[yy, xx, e] += cols[row, k * E + e]
    return out


def im2dist(const double[:, :, ::1] emb, int kh, int kw, int atrous, int norm):
    cdef Py_ssize_t H = emb.shape[0], W = emb.shape[1], D = emb.shape[2]
    cdef Py_ssize_t K = kh * kw
    out = np.full((H * W, K), np.inf)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, c, ky, kx, yy, xx, d, k, row
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    cdef double acc, diff
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for ky in range(kh):
                yy = r + (ky - ry) * atrous
                if yy < 0 or yy >= H:
                    continue
                for kx in range(kw):
                    xx = c + (kx - rx) * atrous
                    if xx < 0 or xx >= W:
                        continue
                    k = ky * kw + kx
                    acc = 0.0
                    if norm == 0:
                        for d in range(D):
                            acc += fabs(emb[r, c, d] - emb[yy, xx, d])
                    else:
                        for d in range(D):
                            diff = emb[r, c, d] - emb[yy, xx, d]
                            acc += diff * diff
                        if norm == 1:
                            acc = sqrt(acc)
                    o[row, k] = acc
    return out


def dist2im(const double[:, ::1] grad, const double[:, ::1] dist,
            const double[:, :, ::1] emb, int kh, int kw, int atrous, int norm):
    cdef Py_ssize_t H = emb.shape[0], W = emb.shape[1], D = emb.shape[2]
    out = np.zeros((H, W, D))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t r, c, ky, kx, yy, xx, d, k, row
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    cdef double g, diff, s
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for ky in range(kh):
                yy = r + (ky - ry) * atrous
                if yy < 0 or yy >= H:
                    continue
                for kx in range(kw):
                    xx = c + (kx - rx) * atrous
                    if xx < 0 or xx >= W:
                        continue
                    k = ky * kw + kx
                    g = grad[row, k]
                    if g == 0.0:
                        continue
                    if norm == 1:
                        if dist[row, k] == 0.0:
                            continue
                        g = g / dist[row, k]
                    elif norm == 2:
                        g = 2.0 * g
                    for d in range(D):
                        diff = emb[r, c, d] - emb[yy, xx, d]
                        if norm == 0:
                            if diff > 0.0:
                                s = g
                            elif diff < 0.0:
                                s = -g
                            else:
                                continue
                        else:
                            s = g * diff
                        o[r, c, d] += s
                        o[yy, xx, d] -= s
    return out


def patch_reduce(const double[:, :, ::1] x, const double[:, ::1] m,
                 int kh, int kw, int atrous):
    """y[i, e] = sum_k m[i, k] * x[nbr(i, k), e] over in-bounds neighbors."""
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], E = x.shape[2]
    out = np.zeros((H * W, E))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, c, ky, kx, yy, xx, e, k, row
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    cdef double w
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for ky in range(kh):
                yy = r + (ky - ry) * atrous
                if yy < 0 or yy >= H:
                    continue
                for kx in range(kw):
                    xx = c + (kx - rx) * atrous
                    if xx < 0 or xx >= W:
                        continue
                    k = ky * kw + kx
                    w = m[row, k]
                    for e in range(E):
                        o[row, e] += x[yy, xx, e] * w
    return out


def patch_reduce_backward(const double[:, ::1] g, const double[:, :, ::1] x,
                          const double[:, ::1] m, int kh, int kw, int atrous):
    """Adjoint of patch_reduce: returns (grad_x[H, W, E], grad_m[H*W, K])."""
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], E = x.shape[2]
    cdef Py_ssize_t K = kh * kw
    gx_arr = np.zeros((H, W, E))
    gm_arr = np.zeros((H * W, K))
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, ::1] gm = gm_arr
    cdef Py_ssize_t r, c, ky, kx, yy, xx, e, k, row
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    cdef double w, acc
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for ky in range(kh):
                yy = r + (ky - ry) * atrous
                if yy < 0 or yy >= H:
                    continue
                for kx in range(kw):
                    xx = c + (kx - rx) * atrous
                    if xx < 0 or xx >= W:
                        continue
                    k = ky * kw + kx
                    w = m[row, k]
                    acc = 0.0
                    for e in range(E):
                        acc += g[row, e] * x[yy, xx, e]
                        gx[yy, xx, e] += g[row, e] * w
                    gm[row, k] = acc
    return gx_arr, gm_arr


def masked_col2im(const double[:, ::1] gcols, const double[:, :, ::1] x,
                  const double[:, ::1] m, int kh, int kw, int atrous):
    """Adjoint of masked_im2col: returns (grad_x[H, W, E], grad_m[H*W, K])."""
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], E = x.shape[2]
    cdef Py_ssize_t K = kh * kw
    gx_arr = np.zeros((H, W, E))
    gm_arr = np.zeros((H * W, K))
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, ::1] gm = gm_arr
    cdef Py_ssize_t r, c, ky, kx, yy, xx, e, k, row
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    cdef double w, acc, g
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for ky in range(kh):
                yy = r + (ky - ry) * atrous
                if yy < 0 or yy >= H:
                    continue
                for kx in range(kw):
                    xx = c + (kx - rx) * atrous
                    if xx < 0 or xx >= W:
                        continue
                    k = ky * kw + kx
                    w = m[row, k]
                    acc = 0.0
                    for e in range(E):
                        g = gcols[row, k * E + e]
                        acc += g * x[yy, xx, e]
                        gx[yy, xx, e] += g * w
                    gm[row, k] = acc
    return gx_arr, gm_arr


def segaware_conv_direct(const double[:, :, ::1] x, const double[:, ::1] m,
                         const double[:, ::1] weights, int kh, int kw, int atrous):
    """Direct (non-GEMM) evaluation of the normalized masked convolution."""
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], E = x.shape[2]
    cdef Py_ssize_t F = weights.shape[1]
    out = np.zeros((H, W, F))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t r, c, ky, kx, yy, xx, e, k, row, f
    cdef Py_ssize_t ry = kh // 2, rx = kw // 2
    cdef double num, den, w
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for f in range(F):
                num = 0.0
                den = 0.0
                for ky in range(kh):
                    yy = r + (ky - ry) * atrous
                    if yy < 0 or yy >= H:
                        continue
                    for kx in range(kw):
                        xx = c + (kx - rx) * atrous
                        if xx < 0 or xx >= W:
                            continue
                        k = ky * kw + kx
                        w = m[row, k]
                        den += w
                        for e in range(E):
                            num += x[yy, xx, e] * w * weights[k * E + e, f]
                o[r, c, f] = num / den
    return out


cdef void _gemm_rows(const double* a, const double* b, double* c,
                    Py_ssize_t M, Py_ssize_t K, Py_ssize_t N) noexcept nogil:
    cdef Py_ssize_t i, k, n
    cdef double v
    cdef const double* brow
    cdef double* crow
    for i in range(M):
        crow = c + i * N
        for k in range(K):
            v = a[i * K + k]
            brow = b + k * N
            for n in range(N):
                crow[n] += v * brow[n]


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    """C = A B with every output accumulated over the inner index in ascending order."""
    cdef Py_ssize_t M = a.shape[0], K = a.shape[1], N = b.shape[1]
    out = np.zeros((M, N))
    cdef double[:, ::1] c = out
    if M and K and N:
        with nogil:
            _gemm_rows(&a[0, 0], &b[0, 0], &c[0, 0], M, K, N)
    return out
