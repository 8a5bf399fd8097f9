"""Naive nested-loop evaluations used as oracles by the tests and the benchmark.

Deliberately written as plain Python loops over lists so they share no code
path with the gather/GEMM implementations.
"""

import math

import numpy as np


def _neighbors(r, c, H, W, kh, kw, atrous):
    for ky in range(kh):
        for kx in range(kw):
            yy = r + (ky - kh // 2) * atrous
            xx = c + (kx - kw // 2) * atrous
            yield ky * kw + kx, yy, xx, (0 <= yy < H and 0 <= xx < W)


def matmul(a, b):
    a, b = np.asarray(a).tolist(), np.asarray(b).tolist()
    out = []
    for row in a:
        out_row = []
        for n in range(len(b[0])):
            acc = 0.0
            for k in range(len(b)):
                acc += row[k] * b[k][n]
            out_row.append(acc)
        out.append(out_row)
    return np.array(out)


def im2col(x, kh, kw, atrous):
    H, W, E = x.shape
    xl = x.tolist()
    out = []
    for r in range(H):
        for c in range(W):
            row = []
            for _, yy, xx, ok in _neighbors(r, c, H, W, kh, kw, atrous):
                row.extend(xl[yy][xx] if ok else [0.0] * E)
            out.append(row)
    return np.array(out)


def distance(a, b, norm):
    if norm == "l1":
        return sum(abs(p - q) for p, q in zip(a, b))
    sq = sum((p - q) ** 2 for p, q in zip(a, b))
    return math.sqrt(sq) if norm == "l2" else sq


def im2dist(emb, kh, kw, atrous, norm="l1"):
    H, W, _ = emb.shape
    el = emb.tolist()
    out = []
    for r in range(H):
        for c in range(W):
            out.append([distance(el[r][c], el[yy][xx], norm) if ok else math.inf
                        for _, yy, xx, ok in _neighbors(r, c, H, W, kh, kw, atrous)])
    return np.array(out)


def bilateral_filter(x, masks, kh, kw, atrous):
    """Normalized masked average; ``masks`` is (H*W, K)."""
    H, W, C = x.shape
    xl, ml = x.tolist(), np.asarray(masks).tolist()
    out = np.zeros((H, W, C))
    for r in range(H):
        for c in range(W):
            i = r * W + c
            for ch in range(C):
                num = den = 0.0
                for k, yy, xx, ok in _neighbors(r, c, H, W, kh, kw, atrous):
                    if ok:
                        num += xl[yy][xx][ch] * ml[i][k]
                        den += ml[i][k]
                out[r, c, ch] = num / den
    return out


def segaware_conv(x, masks, weights, kh, kw, atrous, bias=None):
    """Normalized masked convolution; ``weights`` is (K*E, F)."""
    H, W, E = x.shape
    F = weights.shape[1]
    xl, ml, wl = x.tolist(), np.asarray(masks).tolist(), np.asarray(weights).tolist()
    out = np.zeros((H, W, F))
    for r in range(H):
        for c in range(W):
            i = r * W + c
            for f in range(F):
                num = den = 0.0
                for k, yy, xx, ok in _neighbors(r, c, H, W, kh, kw, atrous):
                    if not ok:
                        continue
                    m = ml[i][k]
                    den += m
                    for e in range(E):
                        num += xl[yy][xx][e] * m * wl[k * E + e][f]
                out[r, c, f] = num / den + (0.0 if bias is None else bias[f])
    return out


def conv(x, weights, kh, kw, atrous, bias=None):
    """Standard zero-padded correlation with (K*E, F) weights."""
    H, W, E = x.shape
    F = weights.shape[1]
    xl, wl = x.tolist(), np.asarray(weights).tolist()
    out = np.zeros((H, W, F))
    for r in range(H):
        for c in range(W):
            for f in range(F):
                acc = 0.0
                for k, yy, xx, ok in _neighbors(r, c, H, W, kh, kw, atrous):
                    if ok:
                        for e in range(E):
                            acc += xl[yy][xx][e] * wl[k * E + e][f]
                out[r, c, f] = acc + (0.0 if bias is None else bias[f])
    return out


def gibbs_energy(labeling, unary, emb, compat, w1, w2, theta_alpha, theta_beta, theta_gamma,
                 bilateral_spec, spatial_spec):
    """Brute-force energy: every unordered pixel pair is visited once and scored
    by each kernel whose window contains it."""
    H, W = labeling.shape
    lab = labeling.tolist()

    def in_support(dy, dx, spec):
        a = spec.atrous
        return (dy % a == 0 and dx % a == 0
                and abs(dy // a) <= spec.kernel_h // 2 and abs(dx // a) <= spec.kernel_w // 2)

    terms = []
    for r in range(H):
        for c in range(W):
            terms.append(unary[r, c, lab[r][c]])
    pixels = [(r, c) for r in range(H) for c in range(W)]
    for a_idx, (r1, c1) in enumerate(pixels):
        for (r2, c2) in pixels[:a_idx]:
            dy, dx = r2 - r1, c2 - c1
            sp2 = dy * dy + dx * dx
            k = 0.0
            if in_support(dy, dx, bilateral_spec):
                e2 = float(np.sum((emb[r1, c1] - emb[r2, c2]) ** 2))
                k += w1 * math.exp(-sp2 / (2 * theta_alpha ** 2) - e2 / (2 * theta_beta ** 2))
            if in_support(dy, dx, spatial_spec):
                k += w2 * math.exp(-sp2 / (2 * theta_gamma ** 2))
            terms.append(compat[lab[r1][c1]][lab[r2][c2]] * k)
    return math.fsum(terms)
