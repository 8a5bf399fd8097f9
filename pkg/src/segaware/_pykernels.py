"""numpy implementations of the patch kernels.

Same signatures and accumulation order as the compiled ``_ckernels`` module;
used when the extension is not built or ``SEGAWARE_BACKEND=python``.
"""

import numpy as np


def _offsets(kh, kw, atrous):
    ry, rx = kh // 2, kw // 2
    for ky in range(kh):
        for kx in range(kw):
            yield ky * kw + kx, (ky - ry) * atrous, (kx - rx) * atrous


def _windows(H, W, dy, dx):
    """Destination and source slices for a shift by (dy, dx), or None if empty."""
    y0, y1 = max(0, -dy), min(H, H - dy)
    x0, x1 = max(0, -dx), min(W, W - dx)
    if y0 >= y1 or x0 >= x1:
        return None
    return (slice(y0, y1), slice(x0, x1)), (slice(y0 + dy, y1 + dy), slice(x0 + dx, x1 + dx))


def im2col(x, kh, kw, atrous):
    H, W, E = x.shape
    K = kh * kw
    out = np.zeros((H, W, K, E))
    for k, dy, dx in _offsets(kh, kw, atrous):
        win = _windows(H, W, dy, dx)
        if win is None:
            continue
        dst, src = win
        out[dst[0], dst[1], k, :] = x[src[0], src[1], :]
    return out.reshape(H * W, K * E)


def masked_im2col(x, m, kh, kw, atrous):
    H, W, E = x.shape
    K = kh * kw
    out = im2col(x, kh, kw, atrous).reshape(H * W, K, E)
    out *= m[:, :, None]
    return out.reshape(H * W, K * E)


def col2im(cols, H, W, E, kh, kw, atrous):
    K = kh * kw
    cols = cols.reshape(H, W, K, E)
    out = np.zeros((H, W, E))
    for k, dy, dx in _offsets(kh, kw, atrous):
        win = _windows(H, W, dy, dx)
        if win is None:
            continue
        dst, src = win
        out[src[0], src[1], :] += cols[dst[0], dst[1], k, :]
    return out


def im2dist(emb, kh, kw, atrous, norm):
    H, W, D = emb.shape
    K = kh * kw
    out = np.full((H, W, K), np.inf)
    for k, dy, dx in _offsets(kh, kw, atrous):
        win = _windows(H, W, dy, dx)
        if win is None:
            continue
        dst, src = win
        diff = emb[dst[0], dst[1], :] - emb[src[0], src[1], :]
        d = np.zeros(diff.shape[:2])
        # sequential over channels, like the compiled kernel
        for c in range(D):
            d += np.abs(diff[:, :, c]) if norm == 0 else diff[:, :, c] * diff[:, :, c]
        if norm == 1:
            d = np.sqrt(d)
        out[dst[0], dst[1], k] = d
    return out.reshape(H * W, K)


def dist2im(grad, dist, emb, kh, kw, atrous, norm):
    H, W, D = emb.shape
    K = kh * kw
    grad = grad.reshape(H, W, K)
    dist = dist.reshape(H, W, K)
    out = np.zeros((H, W, D))
    for k, dy, dx in _offsets(kh, kw, atrous):
        win = _windows(H, W, dy, dx)
        if win is None:
            continue
        dst, src = win
        g = grad[dst[0], dst[1], k]
        diff = emb[dst[0], dst[1], :] - emb[src[0], src[1], :]
        if norm == 0:
            s = g[:, :, None] * np.sign(diff)
        elif norm == 1:
            d = dist[dst[0], dst[1], k]
            safe = np.where(d > 0, d, 1.0)
            s = np.where(d > 0, g / safe, 0.0)[:, :, None] * diff
        else:
            s = 2.0 * g[:, :, None] * diff
        out[dst[0], dst[1], :] += s
        out[src[0], src[1], :] -= s
    return out


def patch_reduce(x, m, kh, kw, atrous):
    H, W, E = x.shape
    m = m.reshape(H, W, -1)
    out = np.zeros((H, W, E))
    for k, dy, dx in _offsets(kh, kw, atrous):
        win = _windows(H, W, dy, dx)
        if win is None:
            continue
        dst, src = win
        out[dst[0], dst[1], :] += x[src[0], src[1], :] * m[dst[0], dst[1], k, None]
    return out.reshape(H * W, E)


def patch_reduce_backward(g, x, m, kh, kw, atrous):
    H, W, E = x.shape
    K = kh * kw
    g = g.reshape(H, W, E)
    m = m.reshape(H, W, K)
    gx = np.zeros((H, W, E))
    gm = np.zeros((H, W, K))
    for k, dy, dx in _offsets(kh, kw, atrous):
        win = _windows(H, W, dy, dx)
        if win is None:
            continue
        dst, src = win
        gd = g[dst[0], dst[1], :]
        gm[dst[0], dst[1], k] = (gd * x[src[0], src[1], :]).sum(axis=2)
        gx[src[0], src[1], :] += gd * m[dst[0], dst[1], k, None]
    return gx, gm.reshape(H * W, K)


def masked_col2im(gcols, x, m, kh, kw, atrous):
    H, W, E = x.shape
    K = kh * kw
    g = gcols.reshape(H, W, K, E)
    m = m.reshape(H, W, K)
    gx = np.zeros((H, W, E))
    gm = np.zeros((H, W, K))
    for k, dy, dx in _offsets(kh, kw, atrous):
        win = _windows(H, W, dy, dx)
        if win is None:
            continue
        dst, src = win
        gd = g[dst[0], dst[1], k, :]
        gm[dst[0], dst[1], k] = (gd * x[src[0], src[1], :]).sum(axis=2)
        gx[src[0], src[1], :] += gd * m[dst[0], dst[1], k, None]
    return gx, gm.reshape(H * W, K)


def segaware_conv_direct(x, m, weights, kh, kw, atrous):
    H, W, E = x.shape
    cols = masked_im2col(x, m, kh, kw, atrous)
    return (cols @ weights / m.sum(axis=1, keepdims=True)).reshape(H, W, -1)


def matmul(a, b):
    # rank-1 updates keep the inner-index accumulation ascending
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k]
    return out
