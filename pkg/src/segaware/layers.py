"""Differentiable building blocks for the networks.

Each ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the cache. Convolutions here always use BLAS and
keep their column matrices for the backward pass.
"""

import numpy as np

from segaware import masks as mk
from segaware.crf import crf_backward, crf_forward
from segaware.patches import col2im, im2col, masked_col2im, masked_im2col
from segaware.tensor import gemm, upsample_nearest


def conv_forward(x, w, b, spec):
    if w.shape[0] != spec.K * x.shape[2]:
        raise mk.ConfigurationError(f"filter rows {w.shape[0]} != K*E = {spec.K}*{x.shape[2]}")
    cols = x.reshape(-1, x.shape[2]) if spec.K == 1 else im2col(x, spec).values
    y = gemm(cols, w) + b
    return y.reshape(x.shape[0], x.shape[1], -1), (x.shape, cols, w, spec)


def conv_backward(g, cache):
    """Returns (grad_x, grad_w, grad_b); reuses the forward column matrix."""
    shape, cols, w, spec = cache
    g = g.reshape(-1, w.shape[1])
    gcols = g @ w.T
    gx = gcols.reshape(shape) if spec.K == 1 else col2im(gcols, spec, shape)
    return gx, cols.T @ g, g.sum(axis=0)


def segaware_forward(x, emb, w, b, lam, spec, norm="l1"):
    mf = mk.make_masks(emb, spec, float(lam), norm)
    mk.ConvFilter(w, spec, b).check(x.shape[2])
    masked = masked_im2col(x, mf.masks, spec)
    s = mf.sums[:, None]
    z = gemm(masked, w)
    y = z / s + b
    return y.reshape(x.shape[0], x.shape[1], -1), (x, mf, w, masked, z, s)


def segaware_backward(g, cache, need_emb=True):
    """Returns (grad_x, grad_w, grad_b, grad_lambda, grad_emb).

    Same algebra as masks.segaware_conv_backward, with the forward
    intermediates reused instead of recomputed.
    """
    x, mf, w, masked, z, s = cache
    g = g.reshape(-1, w.shape[1])
    gz = g / s
    gx, gm = masked_col2im(gz @ w.T, x, mf.masks, mf.spec)
    gm -= (gz * z / s).sum(axis=1)[:, None]
    gm = np.where(mf.valid, gm, 0.0)
    glam, gemb = mk.mask_backward(gm, mf, need_emb)
    return gx, masked.T @ gz, g.sum(axis=0), glam, gemb


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(g, cache):
    return g * cache


def maxpool2_forward(x):
    H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"2x2 pooling needs even extents, got {x.shape}")
    blocks = x.reshape(H // 2, 2, W // 2, 2, C).transpose(0, 2, 4, 1, 3).reshape(H // 2, W // 2, C, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(g, cache):
    (H, W, C), idx = cache
    blocks = np.zeros((H // 2, W // 2, C, 4))
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    return blocks.reshape(H // 2, W // 2, C, 2, 2).transpose(0, 3, 1, 4, 2).reshape(H, W, C)


def upsample_forward(x, factor):
    return upsample_nearest(x, factor), factor


def upsample_backward(g, factor):
    H, W, C = g.shape
    return g.reshape(H // factor, factor, W // factor, factor, C).sum(axis=(1, 3))


def bilateral_forward(x, emb, lam, spec, repeats, norm="l1"):
    """``repeats`` applications of the mask-normalized filter with shared masks."""
    mf = mk.make_masks(emb, spec, float(lam), norm)
    xs = [x]
    for _ in range(repeats):
        xs.append(mk.bilateral_filter(xs[-1], mf))
    return xs[-1], (xs, mf)


def bilateral_backward(g, cache, need_emb=True):
    """Returns (grad_x, grad_lambda, grad_emb)."""
    xs, mf = cache
    gm_total = np.zeros_like(mf.masks)
    for x in reversed(xs[:-1]):
        g, gm = mk.bilateral_backward(g, x, mf)
        g = g.reshape(x.shape)
        gm_total += gm
    glam, gemb = mk.mask_backward(gm_total, mf, need_emb)
    return g, glam, gemb


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def crf_layer_forward(logits, emb, params):
    """Unary = -log softmax(logits); returns the final marginals."""
    logp = log_softmax(logits)
    Q, saved = crf_forward(-logp, emb, params)
    return Q, (logp, saved)


def crf_layer_backward(gQ, cache):
    """Returns (grad_logits, grad_emb, grad_w1, grad_w2)."""
    logp, saved = cache
    r = crf_backward(gQ, saved)
    gl = -r.grad_unary  # d unary / d logp = -1
    p = np.exp(logp)
    g_logits = gl - p * gl.sum(axis=-1, keepdims=True)
    return g_logits, r.grad_emb, r.grad_w1, r.grad_w2


def _keep(labels, ignore=255):
    return labels != ignore


def softmax_xent(logits, labels):
    """Mean cross-entropy over non-ignored pixels; returns (loss, grad_logits)."""
    keep = _keep(labels)
    n = max(int(keep.sum()), 1)
    logp = log_softmax(logits)
    lab = np.where(keep, labels, 0)
    picked = np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    loss = -float(picked[keep].sum()) / n
    g = np.exp(logp)
    np.put_along_axis(g, lab[..., None], np.take_along_axis(g, lab[..., None], axis=-1) - 1.0, axis=-1)
    g *= keep[..., None] / n
    return loss, g


def marginal_xent(Q, labels, eps=1e-12):
    """Mean -log Q[label] for CRF marginals; returns (loss, grad_Q)."""
    keep = _keep(labels)
    n = max(int(keep.sum()), 1)
    lab = np.where(keep, labels, 0)
    q = np.take_along_axis(Q, lab[..., None], axis=-1)[..., 0]
    loss = -float(np.log(q[keep] + eps).sum()) / n
    g = np.zeros_like(Q)
    np.put_along_axis(g, lab[..., None], (-keep.astype(np.float64) / (q + eps) / n)[..., None], axis=-1)
    return loss, g


def l2_regression(pred, target):
    """0.5 * mean over pixels of the squared end-point difference."""
    n = pred.shape[0] * pred.shape[1]
    diff = pred - target
    return 0.5 * float((diff ** 2).sum()) / n, diff / n
