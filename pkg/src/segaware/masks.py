"""Embedding masks, segmentation-aware bilateral filtering and convolution.

A mask weighs neighbor j of pixel i by ``exp(-lam * ||e_i - e_j||)``. The
filters divide by the per-pixel mask sum over in-bounds neighbors, which is
at least 1 because the center mask is exactly 1.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from segaware.patches import (PatchSpec, col2im, dist2im, im2col, im2dist, masked_col2im, masked_im2col,
                              patch_reduce, patch_reduce_backward)
from segaware.tensor import ShapeError, as_tensor, gemm, matmul

log = logging.getLogger(__name__)

# incremented whenever a negative hardness is projected back to 0
negative_lambda_count = 0


class ConfigurationError(ValueError):
    pass


@dataclass
class MaskField:
    masks: np.ndarray  # (H*W, K), 0 on out-of-bounds neighbors
    lam: float
    spec: PatchSpec
    dist: np.ndarray  # (H*W, K), +inf on out-of-bounds neighbors
    valid: np.ndarray  # (H*W, K) bool
    shape: Optional[tuple] = None  # (H, W)
    emb: Optional[np.ndarray] = None
    norm: str = "l1"

    @property
    def sums(self):
        return self.masks.sum(axis=1)


def compute_masks(dist, lam, spec=None, shape=None):
    """exp(-lam * dist) on valid neighbors, 0 elsewhere.

    ``dist`` is a ColMatrix from im2dist or a raw (H*W, K) array in which
    +inf marks out-of-bounds neighbors.
    """
    global negative_lambda_count
    lam = float(lam)
    if lam < 0:
        negative_lambda_count += 1
        log.warning("negative mask hardness %g projected to 0", lam)
        lam = 0.0
    d = np.asarray(getattr(dist, "values", dist), dtype=np.float64)
    valid = getattr(dist, "valid", None)
    if valid is None:
        valid = np.isfinite(d)
    masks = np.where(valid, np.exp(-lam * np.where(valid, d, 0.0)), 0.0)
    return MaskField(masks, lam, spec, d, valid, tuple(shape) if shape is not None else None)


def make_masks(emb, spec, lam, norm="l1"):
    """im2dist followed by compute_masks, keeping ``emb`` for the backward pass."""
    emb = as_tensor(emb, 3)
    mf = compute_masks(im2dist(emb, spec, norm), lam, spec, emb.shape[:2])
    mf.emb = emb
    mf.norm = norm
    return mf


def mask_backward(grad_masks, mf, need_emb=True):
    """Chain a (H*W, K) mask gradient into (grad_lambda, grad_emb)."""
    valid = mf.valid
    g = np.where(valid, grad_masks, 0.0)
    d = np.where(valid, mf.dist, 0.0)
    grad_lambda = -float(np.sum(g * d * mf.masks))
    grad_emb = None
    if need_emb and mf.emb is not None:
        grad_emb = dist2im(-mf.lam * g * mf.masks, mf.emb, mf.spec, mf.norm, dist=d)
    return grad_lambda, grad_emb


def _check_spatial(x, mf):
    if mf.masks.shape[0] != x.shape[0] * x.shape[1] or (mf.shape and x.shape[:2] != tuple(mf.shape)):
        raise ShapeError(f"input {x.shape} does not match mask field {mf.shape}")


def bilateral_filter(x, mf):
    x = as_tensor(x, 3)
    _check_spatial(x, mf)
    z = patch_reduce(x, mf.masks, mf.spec)
    return (z / mf.sums[:, None]).reshape(x.shape)


def bilateral_backward(grad_y, x, mf):
    """Returns (grad_x, grad_masks)."""
    x = as_tensor(x, 3)
    s = mf.sums[:, None]
    g = np.asarray(grad_y, dtype=np.float64).reshape(-1, x.shape[2])
    gz = g / s
    y = patch_reduce(x, mf.masks, mf.spec) / s
    gx, gm = patch_reduce_backward(gz, x, mf.masks, mf.spec)
    gm += -(gz * y).sum(axis=1)[:, None]
    return gx, np.where(mf.valid, gm, 0.0)


@dataclass
class ConvFilter:
    weights: np.ndarray  # (K*E, F)
    spec: PatchSpec
    bias: Optional[np.ndarray] = None

    def check(self, channels):
        if self.weights.shape[0] != self.spec.K * channels:
            raise ConfigurationError(
                f"filter rows {self.weights.shape[0]} != K*E = {self.spec.K}*{channels}")


def conv(x, filt, exact=True):
    """Standard zero-padded convolution through im2col + GEMM.

    ``exact`` selects the ordered matmul; otherwise BLAS is used.
    """
    x = as_tensor(x, 3)
    filt.check(x.shape[2])
    mm = matmul if exact else gemm
    y = mm(im2col(x, filt.spec).values, filt.weights)
    if filt.bias is not None:
        y += filt.bias
    return y.reshape(x.shape[0], x.shape[1], -1)


def conv_backward(grad_y, x, filt):
    """Returns (grad_x, grad_weights, grad_bias)."""
    x = as_tensor(x, 3)
    g = np.asarray(grad_y, dtype=np.float64).reshape(-1, filt.weights.shape[1])
    cols = im2col(x, filt.spec).values
    gw = cols.T @ g
    gb = g.sum(axis=0)
    gx = col2im(g @ filt.weights.T, filt.spec, x.shape)
    return gx, gw, gb


def segaware_conv(x, mf, filt, exact=True):
    """Masked, mask-normalized convolution: masked im2col -> GEMM -> divide by mask sum.

    With ``exact`` the GEMM accumulates in neighbor order, so an all-ones
    per-channel filter reproduces :func:`bilateral_filter` bit for bit.
    """
    x = as_tensor(x, 3)
    _check_spatial(x, mf)
    if filt.spec != mf.spec:
        raise ConfigurationError(f"filter spec {filt.spec} != mask spec {mf.spec}")
    filt.check(x.shape[2])
    mm = matmul if exact else gemm
    z = mm(masked_im2col(x, mf.masks, mf.spec), filt.weights)
    y = z / mf.sums[:, None]
    if filt.bias is not None:
        y += filt.bias
    return y.reshape(x.shape[0], x.shape[1], -1)


class SegAwareGrads(NamedTuple):
    grad_x: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray
    grad_lambda: float
    grad_emb: Optional[np.ndarray]
    grad_masks: np.ndarray


def segaware_conv_backward(grad_y, x, mf, filt, need_emb=True):
    x = as_tensor(x, 3)
    H, W, E = x.shape
    K = mf.spec.K
    F = filt.weights.shape[1]
    g = np.asarray(grad_y, dtype=np.float64).reshape(-1, F)
    s = mf.sums[:, None]
    masked = masked_im2col(x, mf.masks, mf.spec)
    z = masked @ filt.weights
    gz = g / s
    grad_w = masked.T @ gz
    grad_b = g.sum(axis=0)
    grad_x, gm = masked_col2im(gz @ filt.weights.T, x, mf.masks, mf.spec)
    gm += -(gz * z / s).sum(axis=1)[:, None]
    gm = np.where(mf.valid, gm, 0.0)
    grad_lambda, grad_emb = mask_backward(gm, mf, need_emb)
    return SegAwareGrads(grad_x, grad_w, grad_b, grad_lambda, grad_emb, gm)
