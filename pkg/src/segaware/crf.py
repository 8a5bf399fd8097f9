"""Sparse segmentation-aware CRF with mean-field inference.

Both pairwise kernels live on finite patch windows: an appearance kernel that
combines a spatial Gaussian with a squared-L2 embedding Gaussian, and a purely
spatial smoothness kernel. Messages are masked patch sums of the current
marginals, so inference reuses the same gather kernels as the filters.
Updates are synchronous over all pixels.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from segaware.masks import MaskField
from segaware.patches import (PatchSpec, dist2im, im2col, im2dist, patch_reduce,
                              patch_reduce_backward, validity)
from segaware.tensor import as_tensor


class ContractError(ValueError):
    pass


def potts(num_labels):
    return 1.0 - np.eye(num_labels)


@dataclass
class CRFParams:
    w1: float = 1.0
    w2: float = 1.0
    theta_alpha: float = 4.0
    theta_beta: float = 1.0
    theta_gamma: float = 1.5
    compat: np.ndarray = None  # L x L; Potts when None
    bilateral_spec: PatchSpec = field(default_factory=lambda: PatchSpec(13, 13, 9))
    spatial_spec: PatchSpec = field(default_factory=lambda: PatchSpec(5, 5, 1))
    iterations: int = 2

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("CRF bandwidths must be positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("CRF kernel weights must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def compat_matrix(self, num_labels):
        if self.compat is None:
            return potts(num_labels)
        mu = np.asarray(self.compat, dtype=np.float64)
        if mu.shape != (num_labels, num_labels):
            raise ValueError(f"compat {mu.shape} does not match {num_labels} labels")
        return mu


def _spatial_sq(spec):
    off = spec.offsets().astype(np.float64)
    return (off ** 2).sum(axis=1)


def pairwise_kernel(emb, params, zero_self=True):
    """(appearance, smoothness) kernels as MaskFields on their own windows.

    The appearance field keeps squared embedding distances in ``dist`` and
    ``emb`` so gradients can flow back to the embeddings.
    """
    emb = as_tensor(emb, 3)
    H, W, _ = emb.shape
    bspec, sspec = params.bilateral_spec, params.spatial_spec

    d2 = im2dist(emb, bspec, "sql2")
    bvalid = d2.valid
    expo = -_spatial_sq(bspec)[None, :] / (2 * params.theta_alpha ** 2) \
        - np.where(bvalid, d2.values, 0.0) / (2 * params.theta_beta ** 2)
    app = np.where(bvalid, np.exp(expo), 0.0)

    svalid = validity(H, W, sspec)
    smooth = np.where(svalid, np.exp(-_spatial_sq(sspec) / (2 * params.theta_gamma ** 2))[None, :], 0.0)
    if zero_self:
        app[:, bspec.center] = 0.0
        smooth[:, sspec.center] = 0.0
    appearance = MaskField(app, 1.0, bspec, d2.values, bvalid, (H, W), emb, "sql2")
    smoothness = MaskField(smooth, 1.0, sspec, np.where(svalid, 0.0, np.inf), svalid, (H, W))
    return appearance, smoothness


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(q, gq):
    return q * (gq - (gq * q).sum(axis=-1, keepdims=True))


def check_marginals(Q, tol=1e-9):
    Q = np.asarray(Q)
    if np.any(Q < 0) or np.any(Q > 1) or np.any(np.abs(Q.sum(axis=-1) - 1.0) > tol):
        raise ContractError("Q is not a valid per-pixel distribution")


def _messages(Q, kernels):
    appearance, smoothness = kernels
    H, W, L = Q.shape
    ma = patch_reduce(Q, appearance.masks, appearance.spec)
    ms = patch_reduce(Q, smoothness.masks, smoothness.spec)
    return ma, ms


def meanfield_step(Q, unary, kernels, params, _trace=None):
    Q = as_tensor(Q, 3)
    check_marginals(Q)
    H, W, L = Q.shape
    mu = params.compat_matrix(L)
    ma, ms = _messages(Q, kernels)
    pairwise = (params.w1 * ma + params.w2 * ms) @ mu.T
    Qn = softmax(-np.asarray(unary, dtype=np.float64).reshape(-1, L) - pairwise).reshape(H, W, L)
    if _trace is not None:
        _trace.append((ma, ms))
    return Qn


class CRFSaved(NamedTuple):
    unary: np.ndarray
    emb: np.ndarray
    params: CRFParams
    kernels: tuple
    Qs: list  # Q_0 .. Q_T
    messages: list  # (appearance, smoothness) per step


def crf_forward(unary, emb, params):
    """Mean-field inference that also returns what crf_backward needs."""
    unary = as_tensor(unary, 3)
    kernels = pairwise_kernel(emb, params)
    Q = softmax(-unary)
    Qs, msgs = [Q], []
    for _ in range(params.iterations):
        Q = meanfield_step(Q, unary, kernels, params, _trace=msgs)
        Qs.append(Q)
    return Q, CRFSaved(unary, as_tensor(emb, 3), params, kernels, Qs, msgs)


def crf_inference(unary, emb, params):
    return crf_forward(unary, emb, params)[0]


class CRFGrads(NamedTuple):
    grad_unary: np.ndarray
    grad_emb: np.ndarray
    grad_w1: float
    grad_w2: float


def crf_backward(grad_Q, saved):
    params = saved.params
    appearance, smoothness = saved.kernels
    H, W, L = saved.unary.shape
    mu = params.compat_matrix(L)
    gU = np.zeros((H * W, L))
    gA = np.zeros_like(appearance.masks)
    gw1 = gw2 = 0.0
    gQ = np.asarray(grad_Q, dtype=np.float64).reshape(H * W, L)
    for t in range(params.iterations - 1, -1, -1):
        q_out = saved.Qs[t + 1].reshape(H * W, L)
        q_in = saved.Qs[t]
        ma, ms = saved.messages[t]
        g_logits = _softmax_backward(q_out, gQ)
        gU -= g_logits
        gM = -g_logits @ mu
        gw1 += float(np.sum(gM * ma))
        gw2 += float(np.sum(gM * ms))
        gq_a, gA_t = patch_reduce_backward(params.w1 * gM, q_in, appearance.masks, appearance.spec)
        gq_s, _ = patch_reduce_backward(params.w2 * gM, q_in, smoothness.masks, smoothness.spec)
        gA += gA_t
        gQ = (gq_a + gq_s).reshape(H * W, L)
    gU -= _softmax_backward(saved.Qs[0].reshape(H * W, L), gQ)

    # appearance = exp(... - d2 / (2 theta_beta^2)); center and out-of-bounds entries are constant 0
    bspec = appearance.spec
    g_d2 = gA * appearance.masks * (-1.0 / (2 * params.theta_beta ** 2))
    g_d2[:, bspec.center] = 0.0
    d2 = np.where(appearance.valid, appearance.dist, 0.0)
    grad_emb = dist2im(g_d2, saved.emb, bspec, "sql2", dist=d2)
    return CRFGrads(gU.reshape(H, W, L), grad_emb, gw1, gw2)


def gibbs_energy(labeling, unary, kernels, params):
    """Unary cost plus every in-window unordered pair counted once (j before i in raster order)."""
    labeling = np.asarray(labeling)
    unary = np.asarray(unary, dtype=np.float64)
    H, W = labeling.shape
    L = unary.shape[2]
    mu = params.compat_matrix(L)
    flat = labeling.reshape(-1)
    terms = [unary.reshape(-1, L)[np.arange(H * W), flat]]
    lab = labeling.reshape(H, W, 1).astype(np.float64)
    for weight, kern in zip((params.w1, params.w2), kernels):
        spec = kern.spec
        cols = im2col(lab, spec)
        before = np.arange(spec.K) < spec.center
        use = cols.valid & before[None, :]
        nbr = np.where(use, cols.values, 0).astype(np.int64)
        pair_mu = mu[flat[:, None], nbr]
        terms.append((weight * np.where(use, pair_mu * kern.masks, 0.0)).ravel())
    # correctly rounded sum: energies reach the thousands and must agree with a brute-force loop
    return math.fsum(np.concatenate(terms))
