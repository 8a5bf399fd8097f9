"""Patch extraction: im2col, im2dist and their adjoints.

Neighbors of a pixel are enumerated in raster order over the kernel window,
``k = ky * kernel_w + kx``, at spacing ``atrous``; the center has index
``K // 2``. Out-of-bounds neighbors are excluded: im2col writes 0 there,
im2dist writes +inf, and both report them through a validity mask.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from segaware.backend import kernels
from segaware.tensor import ShapeError, as_tensor

NORMS = {"l1": 0, "l2": 1, "sql2": 2}


@dataclass(frozen=True)
class PatchSpec:
    kernel_h: int = 3
    kernel_w: int = 3
    atrous: int = 1

    def __post_init__(self):
        for n in (self.kernel_h, self.kernel_w):
            if n < 1 or n % 2 == 0:
                raise ValueError(f"kernel extents must be odd and positive, got {n}")
        if self.atrous < 1:
            raise ValueError(f"atrous must be >= 1, got {self.atrous}")

    @classmethod
    def square(cls, size, atrous=1):
        return cls(size, size, atrous)

    @property
    def K(self):
        return self.kernel_h * self.kernel_w

    @property
    def center(self):
        return self.K // 2

    @property
    def args(self):
        return self.kernel_h, self.kernel_w, self.atrous

    def offsets(self):
        """(K, 2) array of (dy, dx) pixel offsets in neighbor order."""
        ky, kx = np.divmod(np.arange(self.K), self.kernel_w)
        return np.stack([(ky - self.kernel_h // 2) * self.atrous,
                         (kx - self.kernel_w // 2) * self.atrous], axis=1)


@dataclass
class ColMatrix:
    values: np.ndarray  # (H*W, K*E) or (H*W, K)
    valid: np.ndarray  # (H*W, K) bool


@lru_cache(maxsize=64)
def _validity(H, W, spec):
    off = spec.offsets()
    rows, cols = np.divmod(np.arange(H * W), W)
    yy = rows[:, None] + off[None, :, 0]
    xx = cols[:, None] + off[None, :, 1]
    valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
    valid.setflags(write=False)
    return valid


def validity(H, W, spec):
    """Read-only (H*W, K) mask of in-bounds neighbors."""
    return _validity(int(H), int(W), spec)


def _norm_code(norm):
    try:
        return NORMS[norm.lower()]
    except KeyError:
        raise ValueError(f"unknown norm {norm!r}; expected one of {sorted(NORMS)}") from None


def im2col(x, spec):
    x = as_tensor(x, 3)
    H, W, _ = x.shape
    return ColMatrix(kernels.im2col(x, *spec.args), validity(H, W, spec))


def im2dist(emb, spec, norm="l1"):
    emb = as_tensor(emb, 3)
    H, W, _ = emb.shape
    return ColMatrix(kernels.im2dist(emb, *spec.args, _norm_code(norm)), validity(H, W, spec))


def col2im(grad, spec, shape):
    """Scatter-add adjoint of im2col back onto an image of ``shape`` (H, W, E)."""
    H, W, E = shape
    grad = np.ascontiguousarray(getattr(grad, "values", grad), dtype=np.float64)
    if grad.shape != (H * W, spec.K * E):
        raise ShapeError(f"col2im: gradient {grad.shape} does not fit image {shape} with K={spec.K}")
    return kernels.col2im(grad, H, W, E, *spec.args)


def dist2im(grad, emb, spec, norm="l1", dist=None):
    """Gradient of sum(grad * im2dist(emb)) with respect to ``emb``.

    L1 uses sign(0) = 0; L2 contributes nothing where the distance is 0.
    ``dist`` may be passed to skip recomputing the forward distances.
    """
    emb = as_tensor(emb, 3)
    H, W, _ = emb.shape
    code = _norm_code(norm)
    grad = np.ascontiguousarray(getattr(grad, "values", grad), dtype=np.float64)
    if grad.shape != (H * W, spec.K):
        raise ShapeError(f"dist2im: gradient {grad.shape} does not fit {emb.shape} with K={spec.K}")
    if dist is None:
        dist = kernels.im2dist(emb, *spec.args, code)
    dist = np.ascontiguousarray(getattr(dist, "values", dist), dtype=np.float64)
    return kernels.dist2im(grad, dist, emb, *spec.args, code)


def patch_reduce(x, weights, spec):
    """y[i] = sum_k weights[i, k] * x[neighbor k of i], shape (H*W, E)."""
    x = as_tensor(x, 3)
    return kernels.patch_reduce(x, np.ascontiguousarray(weights, dtype=np.float64), *spec.args)


def patch_reduce_backward(grad, x, weights, spec):
    """Returns (grad_x, grad_weights) for ``patch_reduce``."""
    return kernels.patch_reduce_backward(
        np.ascontiguousarray(grad, dtype=np.float64).reshape(-1, x.shape[2]),
        as_tensor(x, 3), np.ascontiguousarray(weights, dtype=np.float64), *spec.args)


def masked_im2col(x, weights, spec):
    """im2col with each neighbor block scaled by ``weights[i, k]``."""
    x = as_tensor(x, 3)
    return kernels.masked_im2col(x, np.ascontiguousarray(weights, dtype=np.float64), *spec.args)


def masked_col2im(grad, x, weights, spec):
    """Adjoint of :func:`masked_im2col`: returns (grad_x, grad_weights)."""
    x = as_tensor(x, 3)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if grad.shape != (x.shape[0] * x.shape[1], spec.K * x.shape[2]):
        raise ShapeError(f"masked_col2im: gradient {grad.shape} does not fit {x.shape} with K={spec.K}")
    return kernels.masked_col2im(grad, x, np.ascontiguousarray(weights, dtype=np.float64), *spec.args)
