"""Pairwise hinge loss for per-pixel embeddings over atrous neighborhoods."""

from dataclasses import dataclass

import numpy as np

from segaware.patches import PatchSpec, dist2im, im2col, im2dist
from segaware.tensor import ShapeError, as_tensor

IGNORE_LABEL = 255


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 2.0
    norm: str = "l1"
    neighborhoods: tuple = ((3, 1), (3, 2), (3, 5))

    def __post_init__(self):
        if not 0 <= self.alpha <= self.beta:
            raise ValueError(f"need 0 <= alpha <= beta, got {self.alpha}, {self.beta}")
        if not self.neighborhoods:
            raise ValueError("at least one neighborhood is required")
        object.__setattr__(self, "neighborhoods",
                           tuple((int(k), int(a)) for k, a in self.neighborhoods))
        for k, a in self.neighborhoods:
            PatchSpec(k, k, a)

    def specs(self):
        return [PatchSpec(k, k, a) for k, a in self.neighborhoods]


def pairwise_hinge(dist, same_label, cfg=LossConfig()):
    if same_label:
        return max(dist - cfg.alpha, 0.0)
    return max(cfg.beta - dist, 0.0)


def pair_labels(labels, spec):
    """Per-pair (same, usable) masks of shape (H*W, K).

    A pair is usable when the neighbor is in bounds, is not the center, and
    neither pixel carries the ignore label.
    """
    lab = np.asarray(labels)
    H, W = lab.shape
    cols = im2col(lab.reshape(H, W, 1).astype(np.float64), spec)
    center = lab.reshape(-1, 1).astype(np.float64)
    usable = cols.valid.copy()
    usable[:, spec.center] = False
    usable &= (cols.values != IGNORE_LABEL) & (center != IGNORE_LABEL)
    return cols.values == center, usable


def embedding_loss(emb, labels, cfg=LossConfig()):
    """Summed hinge loss and its subgradient with respect to ``emb``."""
    emb = as_tensor(emb, 3)
    labels = np.asarray(labels)
    if labels.shape != emb.shape[:2]:
        raise ShapeError(f"labels {labels.shape} vs embeddings {emb.shape}")
    total = 0.0
    grad = np.zeros_like(emb)
    for spec in cfg.specs():
        dist = im2dist(emb, spec, cfg.norm).values
        same, usable = pair_labels(labels, spec)
        d = np.where(usable, dist, 0.0)
        near = usable & same
        far = usable & ~same
        total += float(np.maximum(d[near] - cfg.alpha, 0.0).sum())
        total += float(np.maximum(cfg.beta - d[far], 0.0).sum())
        g = np.zeros_like(d)
        g[near & (d > cfg.alpha)] = 1.0
        g[far & (d < cfg.beta)] = -1.0
        grad += dist2im(g, emb, spec, cfg.norm, dist=np.where(usable, dist, 0.0))
    return total, grad
