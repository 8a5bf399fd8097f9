"""Evaluation metrics: trimap bands, mean IOU, end-point error and mask AUC."""

import logging

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from segaware.embedding_loss import IGNORE_LABEL, pair_labels
from segaware.patches import im2dist

log = logging.getLogger(__name__)


def boundary_mask(labels):
    """Pixels with at least one 4-neighbor carrying a different label."""
    lab = np.asarray(labels)
    b = np.zeros(lab.shape, dtype=bool)
    dv = lab[1:, :] != lab[:-1, :]
    dh = lab[:, 1:] != lab[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def trimap(labels, halfwidth):
    """Pixels within Chebyshev distance ``halfwidth`` of a boundary pixel."""
    if halfwidth < 1:
        raise ValueError("halfwidth must be >= 1")
    b = boundary_mask(labels)
    if not b.any():
        return b
    return ndimage.maximum_filter(b, size=2 * int(halfwidth) + 1, mode="constant", cval=False)


class IOUAccumulator:
    """Sums per-class intersections and unions over many label maps."""

    def __init__(self, num_classes):
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.present = np.zeros(num_classes, dtype=bool)

    def add(self, pred, gt, restrict=None):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        keep = gt != IGNORE_LABEL
        if restrict is not None:
            keep &= np.asarray(restrict, dtype=bool)
        p, g = pred[keep], gt[keep]
        n = len(self.inter)
        self.present |= np.bincount(g, minlength=n)[:n] > 0
        self.inter += np.bincount(g[p == g], minlength=n)[:n]
        self.union += (np.bincount(p, minlength=n)[:n] + np.bincount(g, minlength=n)[:n]
                       - np.bincount(g[p == g], minlength=n)[:n])

    def value(self):
        """Mean IOU over classes present in the ground truth; NaN if none are."""
        if not self.present.any():
            return float("nan")
        return float(np.mean(self.inter[self.present] / self.union[self.present]))


def mean_iou(pred, gt, restrict=None):
    pred, gt = np.asarray(pred), np.asarray(gt)
    n = int(max(pred.max(initial=0), np.where(gt == IGNORE_LABEL, 0, gt).max(initial=0))) + 1
    acc = IOUAccumulator(n)
    acc.add(pred, gt, restrict)
    return acc.value()


def epe(pred, gt, restrict=None):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    err = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    if restrict is not None:
        err = err[np.asarray(restrict, dtype=bool)]
    return float(err.mean()) if err.size else float("nan")


def pair_scores(emb, labels, spec, norm="l1"):
    """(score, same_region) for every usable neighbor pair; score = -distance."""
    d = im2dist(emb, spec, norm)
    same, usable = pair_labels(labels, spec)
    return -d.values[usable], same[usable]


def auc(scores, positive):
    """Area under the ROC curve via the rank-sum statistic (ties count half).

    Returns NaN when either class is empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        log.warning("AUC undefined: only one pair class present")
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mask_auc(emb, labels, spec, norm="l1"):
    """AUC of separating same-region from cross-region pairs by mask value.

    exp(-lam * d) is monotone in d for any lam > 0, so the distance ranking
    is used directly. Degenerate inputs give NaN (see :func:`auc`).
    """
    return auc(*pair_scores(emb, labels, spec, norm))


def pooled_mask_auc(pairs):
    """AUC over pairs pooled from many scenes; ``pairs`` yields pair_scores tuples."""
    s, p = zip(*pairs)
    return auc(np.concatenate(s), np.concatenate(p))
