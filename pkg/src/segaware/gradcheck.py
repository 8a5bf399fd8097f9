"""Central finite differences for checking hand-written backward passes."""

import numpy as np


def rel_error(analytic, numeric, floor=1e-3):
    """Elementwise |a - n| / max(|a| + |n|, floor).

    The floor keeps exact-zero gradients from turning round-off in the
    numeric estimate into a large ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n))


def central_difference(f, x, index, h=1e-5):
    """d f / d x[index] with x perturbed in place and restored.

    Also returns a kink indicator. For smooth f the one-sided slope gap
    shrinks linearly with the step, so the gap at h is four times the gap at
    h/4; a kink (ReLU, hinge, L1, max) inside [-h, h] breaks that scaling.
    The indicator is the deviation from it beyond round-off, in slope units.
    """
    old = x[index]

    def at(delta):
        x[index] = old + delta
        return f()

    f0 = at(0.0)
    fp, fm = at(h), at(-h)
    qp, qm = at(h / 4), at(-h / 4)
    x[index] = old
    gap = (fp - 2 * f0 + fm) / h
    gap_q = (qp - 2 * f0 + qm) / (h / 4)
    # a few ulps of f per evaluation, amplified by the 1/h and 4/(h/4) factors
    roundoff = 128 * np.finfo(np.float64).eps * abs(f0) / h
    return (fp - fm) / (2 * h), max(0.0, abs(gap - 4 * gap_q) - roundoff)


def is_kinked(numeric, kink, tol=1e-6, floor=1e-3):
    """True when a kink could move the central difference by more than
    ``tol`` relative to max(|numeric|, floor)."""
    return kink > tol * max(abs(numeric), floor)


def check_gradient(f, x, analytic, indices, h=1e-5, kink_tol=None):
    """Max relative error over ``indices``; kinked points are skipped when
    ``kink_tol`` is set. Returns (max_error, n_checked)."""
    worst, checked = 0.0, 0
    for idx in indices:
        num, kink = central_difference(f, x, idx, h)
        if kink_tol is not None and is_kinked(num, kink, kink_tol):
            continue
        worst = max(worst, float(rel_error(analytic[idx], num)))
        checked += 1
    return worst, checked


def sample_indices(shape, count, rng):
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(i, shape) for i in sorted(flat)]
