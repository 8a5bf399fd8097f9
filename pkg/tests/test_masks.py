import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segaware import masks as M
from segaware import reference
from segaware.gradcheck import rel_error
from segaware.patches import PatchSpec, im2dist


def channel_identity(spec, channels):
    """All-ones spatial filter applied per channel: weights[k*E + e, f] = [e == f]."""
    return np.tile(np.eye(channels), (spec.K, 1))


def test_compute_masks_examples():
    spec = PatchSpec(3, 3)
    d = im2dist(np.zeros((3, 3, 1)), spec)
    mf = M.compute_masks(d, 5.0, spec, (3, 3))
    assert np.all(mf.masks[:, spec.center] == 1.0)
    single = M.compute_masks(np.array([[math.log(2.0)]]), 1.0)
    assert single.masks[0, 0] == pytest.approx(0.5, abs=1e-15)
    emb = np.random.default_rng(0).standard_normal((4, 4, 3))
    mf0 = M.make_masks(emb, spec, 0.0)
    assert np.all(mf0.masks[mf0.valid] == 1.0) and np.all(mf0.masks[~mf0.valid] == 0.0)


def test_negative_lambda_projected():
    before = M.negative_lambda_count
    mf = M.compute_masks(np.array([[0.0, 1.0]]), -2.0)
    assert mf.lam == 0.0 and M.negative_lambda_count == before + 1
    assert np.all(mf.masks == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 5), st.floats(0, 5))
def test_mask_range_and_monotonicity(seed, lam_a, lam_b):
    r = np.random.default_rng(seed)
    spec = PatchSpec(3, 3, 2)
    emb = r.standard_normal((5, 6, 2))
    lo, hi = sorted((lam_a, lam_b))
    m_lo, m_hi = M.make_masks(emb, spec, lo), M.make_masks(emb, spec, hi)
    for mf in (m_lo, m_hi):
        assert np.all((mf.masks >= 0) & (mf.masks <= 1))
        assert np.all(mf.masks[:, spec.center] == 1.0)
        assert np.all(mf.masks[~mf.valid] == 0.0)
    assert np.all(m_hi.masks <= m_lo.masks)


def test_bilateral_constant_input():
    spec = PatchSpec(3, 3, 2)
    mf = M.make_masks(np.random.default_rng(1).standard_normal((6, 5, 3)), spec, 1.3)
    y = M.bilateral_filter(np.full((6, 5, 2), 0.25), mf)
    np.testing.assert_allclose(y, 0.25, rtol=0, atol=1e-15)


def test_bilateral_hard_masks_average_same_embedding_row():
    emb = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]]).reshape(3, 3, 1)
    x = np.arange(9.0).reshape(3, 3, 1)
    y = M.bilateral_filter(x, M.make_masks(emb, PatchSpec(3, 3), 100.0))
    # masks are {1 on the middle row, exp(-100) elsewhere}
    assert y[1, 1, 0] == pytest.approx((3 + 4 + 5) / 3, abs=1e-12)


def test_lambda_zero_is_box_filter_over_valid_neighbors(backend, rng):
    spec = PatchSpec(3, 3)
    x = rng.standard_normal((6, 7, 2))
    y = M.bilateral_filter(x, M.make_masks(rng.standard_normal((6, 7, 3)), spec, 0.0))
    for r in range(6):
        for c in range(7):
            for ch in range(2):
                vals = [x[r + dy, c + dx, ch] for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                        if 0 <= r + dy < 6 and 0 <= c + dx < 7]
                acc = 0.0
                for v in vals:
                    acc += v
                assert y[r, c, ch] == acc / len(vals)


def test_all_ones_filter_equals_bilateral_bitwise(backend, rng):
    spec = PatchSpec(3, 3, 2)
    x = rng.standard_normal((8, 7, 3))
    mf = M.make_masks(rng.standard_normal((8, 7, 4)), spec, 0.8)
    y_conv = M.segaware_conv(x, mf, M.ConvFilter(channel_identity(spec, 3), spec))
    np.testing.assert_array_equal(y_conv, M.bilateral_filter(x, mf))


def test_center_one_hot_filter_lambda_zero():
    spec = PatchSpec(3, 3)
    x = np.random.default_rng(2).standard_normal((5, 5, 1))
    w = np.zeros((9, 1))
    w[spec.center] = 1.0
    mf = M.make_masks(np.zeros((5, 5, 2)), spec, 0.0)
    y = M.segaware_conv(x, mf, M.ConvFilter(w, spec))
    assert y[2, 2, 0] == pytest.approx(x[2, 2, 0] / 9, abs=1e-15)


def test_segaware_conv_matches_loop_oracle(backend, rng):
    spec = PatchSpec(3, 3)
    x = rng.standard_normal((6, 6, 3))
    mf = M.make_masks(rng.standard_normal((6, 6, 2)), spec, 0.7)
    w, b = rng.standard_normal((27, 4)), rng.standard_normal(4)
    y = M.segaware_conv(x, mf, M.ConvFilter(w, spec, b))
    np.testing.assert_allclose(y, reference.segaware_conv(x, mf.masks, w, 3, 3, 1, b), rtol=0, atol=1e-12)


def test_all_ones_masks_is_scaled_standard_conv(rng):
    spec = PatchSpec(3, 3, 2)
    x = rng.standard_normal((7, 6, 2))
    w = rng.standard_normal((18, 3))
    mf = M.make_masks(np.zeros((7, 6, 1)), spec, 1.0)
    y = M.segaware_conv(x, mf, M.ConvFilter(w, spec))
    counts = mf.valid.sum(axis=1).reshape(7, 6, 1)
    np.testing.assert_allclose(y, M.conv(x, M.ConvFilter(w, spec)) / counts, rtol=0, atol=1e-12)
    np.testing.assert_allclose(M.conv(x, M.ConvFilter(w, spec)), reference.conv(x, w, 3, 3, 2), atol=1e-12)


def test_coordinate_embeddings_give_isotropic_kernel():
    spec = PatchSpec(5, 5)
    H = W = 9
    coords = np.stack(np.meshgrid(np.arange(H), np.arange(W), indexing="ij"), axis=-1).astype(float)
    mf = M.make_masks(coords, spec, 0.6, norm="l2")
    interior = [r * W + c for r in range(2, H - 2) for c in range(2, W - 2)]
    rows = mf.masks[interior]
    np.testing.assert_allclose(rows, rows[0][None, :].repeat(len(interior), 0), rtol=0, atol=1e-15)
    radius = np.hypot(*spec.offsets().T)
    order = np.argsort(radius)
    # monotonically decreasing in offset length, equal for equal lengths
    assert np.all(np.diff(rows[0][order]) <= 1e-15)
    for r in np.unique(radius):
        assert np.ptp(rows[0][radius == r]) <= 1e-15


def _fd(f, x, h=1e-5):
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        num[idx] = (fp - fm) / (2 * h)
    return num


def _kink_free_emb(rng, shape, gap=1e-3):
    while True:
        emb = rng.standard_normal(shape)
        vals = np.sort(emb.reshape(-1, shape[2]), axis=0)
        if np.all(np.diff(vals, axis=0) > gap):
            return emb


@pytest.mark.parametrize("norm,tol", [("l2", 1e-6), ("l1", 1e-5)])
def test_segaware_conv_backward(backend, rng, norm, tol):
    spec = PatchSpec(3, 3, 1)
    x = rng.standard_normal((5, 5, 2))
    emb = _kink_free_emb(rng, (5, 5, 3))
    w, b = rng.standard_normal((18, 3)), rng.standard_normal(3)
    G = rng.standard_normal((5, 5, 3))
    lam = np.array([0.7])

    def loss():
        mf = M.make_masks(emb, spec, lam[0], norm)
        return float(np.sum(G * M.segaware_conv(x, mf, M.ConvFilter(w, spec, b))))

    mf = M.make_masks(emb, spec, lam[0], norm)
    grads = M.segaware_conv_backward(G, x, mf, M.ConvFilter(w, spec, b))
    assert rel_error(grads.grad_weights, _fd(loss, w)).max() < 1e-6
    assert rel_error(grads.grad_bias, _fd(loss, b)).max() < 1e-6
    assert rel_error(grads.grad_x, _fd(loss, x)).max() < 1e-6
    assert rel_error(grads.grad_lambda, _fd(loss, lam)[0]) < 1e-6
    assert rel_error(grads.grad_emb, _fd(loss, emb)).max() < tol


def test_grad_lambda_constant_embeddings_is_zero(rng):
    spec = PatchSpec(3, 3)
    x = rng.standard_normal((4, 4, 2))
    mf = M.make_masks(np.full((4, 4, 2), 0.3), spec, 0.0)
    grads = M.segaware_conv_backward(rng.standard_normal((4, 4, 2)), x, mf,
                                     M.ConvFilter(rng.standard_normal((18, 2)), spec))
    assert grads.grad_lambda == 0.0


def test_bilateral_backward(backend, rng):
    spec = PatchSpec(3, 3, 2)
    x = rng.standard_normal((5, 6, 2))
    emb = _kink_free_emb(rng, (5, 6, 2))
    G = rng.standard_normal((5, 6, 2))
    lam = np.array([1.1])

    def loss():
        return float(np.sum(G * M.bilateral_filter(x, M.make_masks(emb, spec, lam[0], "l2"))))

    mf = M.make_masks(emb, spec, lam[0], "l2")
    gx, gm = M.bilateral_backward(G, x, mf)
    g_lam, g_emb = M.mask_backward(gm, mf)
    assert rel_error(gx, _fd(loss, x)).max() < 1e-6
    assert rel_error(g_lam, _fd(loss, lam)[0]) < 1e-6
    assert rel_error(g_emb, _fd(loss, emb)).max() < 1e-6


def test_spec_mismatch_is_configuration_error(rng):
    x = rng.standard_normal((4, 4, 1))
    mf = M.make_masks(x, PatchSpec(3, 3), 1.0)
    with pytest.raises(M.ConfigurationError):
        M.segaware_conv(x, mf, M.ConvFilter(np.ones((25, 1)), PatchSpec(5, 5)))
