import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segaware import reference
from segaware.gradcheck import rel_error
from segaware.patches import PatchSpec, col2im, masked_col2im, masked_im2col, dist2im, im2col, im2dist, patch_reduce, patch_reduce_backward


def test_patchspec_validation():
    assert PatchSpec(3, 5, 2).K == 15 and PatchSpec(3, 5, 2).center == 7
    with pytest.raises(ValueError):
        PatchSpec(2, 3)
    with pytest.raises(ValueError):
        PatchSpec(3, 3, 0)


def test_im2col_trivial(backend):
    x = np.array([[[1.0, 2.0]]])
    np.testing.assert_array_equal(im2col(x, PatchSpec(1, 1)).values, [[1.0, 2.0]])
    img = np.arange(1.0, 10.0).reshape(3, 3, 1)
    cols = im2col(img, PatchSpec(3, 3))
    np.testing.assert_array_equal(cols.values[4], np.arange(1.0, 10.0))
    assert cols.valid[4].all()
    assert cols.valid[0].sum() == 4 and cols.values[0, 0] == 0.0


def test_im2col_matches_loop_oracle(backend, rng):
    x = rng.standard_normal((5, 5, 3))
    np.testing.assert_array_equal(im2col(x, PatchSpec(3, 3, 2)).values, reference.im2col(x, 3, 3, 2))


def test_im2dist_hand_case(backend):
    emb = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]]).reshape(3, 3, 1)
    d = im2dist(emb, PatchSpec(3, 3), "l1")
    np.testing.assert_array_equal(d.values[4], [1, 1, 1, 0, 0, 0, 1, 1, 1])
    assert np.isinf(d.values[0, 0]) and not d.valid[0, 0]


def test_im2dist_constant_and_norm_identity(backend, rng):
    d = im2dist(np.full((4, 5, 3), 0.7), PatchSpec(3, 3, 2))
    assert np.all(d.values[d.valid] == 0)
    emb = rng.standard_normal((6, 6, 1))
    spec = PatchSpec(5, 5, 1)
    l1, l2 = im2dist(emb, spec, "l1"), im2dist(emb, spec, "l2")
    np.testing.assert_allclose(l1.values[l1.valid], l2.values[l2.valid], atol=1e-15)


def test_im2dist_matches_loop_oracle_and_is_symmetric(backend, rng):
    emb = rng.standard_normal((7, 6, 4))
    spec = PatchSpec(3, 3, 2)
    for norm in ("l1", "l2", "sql2"):
        d = im2dist(emb, spec, norm)
        ref = reference.im2dist(emb, 3, 3, 2, norm)
        np.testing.assert_allclose(d.values[d.valid], ref[d.valid], rtol=0, atol=1e-12)
        assert np.all(np.isinf(d.values[~d.valid]))
    d = im2dist(emb, spec).values.reshape(7, 6, 9)
    off = spec.offsets()
    for r in range(7):
        for c in range(6):
            for k, (dy, dx) in enumerate(off):
                rr, cc = r + dy, c + dx
                if 0 <= rr < 7 and 0 <= cc < 6:
                    assert d[r, c, k] == d[rr, cc, 8 - k]


def test_validity_agrees(backend, rng):
    x = rng.standard_normal((5, 7, 2))
    spec = PatchSpec(5, 3, 2)
    np.testing.assert_array_equal(im2col(x, spec).valid, im2dist(x, spec).valid)
    assert im2col(x, spec).valid[:, spec.center].all()


def test_col2im_trivial(backend, rng):
    x = rng.standard_normal((4, 3, 2))
    spec = PatchSpec(1, 1)
    np.testing.assert_array_equal(col2im(im2col(x, spec).values, spec, x.shape), x)
    ones = np.ones((25, 9))
    out = col2im(ones, PatchSpec(3, 3), (5, 5, 1))
    assert out[2, 2, 0] == 9 and out[0, 0, 0] == 4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 3), st.sampled_from([1, 3, 5]),
       st.sampled_from([1, 3]), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_col2im_is_adjoint(H, W, E, kh, kw, atrous, seed):
    r = np.random.default_rng(seed)
    spec = PatchSpec(kh, kw, atrous)
    x = r.standard_normal((H, W, E))
    G = r.standard_normal((H * W, spec.K * E))
    lhs = np.sum(im2col(x, spec).values * G)
    rhs = np.sum(x * col2im(G, spec, x.shape))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, np.abs(G).sum())


def _fd_dist2im(emb, spec, norm, G, h=1e-5):
    num = np.zeros_like(emb)
    for idx in np.ndindex(emb.shape):
        e = emb.copy()
        e[idx] += h
        fp = np.sum(np.where(np.isfinite(G), G, 0) * np.nan_to_num(im2dist(e, spec, norm).values, posinf=0))
        e[idx] -= 2 * h
        fm = np.sum(np.where(np.isfinite(G), G, 0) * np.nan_to_num(im2dist(e, spec, norm).values, posinf=0))
        num[idx] = (fp - fm) / (2 * h)
    return num


def test_dist2im_constant_field_is_zero(backend, rng):
    spec = PatchSpec(3, 3)
    emb = np.full((4, 4, 2), 1.5)
    G = rng.standard_normal((16, 9))
    for norm in ("l1", "l2"):
        assert np.all(dist2im(G, emb, spec, norm) == 0)


def _kink_free_field(rng, shape, gap=1e-3):
    # every coordinate difference between any two pixels exceeds the kink margin
    while True:
        emb = rng.standard_normal(shape)
        vals = np.sort(emb.reshape(-1, shape[2]), axis=0)
        if np.all(np.diff(vals, axis=0) > gap):
            return emb


@pytest.mark.parametrize("norm,tol", [("l1", 1e-5), ("l2", 1e-6), ("sql2", 1e-6)])
def test_dist2im_finite_differences(backend, rng, norm, tol):
    spec = PatchSpec(3, 3, 1)
    emb = _kink_free_field(rng, (4, 4, 2))
    G = rng.standard_normal((16, 9))
    analytic = dist2im(G, emb, spec, norm)
    numeric = _fd_dist2im(emb, spec, norm, G)
    assert rel_error(analytic, numeric).max() < tol


def test_patch_reduce_backward_adjoint(backend, rng):
    spec = PatchSpec(3, 3, 2)
    x = rng.standard_normal((5, 6, 3))
    m = rng.random((30, 9)) * im2col(x, spec).valid
    g = rng.standard_normal((30, 3))
    gx, gm = patch_reduce_backward(g, x, m, spec)
    y = patch_reduce(x, m, spec)
    # y is bilinear in (x, m): <g, y> = <gx, x> = <gm, m>
    assert abs(np.sum(g * y) - np.sum(gx * x)) < 1e-12
    assert abs(np.sum(g * y) - np.sum(gm * m)) < 1e-12


def test_masked_col2im_adjoint(backend, rng):
    spec = PatchSpec(3, 3, 2)
    x = rng.standard_normal((5, 6, 3))
    m = rng.random((30, 9)) * im2col(x, spec).valid
    g = rng.standard_normal((30, 27))
    gx, gm = masked_col2im(g, x, m, spec)
    y = masked_im2col(x, m, spec)
    assert abs(np.sum(g * y) - np.sum(gx * x)) < 1e-12
    assert abs(np.sum(g * y) - np.sum(gm * m)) < 1e-12


def test_backends_agree(rng):
    from segaware import backend as be

    if "cython" not in be.available():
        pytest.skip("extension not built")
    P, C = be.get("python"), be.get("cython")
    x = rng.standard_normal((16, 16, 8))
    m = rng.random((256, 25))
    for args in [(5, 5, 1), (3, 3, 9), (5, 5, 2)]:
        np.testing.assert_array_equal(P.im2col(x, *args), C.im2col(x, *args))
        np.testing.assert_array_equal(P.masked_im2col(x, m[:, :args[0] * args[1]].copy(), *args),
                                      C.masked_im2col(x, m[:, :args[0] * args[1]].copy(), *args))
        mk = m[:, :args[0] * args[1]].copy()
        g = rng.standard_normal((256, args[0] * args[1] * 8))
        for a, b in zip(P.masked_col2im(g, x, mk, *args), C.masked_col2im(g, x, mk, *args)):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
        for code in (0, 1, 2):
            np.testing.assert_array_equal(P.im2dist(x, *args, code), C.im2dist(x, *args, code))
