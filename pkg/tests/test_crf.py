import math

import numpy as np
import pytest

from segaware import reference
from segaware.crf import (CRFParams, ContractError, crf_backward, crf_forward, crf_inference,
                          gibbs_energy, meanfield_step, pairwise_kernel, softmax)
from segaware.gradcheck import rel_error
from segaware.patches import PatchSpec


def small_params(**kw):
    base = dict(bilateral_spec=PatchSpec(3, 3, 2), spatial_spec=PatchSpec(3, 3, 1),
                theta_alpha=2.0, theta_beta=1.0, theta_gamma=1.5, w1=0.8, w2=0.6)
    base.update(kw)
    return CRFParams(**base)


def test_kernel_self_term_and_constant_embeddings(rng):
    p = CRFParams()
    app, smooth = pairwise_kernel(rng.standard_normal((5, 5, 3)), p, zero_self=False)
    assert np.all(app.masks[:, p.bilateral_spec.center] == 1.0)
    assert np.all(smooth.masks[:, p.spatial_spec.center] == 1.0)
    app, smooth = pairwise_kernel(rng.standard_normal((5, 5, 3)), p)
    assert np.all(app.masks[:, p.bilateral_spec.center] == 0.0)

    q = small_params()
    app, _ = pairwise_kernel(np.full((6, 6, 2), 0.4), q)
    off = q.bilateral_spec.offsets()
    gauss = np.exp(-(off ** 2).sum(1) / (2 * q.theta_alpha ** 2))
    gauss[q.bilateral_spec.center] = 0.0
    np.testing.assert_allclose(app.masks[app.valid], np.broadcast_to(gauss, app.masks.shape)[app.valid],
                               rtol=0, atol=1e-15)


def test_kernel_vanishes_for_tiny_theta_beta(rng):
    p = small_params(theta_beta=1e-3)
    app, _ = pairwise_kernel(rng.standard_normal((5, 5, 3)), p)
    assert app.masks.max() < 1e-300


def test_uniform_unary_and_q_fixed_point():
    p = small_params()
    Q = np.full((4, 5, 3), 1 / 3)
    kern = pairwise_kernel(np.random.default_rng(0).standard_normal((4, 5, 2)), p)
    Qn = meanfield_step(Q, np.zeros((4, 5, 3)), kern, p)
    np.testing.assert_allclose(Qn, Q, atol=1e-15)


def test_zero_weights_give_softmax(rng):
    p = small_params(w1=0.0, w2=0.0, iterations=3)
    U = rng.standard_normal((4, 4, 3))
    emb = rng.standard_normal((4, 4, 2))
    Q0 = softmax(rng.standard_normal((4, 4, 3)))
    np.testing.assert_array_equal(meanfield_step(Q0, U, pairwise_kernel(emb, p), p), softmax(-U))
    np.testing.assert_array_equal(crf_inference(U, emb, p), softmax(-U))


def test_hand_computed_two_pixel_step():
    p = CRFParams(w1=1.0, w2=0.5, theta_alpha=1.0, theta_beta=1.0, theta_gamma=1.0,
                  bilateral_spec=PatchSpec(3, 3), spatial_spec=PatchSpec(3, 3))
    emb = np.array([[[0.0]], [[1.0]]])  # 2x1 image
    Q = np.array([[[0.7, 0.3]], [[0.2, 0.8]]])
    U = np.array([[[0.1, 0.5]], [[0.3, 0.2]]])
    k = math.exp(-0.5 - 0.5) + 0.5 * math.exp(-0.5)
    expected = []
    for me, other in ((0, 1), (1, 0)):
        msg = [k * Q[other, 0, 0], k * Q[other, 0, 1]]
        z = [-U[me, 0, 0] - msg[1], -U[me, 0, 1] - msg[0]]  # Potts: penalty from the other label
        s = math.exp(z[0]) + math.exp(z[1])
        expected.append([math.exp(z[0]) / s, math.exp(z[1]) / s])
    Qn = meanfield_step(Q, U, pairwise_kernel(emb, p), p)
    np.testing.assert_allclose(Qn[:, 0, :], expected, rtol=0, atol=1e-15)


def test_invalid_marginals_rejected(rng):
    p = small_params()
    kern = pairwise_kernel(rng.standard_normal((3, 3, 2)), p)
    with pytest.raises(ContractError):
        meanfield_step(np.full((3, 3, 2), 0.6), np.zeros((3, 3, 2)), kern, p)


def test_iterations_zero_and_peaked_unary(rng):
    U = rng.standard_normal((5, 5, 3))
    emb = np.zeros((5, 5, 2))
    np.testing.assert_array_equal(crf_inference(U, emb, small_params(iterations=0)), softmax(-U))
    for seed in range(10):
        r = np.random.default_rng(seed)
        labels = r.integers(0, 3, size=(6, 6))
        peaked = np.full((6, 6, 3), 20.0)
        np.put_along_axis(peaked, labels[..., None], 0.0, axis=2)
        Q = crf_inference(peaked, emb[:1, :1].repeat(6, 0).repeat(6, 1), CRFParams())
        np.testing.assert_array_equal(Q.argmax(-1), labels)


def test_marginals_stay_valid_and_permutation_equivariant(rng):
    p = small_params(iterations=4, compat=np.array([[0, 1, 2], [1, 0, 1.5], [2, 1.5, 0]]))
    U = rng.standard_normal((6, 5, 3)) * 2
    emb = rng.standard_normal((6, 5, 2))
    Q, saved = crf_forward(U, emb, p)
    for q in saved.Qs:
        assert np.all(q >= 0) and np.all(np.abs(q.sum(-1) - 1) <= 1e-9)
    perm = np.array([2, 0, 1])
    pp = small_params(iterations=4, compat=p.compat[np.ix_(perm, perm)])
    Qp = crf_inference(U[..., perm], emb, pp)
    np.testing.assert_allclose(Qp, Q[..., perm], atol=1e-14)
    np.testing.assert_array_equal(crf_inference(U, emb, p), Q)


def test_gibbs_energy_trivial_cases():
    p = small_params()
    emb = np.random.default_rng(0).standard_normal((4, 4, 2))
    kern = pairwise_kernel(emb, p)
    assert gibbs_energy(np.zeros((4, 4), int), np.zeros((4, 4, 3)), kern, p) == 0.0
    U1 = np.array([[[0.3, 1.7]]])
    assert gibbs_energy(np.array([[1]]), U1, pairwise_kernel(np.zeros((1, 1, 2)), p), p) == 1.7


@pytest.mark.parametrize("bspec,sspec", [(PatchSpec(3, 3, 2), PatchSpec(3, 3, 1)),
                                         (PatchSpec(5, 5, 1), PatchSpec(3, 3, 2)),
                                         (PatchSpec(13, 13, 9), PatchSpec(5, 5, 1))])
def test_gibbs_energy_matches_brute_force(rng, bspec, sspec):
    p = small_params(bilateral_spec=bspec, spatial_spec=sspec)
    for H, W in ((4, 4), (6, 5)):
        labels = rng.integers(0, 3, size=(H, W))
        U = rng.standard_normal((H, W, 3))
        emb = rng.standard_normal((H, W, 2))
        e = gibbs_energy(labels, U, pairwise_kernel(emb, p), p)
        ref = reference.gibbs_energy(labels, U, emb, p.compat_matrix(3), p.w1, p.w2, p.theta_alpha,
                                     p.theta_beta, p.theta_gamma, bspec, sspec)
        assert abs(e - ref) < 1e-12


def test_backward_iterations_zero_is_softmax_jacobian(rng):
    U = rng.standard_normal((3, 4, 2))
    G = rng.standard_normal((3, 4, 2))
    _, saved = crf_forward(U, rng.standard_normal((3, 4, 2)), small_params(iterations=0))
    g = crf_backward(G, saved)
    q = softmax(-U)
    expected = -(q * (G - (G * q).sum(-1, keepdims=True)))
    np.testing.assert_allclose(g.grad_unary, expected, atol=1e-15)
    assert np.all(g.grad_emb == 0)


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


def test_backward_finite_differences(backend, rng):
    U = rng.standard_normal((4, 4, 2))
    emb = rng.standard_normal((4, 4, 3))
    G = rng.standard_normal((4, 4, 2))
    w = np.array([0.8, 0.6])

    def loss():
        p = small_params(w1=w[0], w2=w[1], iterations=2)
        return float(np.sum(G * crf_inference(U, emb, p)))

    _, saved = crf_forward(U, emb, small_params(w1=w[0], w2=w[1], iterations=2))
    g = crf_backward(G, saved)
    assert rel_error(g.grad_unary, _fd(loss, U)).max() < 1e-6
    assert rel_error(g.grad_emb, _fd(loss, emb)).max() < 1e-5
    assert rel_error([g.grad_w1, g.grad_w2], _fd(loss, w)).max() < 1e-6
