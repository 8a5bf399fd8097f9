import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from segaware.metrics import IOUAccumulator, auc, boundary_mask, epe, mask_auc, mean_iou, trimap
from segaware.patches import PatchSpec
from segaware.synth import DatasetConfig, generate_scene, scene_rng


def brute_trimap(labels, h):
    H, W = labels.shape
    b = boundary_mask(labels)
    pts = np.argwhere(b)
    out = np.zeros_like(b)
    for y in range(H):
        for x in range(W):
            out[y, x] = len(pts) > 0 and np.abs(pts - [y, x]).max(axis=1).min() <= h
    return out


def test_trimap_examples():
    assert not trimap(np.zeros((8, 8), int), 2).any()
    lab = np.zeros((10, 12), int)
    lab[3:5, 4:6] = 1
    assert trimap(lab, 12).all()
    split = np.zeros((6, 20), int)
    split[:, 10:] = 1
    band = trimap(split, 3)
    # boundary columns 9 and 10, plus 3 on each side
    np.testing.assert_array_equal(np.where(band[0])[0], np.arange(6, 14))
    assert band.all(axis=0).sum() == 8
    with pytest.raises(ValueError):
        trimap(split, 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.int64, (7, 9), elements=st.integers(0, 2)), st.integers(1, 4), st.integers(1, 4))
def test_trimap_brute_force_and_nested(lab, h1, h2):
    np.testing.assert_array_equal(trimap(lab, h1), brute_trimap(lab, h1))
    lo, hi = sorted((h1, h2))
    assert np.all(trimap(lab, lo) <= trimap(lab, hi))


def test_mean_iou_examples():
    gt = np.array([[0, 0, 1, 1]] * 4)
    assert mean_iou(gt, gt) == 1.0
    assert mean_iou(np.ones((3, 3), int), np.zeros((3, 3), int)) == 0.0
    pred = np.array([[0, 1, 1, 1]] * 4)
    # class 0: 4 / 8, class 1: 8 / 12
    assert abs(mean_iou(pred, gt) - (0.5 + 2 / 3) / 2) < 1e-15


def test_mean_iou_restricted(rng):
    pred = rng.integers(0, 3, size=(6, 6))
    gt = rng.integers(0, 3, size=(6, 6))
    restrict = rng.uniform(size=(6, 6)) < 0.5
    p, g = pred[restrict], gt[restrict]
    hand = np.mean([((p == c) & (g == c)).sum() / ((p == c) | (g == c)).sum() for c in np.unique(g)])
    assert abs(mean_iou(pred, gt, restrict) - hand) < 1e-15


def test_mean_iou_hand_case_075():
    gt = np.array([[0, 0, 0, 0],
                   [0, 0, 0, 0],
                   [1, 1, 1, 1],
                   [1, 1, 1, 1]])
    pred = np.array([[0, 0, 0, 0],
                     [0, 0, 0, 0],
                     [1, 1, 1, 1],
                     [1, 1, 1, 1]])
    pred_half = pred.copy()
    pred_half[0:2, 2:4] = 2  # class 0 keeps 4 of 8; class 2 is absent from gt
    # class 0: 4 / 8 = 0.5, class 1: 8 / 8 = 1.0
    assert mean_iou(pred_half, gt) == 0.75


@settings(max_examples=30, deadline=None)
@given(arrays(np.int64, (5, 6), elements=st.integers(0, 3)), arrays(np.int64, (5, 6), elements=st.integers(0, 3)))
def test_mean_iou_bounds(a, b):
    v = mean_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert mean_iou(a, a) == 1.0


def test_iou_symmetric_when_class_sets_match():
    a = np.array([[0, 1], [1, 0]])
    b = np.array([[0, 0], [1, 1]])
    assert mean_iou(a, b) == mean_iou(b, a)


def test_accumulator_pools_counts():
    acc = IOUAccumulator(2)
    acc.add(np.zeros((2, 2), int), np.zeros((2, 2), int))
    acc.add(np.array([[0, 1]]), np.array([[1, 1]]))
    # class 0: inter 4 union 5 ; class 1: inter 1 union 2
    assert abs(acc.value() - (0.8 + 0.5) / 2) < 1e-15
    assert np.isnan(IOUAccumulator(2).value())


def test_epe(rng):
    f = rng.standard_normal((5, 6, 2))
    assert epe(f, f) == 0.0
    assert epe(f + [3.0, 4.0], f) == pytest.approx(5.0, abs=1e-14)
    g = rng.standard_normal((5, 6, 2))
    loop = sum(((f[y, x, 0] - g[y, x, 0]) ** 2 + (f[y, x, 1] - g[y, x, 1]) ** 2) ** 0.5
               for y in range(5) for x in range(6)) / 30
    assert abs(epe(f, g) - loop) < 1e-14


def test_auc_basics():
    assert auc([1, 2, 3, 4], [False, False, True, True]) == 1.0
    assert auc([1, 2, 3, 4], [True, True, False, False]) == 0.0
    assert auc([1, 1], [True, False]) == 0.5
    assert np.isnan(auc([1, 2], [True, True]))


def test_mask_auc_cases(rng):
    cfg = DatasetConfig(noise_sigma=0.0, texture_amplitude=0.0)
    s = generate_scene(cfg, scene_rng(2, "test", 0))
    spec = PatchSpec(3, 3, 2)
    onehot = np.eye(cfg.num_classes)[s.labels] * 10.0
    assert mask_auc(onehot, s.labels, spec) == 1.0
    assert mask_auc(s.image, s.labels, spec) > 0.9
    assert np.isnan(mask_auc(rng.standard_normal((8, 8, 2)), np.zeros((8, 8), int), spec))
    vals = [mask_auc(rng.standard_normal((32, 32, 4)), generate_scene(DatasetConfig(height=32, width=32, min_size=6, max_size=16),
                                                                    scene_rng(0, "test", i)).labels, spec)
            for i in range(5)]
    assert abs(np.mean(vals) - 0.5) < 0.05
