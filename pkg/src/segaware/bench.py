"""Wall-clock comparison of the naive oracle, a direct compiled loop and the
im2col/im2dist + GEMM path, on both kernel backends."""

import statistics
import time

import numpy as np

from segaware import backend, patches, reference
from segaware.masks import ConvFilter, conv, make_masks, segaware_conv
from segaware.patches import PatchSpec


def median_time(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times), out


def interleaved_times(fns, repeats):
    """Median time of each callable, alternating them within every round after
    one warm-up call each, so load drift hits all of them alike."""
    outs = [fn() for fn in fns]
    times = [[] for _ in fns]
    for _ in range(repeats):
        for i, fn in enumerate(fns):
            t = time.perf_counter()
            fn()
            times[i].append(time.perf_counter() - t)
    return [statistics.median(t) for t in times], outs


def _with_backend(name, fn):
    saved = patches.kernels
    patches.kernels = backend.get(name)
    try:
        return fn()
    finally:
        patches.kernels = saved


def bench_point(H, W, E, F, k, repeats=5, dim=16, naive=True, seed=0):
    """One row of timings (seconds) for a (H, W, E, F, k x k) point.

    Segmentation-aware timings include building the masks from embeddings.
    """
    rng = np.random.default_rng(seed)
    spec = PatchSpec(k, k, 1)
    x = rng.standard_normal((H, W, E))
    emb = rng.standard_normal((H, W, dim))
    filt = ConvFilter(rng.standard_normal((spec.K * E, F)) / np.sqrt(spec.K * E), spec)

    def gemm_path():
        return segaware_conv(x, make_masks(emb, spec, 1.0), filt, exact=False)

    row = {"H": H, "W": W, "E": E, "F": F, "K": spec.K}
    results = {}
    for name in backend.available():
        (row[f"segaware_gemm_{name}"], row[f"conv_gemm_{name}"]), (results[name], _) = interleaved_times(
            [lambda: _with_backend(name, gemm_path), lambda: _with_backend(name, lambda: conv(x, filt, exact=False))],
            repeats)
    if "cython" in backend.available():
        direct = backend.get("cython").segaware_conv_direct
        row["segaware_direct_cython"], _ = median_time(
            lambda: direct(x, make_masks(emb, spec, 1.0).masks, filt.weights, k, k, 1), repeats)
    best = backend.NAME
    row["segaware_gemm"] = row[f"segaware_gemm_{best}"]
    row["conv_gemm"] = row[f"conv_gemm_{best}"]
    row["overhead_vs_conv"] = row["segaware_gemm"] / row["conv_gemm"]
    if naive:
        row["segaware_naive"], ref = median_time(
            lambda: reference.segaware_conv(x, make_masks(emb, spec, 1.0).masks, filt.weights, k, k, 1), repeats)
        row["speedup_vs_naive"] = row["segaware_naive"] / row["segaware_gemm"]
        row["max_abs_diff_vs_naive"] = float(np.max(np.abs(ref - results[best])))
    if "segaware_direct_cython" in row:
        row["speedup_vs_direct"] = row["segaware_direct_cython"] / row["segaware_gemm"]
    return row


def run(points, repeats=5, dim=16, naive=True):
    return [bench_point(*p, repeats=repeats, dim=dim, naive=naive) for p in points]
