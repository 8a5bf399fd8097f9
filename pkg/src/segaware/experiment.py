"""Experiment configuration, network construction and evaluation."""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Tuple

import numpy as np

from segaware import config as cfgmod
from segaware.metrics import IOUAccumulator, epe, pair_scores, pooled_mask_auc, trimap
from segaware.net import CRFConfig, EmbedNetConfig, Network, TaskNetConfig
from segaware.patches import PatchSpec
from segaware.synth import DatasetConfig
from segaware.train import TrainConfig

REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalConfig:
    halfwidths: List[int] = field(default_factory=lambda: [1, 2, 3, 5, 10, 20, 40])
    auc_kernel: int = 3
    auc_atrous: int = 2
    max_scenes: int = 0  # 0 = all test scenes

    def __post_init__(self):
        if not self.halfwidths or min(self.halfwidths) < 1:
            raise ValueError("halfwidths must be a non-empty list of integers >= 1")
        PatchSpec(self.auc_kernel, self.auc_kernel, self.auc_atrous)

    @property
    def auc_spec(self):
        return PatchSpec(self.auc_kernel, self.auc_kernel, self.auc_atrous)


@dataclass
class BenchConfig:
    # (H, W, E, F, kernel size)
    points: List[Tuple[int, int, int, int, int]] = field(default_factory=lambda: [(8, 8, 4, 4, 3), (128, 128, 16, 16, 3)])
    embedding_dim: int = 16
    repeats: int = 5
    naive: bool = True

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class GradCheckConfig:
    size: int = 8
    width: int = 4
    per_kind: int = 8
    h: float = 1e-5
    tolerance: float = 1e-5

    def __post_init__(self):
        if self.size < 4 or self.size % 4:
            raise ValueError("grad_check.size must be a multiple of 4")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    embed_net: EmbedNetConfig = field(default_factory=EmbedNetConfig)
    task_net: TaskNetConfig = field(default_factory=TaskNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    grad_check: GradCheckConfig = field(default_factory=GradCheckConfig)


def load_config(path=None, seed=None):
    """Parse a JSON experiment config; ``seed`` overrides dataset and train seeds."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise cfgmod.ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = cfgmod.from_dict(ExperimentConfig, data)
    if seed is not None:
        cfg.dataset = replace(cfg.dataset, seed=int(seed))
        cfg.train = replace(cfg.train, seed=int(seed))
    if cfg.task_net.task == "segmentation" and cfg.task_net.num_classes != cfg.dataset.num_classes:
        raise cfgmod.ConfigError("task_net.num_classes must equal dataset.num_classes")
    return cfg


def write_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(cfgmod.dumps(cfg) + "\n")


def build_network(cfg):
    return Network(cfg.embed_net, cfg.task_net).init(cfg.train.seed, cfg.train.lambda_init)


def threads():
    """Worker cap from SEGAWARE_THREADS (default: all cores)."""
    raw = os.environ.get("SEGAWARE_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise cfgmod.ConfigError(f"SEGAWARE_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise cfgmod.ConfigError("SEGAWARE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Order-preserving map over at most ``threads()`` workers."""
    n = threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def evaluate_predictions(preds, scenes, task, halfwidths, num_classes):
    """Overall and per-trimap scores; mIOU for segmentation, aEPE for flow."""
    if task == "segmentation":
        overall = IOUAccumulator(num_classes)
        bands = {h: IOUAccumulator(num_classes) for h in halfwidths}
        for p, s in zip(preds, scenes):
            overall.add(p, s.labels)
            for h in halfwidths:
                bands[h].add(p, s.labels, trimap(s.labels, h))
        return overall.value(), {h: bands[h].value() for h in halfwidths}
    errs = [epe(p, s.flow) for p, s in zip(preds, scenes)]
    band = {}
    for h in halfwidths:
        num = den = 0.0
        for p, s in zip(preds, scenes):
            m = trimap(s.labels, h)
            num += np.sqrt(((p - s.flow) ** 2).sum(-1))[m].sum()
            den += m.sum()
        band[h] = float(num / den) if den else float("nan")
    return float(np.mean(errs)) if errs else float("nan"), band


def _predict_timed(net):
    def run(scene):
        t = time.perf_counter()
        p = net.predict(scene.image)
        return p, time.perf_counter() - t
    return run


def evaluate(net, scenes, cfg):
    """report.json payload for ``net`` on ``scenes``."""
    tcfg = net.task.cfg
    out = parallel_map(_predict_timed(net), scenes)
    preds = [p for p, _ in out]
    overall, bands = evaluate_predictions(preds, scenes, tcfg.task, cfg.eval.halfwidths, tcfg.num_classes)
    spec = cfg.eval.auc_spec
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "task": tcfg.task,
        "metric": "miou" if tcfg.task == "segmentation" else "aepe",
        "overall": overall,
        "trimap": [{"halfwidth": h, "value": bands[h]} for h in cfg.eval.halfwidths],
        "num_scenes": len(scenes),
        "seconds_per_image": float(np.mean([t for _, t in out])) if out else float("nan"),
        "color_mask_auc": pooled_mask_auc(pair_scores(s.image, s.labels, spec) for s in scenes) if scenes else float("nan"),
        "mask_auc": None,
        "segaware": tcfg.segaware,
        "post": tcfg.post,
    }
    if net.embed is not None and scenes:
        report["mask_auc"] = pooled_mask_auc(
            pair_scores(net.embeddings(s.image), s.labels, spec) for s in scenes)
    return report


def miniature(cfg):
    """Small copy of the configured architecture for gradient audits."""
    g = cfg.grad_check
    w = g.width
    embed = replace(cfg.embed_net, channels=(w,) * 7, dim=max(2, min(cfg.embed_net.dim, 3)))
    n = len(cfg.task_net.channels)
    crf = replace(cfg.task_net.crf, bilateral_kernel=3, bilateral_atrous=2, spatial_kernel=3, spatial_atrous=1)
    task = replace(cfg.task_net, channels=(w,) * n, atrous=tuple(min(a, 2) for a in cfg.task_net.atrous),
                   bilateral_kernel=3, bilateral_atrous=1, crf=crf)
    data = replace(cfg.dataset, height=g.size, width=g.size, min_size=2, max_size=max(2, g.size // 2),
                   min_area=2, min_shapes=min(cfg.dataset.min_shapes, 2), max_shapes=min(cfg.dataset.max_shapes, 2))
    return embed, task, data


def transplant(net, task_cfg, seed, lambda_init=1.0):
    """Fresh network for ``task_cfg`` that inherits every parameter of ``net``
    matching by name and shape (embeddings, shared conv layers)."""
    embed_cfg = net.embed.cfg if net.embed is not None else None
    out = Network(embed_cfg, task_cfg).init(seed, lambda_init)
    for name, value in net.params.items():
        if name in out.params and out.params[name].shape == value.shape:
            out.params[name] = value.copy()
    return out


def with_crf(net, crf_cfg):
    """Copy of a trained segmentation net with a CRF head sharing its weights."""
    if net.embed is None:
        raise ValueError("the CRF needs an embedding network")
    task = replace(net.task.cfg, post="crf", crf=crf_cfg)
    out = Network(net.embed.cfg, task)
    out.params = dict(net.params)
    out.params["task.crf.w1"] = np.array([crf_cfg.w1])
    out.params["task.crf.w2"] = np.array([crf_cfg.w2])
    out.kinds = dict(net.kinds, **{"task.crf.w1": "crf", "task.crf.w2": "crf"})
    return out


def crf_grid(base=None, w1=(0.5, 1.0, 2.0, 4.0), w2=(0.0, 1.0), theta_alpha=(4.0, 12.0),
             theta_beta=(0.5, 1.0, 2.0), bilateral_atrous=(3, 9)):
    base = base or CRFConfig()
    return [replace(base, w1=a, w2=b, theta_alpha=ta, theta_beta=tb, bilateral_atrous=ba)
            for a in w1 for b in w2 for ta in theta_alpha for tb in theta_beta for ba in bilateral_atrous]


def crf_cross_validate(net, scenes, grid, halfwidth=5, allow_plain=True):
    """Pick the CRF setting with the best boundary-band mIOU on ``scenes``.

    Returns (best CRFConfig, score table). The first table row is the plain
    net (config None); with ``allow_plain`` it can win, so best may be None.
    """
    n = net.task.cfg.num_classes
    embs = [net.embeddings(s.image) for s in scenes]
    logits = [net.task.forward(net.params, s.image, None)[0] if not net.task.cfg.needs_embeddings
              else net.task.forward(net.params, s.image, e)[0] for s, e in zip(scenes, embs)]

    def score(preds):
        acc = IOUAccumulator(n)
        for p, s in zip(preds, scenes):
            acc.add(p, s.labels, trimap(s.labels, halfwidth))
        return acc.value()

    from segaware.crf import crf_inference
    from segaware.layers import log_softmax
    table = [(None, score([l.argmax(-1) for l in logits]))]
    for c in grid:
        params = c.params(c.w1, c.w2)
        preds = [crf_inference(-log_softmax(l), e, params).argmax(-1) for l, e in zip(logits, embs)]
        table.append((c, score(preds)))
    best = max(table if allow_plain else table[1:], key=lambda t: t[1])
    return best[0], table
