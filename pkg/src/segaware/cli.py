"""segaware command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numeric failure
(non-finite loss or failed gradient check), 4 I/O error.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from segaware import bench, checkpoint
from segaware import config as cfgmod
from segaware.experiment import (build_network, evaluate, load_config, miniature, parallel_map,
                                 write_config)
from segaware.imageio import ImageFormatError, write_ppm
from segaware.masks import ConfigurationError
from segaware.metrics import mask_auc
from segaware.net import Network, numeric_grad_audit
from segaware.synth import PALETTE, generate_scene, load_split, scene_rng, write_dataset
from segaware.train import TrainingDiverged, TrainState, stages_for, train

log = logging.getLogger("segaware")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class NumericFailure(RuntimeError):
    pass


def render_table(rows, columns=None):
    """Plain-text table; floats in compact general format."""
    if not rows:
        return "(empty)"
    columns = columns or list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    body = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join([line, "  ".join("-" * w for w in widths), *body])


def _require(value, flag):
    if value is None:
        raise cfgmod.ConfigError(f"{flag} is required for this command")
    return value


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def cmd_gen_data(cfg, args):
    out = _require(args.out, "--out")
    os.makedirs(out, exist_ok=True)
    manifest = write_dataset(cfg.dataset, out)
    print(f"wrote {manifest['num_train']} train and {manifest['num_test']} test scenes to {out}")


def _write_metrics(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "loss", "metric", "value"])
        for r in history:
            w.writerow([r["stage"], r["epoch"], repr(r["loss"]), r["metric"], repr(r["value"])])


def cmd_train(cfg, args):
    data, out = _require(args.data, "--data"), _require(args.out, "--out")
    os.makedirs(out, exist_ok=True)
    write_config(cfg, os.path.join(out, "config.json"))
    scenes = load_split(data, "train")
    val = load_split(data, "test", limit=cfg.train.val_scenes)
    net = build_network(cfg)
    state = None
    if args.checkpoint:
        state = checkpoint.load(args.checkpoint, net)
    resolved = cfgmod.to_dict(cfg)
    ck_dir = os.path.join(out, "checkpoint")

    def on_epoch(st):
        checkpoint.save(ck_dir, net, st, resolved)
        if st.stage == 1 and st.epoch == cfg.train.embed_epochs:
            checkpoint.save(os.path.join(out, "stage1"), net, st, resolved)
        _write_metrics(os.path.join(out, "metrics.csv"), st.history)

    if state is None:
        state = TrainState(stage=(stages_for(net) or [2])[0])
        checkpoint.save(ck_dir, net, state, resolved)
    _write_metrics(os.path.join(out, "metrics.csv"), state.history)
    try:
        state = train(net, scenes, val, cfg.train, state, on_epoch)
    except TrainingDiverged as exc:
        checkpoint.save(ck_dir, net, exc.state, resolved)
        raise NumericFailure(f"{exc}; last good epoch saved to {ck_dir}") from exc
    checkpoint.save(ck_dir, net, state, resolved)
    if state.history:
        print(render_table(state.history))
    print(f"checkpoint: {ck_dir}")


def _load_trained(cfg, ck):
    net = build_network(cfg)
    checkpoint.load(ck, net)
    return net


def cmd_eval(cfg, args):
    data, ck = _require(args.data, "--data"), _require(args.checkpoint, "--checkpoint")
    out = args.out or ck
    net = _load_trained(cfg, ck)
    limit = cfg.eval.max_scenes or None
    scenes = load_split(data, "test", limit=limit)
    report = evaluate(net, scenes, cfg)
    report["config"] = cfgmod.to_dict(cfg)
    os.makedirs(out, exist_ok=True)
    _json_dump(report, os.path.join(out, "report.json"))
    print(f"{report['metric']}: {report['overall']:.4f}")
    print(render_table(report["trimap"], ["halfwidth", "value"]))
    print(f"report: {os.path.join(out, 'report.json')}")


def grad_check(cfg):
    embed, task, data = miniature(cfg)
    g = cfg.grad_check
    scene = generate_scene(data, scene_rng(cfg.train.seed, "train", 0))
    rows = []
    net = Network(embed, task).init(cfg.train.seed, max(cfg.train.lambda_init, 0.5))
    for stage in ([1, 2] if task.needs_embeddings else [2]):
        _, G = net.loss_and_grads(scene, stage)
        names = net.stage_params(stage)
        rng = np.random.default_rng([cfg.train.seed, stage])
        report = numeric_grad_audit(lambda: net.loss_and_grads(scene, stage)[0], net.params, G, net.kinds,
                                    rng, per_kind=g.per_kind, h=g.h, names=names)
        for kind, r in report.items():
            ok = r["checked"] > 0 and r["max_rel_error"] < g.tolerance
            rows.append({"stage": stage, "kind": kind, **r, "pass": ok})
    return rows


def cmd_grad_check(cfg, args):
    rows = grad_check(cfg)
    print(render_table(rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _json_dump({"schema_version": 1, "tolerance": cfg.grad_check.tolerance, "layers": rows},
                   os.path.join(args.out, "grad_check.json"))
    failed = [r for r in rows if not r["pass"]]
    if failed:
        raise NumericFailure("gradient check failed for: " + ", ".join(f"{r['kind']} (stage {r['stage']})" for r in failed))


def cmd_bench(cfg, args):
    b = cfg.bench
    rows = bench.run(b.points, b.repeats, b.embedding_dim, b.naive)
    cols = list(dict.fromkeys(k for r in rows for k in r))
    print(render_table(rows, cols))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, cols)
            w.writeheader()
            w.writerows(rows)


def pca_rgb(emb):
    """Top-3 principal components of per-pixel vectors, min-max scaled to [0, 1]."""
    H, W, D = emb.shape
    X = emb.reshape(-1, D) - emb.reshape(-1, D).mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    proj = X @ vt[:3].T
    if proj.shape[1] < 3:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 3 - proj.shape[1]))])
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 1e-12, (proj - lo) / np.where(span > 1e-12, span, 1.0), 0.5)
    return scaled.reshape(H, W, 3)


def reference_masks(feat, pixels, lam=None):
    """exp(-lam * ||f_p - f_j||_1) over the whole image for each reference pixel p.

    ``lam`` defaults to 1 / median distance so different features are comparable.
    """
    H, W, D = feat.shape
    flat = feat.reshape(-1, D)
    dists = [np.abs(flat - feat[y, x]).sum(axis=1).reshape(H, W) for y, x in pixels]
    if lam is None:
        med = float(np.median(np.concatenate([d.ravel() for d in dists])))
        lam = 1.0 / med if med > 0 else 1.0
    return [np.exp(-lam * d) for d in dists], lam


def cmd_visualize(cfg, args):
    ck, out = _require(args.checkpoint, "--checkpoint"), _require(args.out, "--out")
    os.makedirs(out, exist_ok=True)
    net = build_network(cfg)
    checkpoint.load(ck, net)
    if args.data:
        scene = load_split(args.data, args.split, limit=args.scene + 1)[args.scene]
    else:
        scene = generate_scene(cfg.dataset, scene_rng(cfg.dataset.seed, args.split, args.scene))
    H, W, _ = scene.image.shape
    write_ppm(os.path.join(out, "input.ppm"), scene.image)
    emb = net.embeddings(scene.image)
    write_ppm(os.path.join(out, "embedding_pca.ppm"), pca_rgb(emb))
    rng = np.random.default_rng([cfg.train.seed, 7])
    pixels = [(int(rng.integers(H)), int(rng.integers(W))) for _ in range(4)]
    emasks, elam = reference_masks(emb, pixels)
    cmasks, clam = reference_masks(scene.image, pixels)
    for i, (em, cm) in enumerate(zip(emasks, cmasks)):
        write_ppm(os.path.join(out, f"mask_{i}.ppm"), np.repeat(em[..., None], 3, axis=2))
        write_ppm(os.path.join(out, f"color_mask_{i}.ppm"), np.repeat(cm[..., None], 3, axis=2))
    side = {"schema_version": 1, "reference_pixels": pixels, "embedding_lambda": elam, "color_lambda": clam,
            "embedding_mask_auc": mask_auc(emb, scene.labels, cfg.eval.auc_spec),
            "color_mask_auc": mask_auc(scene.image, scene.labels, cfg.eval.auc_spec)}
    if net.task is not None:
        pred = net.predict(scene.image)
        if net.task.cfg.task == "segmentation":
            img = PALETTE[np.clip(pred, 0, len(PALETTE) - 1)]
        else:
            m = cfg.dataset.flow_magnitude or 1.0
            img = np.concatenate([np.clip(0.5 + pred / (2 * m), 0, 1), np.full((H, W, 1), 0.5)], axis=2)
        write_ppm(os.path.join(out, "prediction.ppm"), img)
    _json_dump(side, os.path.join(out, "visualize.json"))
    print(json.dumps(side, indent=2))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "bench": cmd_bench,
    "visualize": cmd_visualize,
}


def parser():
    p = argparse.ArgumentParser(prog="segaware", description="Segmentation-aware convolution toolkit")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint directory (resume for train, weights for eval)")
    p.add_argument("--seed", type=int, help="overrides dataset.seed and train.seed")
    p.add_argument("--scene", type=int, default=0, help="visualize: scene index")
    p.add_argument("--split", default="test", choices=["train", "test"], help="visualize: split")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be a non-negative integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](cfg, args)
    except (cfgmod.ConfigError, ConfigurationError, checkpoint.ArchitectureMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ImageFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
