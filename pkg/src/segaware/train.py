"""Two-stage SGD training with momentum.

Stage 1 fits the embedding net to the pairwise embedding loss; stage 2 fits
the task net, fine-tuning the embeddings through the masks when enabled.
The data order of every epoch comes from its own (seed, stage, epoch)
stream, so a run resumed from a checkpoint replays exactly.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from segaware.metrics import IOUAccumulator, epe, pair_scores, pooled_mask_auc
from segaware.patches import PatchSpec

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 10
    embed_lr: float = 0.002
    embed_epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    lambda_init: float = 1.0
    val_scenes: int = 10

    def __post_init__(self):
        if self.lr < 0 or self.embed_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0 or self.embed_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_init < 0:
            raise ValueError("lambda_init must be >= 0")


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, epoch, state):
        super().__init__(f"non-finite loss in stage {stage}, epoch {epoch + 1}")
        self.stage, self.epoch, self.state = stage, epoch, state


@dataclass
class TrainState:
    stage: int = 1
    epoch: int = 0  # epochs completed within ``stage``
    velocity: dict = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)

    def copy(self):
        return TrainState(self.stage, self.epoch, {k: v.copy() for k, v in self.velocity.items()},
                          [dict(r) for r in self.history])


def epoch_order(seed, stage, epoch, n):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 100 + stage, epoch])))
    return rng.permutation(n)


AUC_SPEC = PatchSpec(3, 3, 2)


def validate(net, stage, scenes):
    """(metric name, value) on held-out scenes."""
    if not scenes:
        return None, float("nan")
    if stage == 1:
        return "mask_auc", pooled_mask_auc(
            pair_scores(net.embeddings(s.image), s.labels, AUC_SPEC) for s in scenes)
    if net.task.cfg.task == "flow":
        return "epe", float(np.mean([epe(net.predict(s.image), s.flow) for s in scenes]))
    acc = IOUAccumulator(net.task.cfg.num_classes)
    for s in scenes:
        acc.add(net.predict(s.image), s.labels)
    return "miou", acc.value()


def sgd_step(params, grads, velocity, names, lr, momentum, weight_decay):
    for n in names:
        g = grads[n]
        if weight_decay and n.endswith(".w"):
            g = g + weight_decay * params[n]
        v = velocity.get(n)
        v = -lr * g if v is None else momentum * v - lr * g
        velocity[n] = v
        params[n] += v
        if n.endswith(".lam") or ".crf." in n:
            np.maximum(params[n], 0.0, out=params[n])


def run_epoch(net, stage, epoch, scenes, cfg, state):
    names = net.stage_params(stage)
    lr = cfg.embed_lr if stage == 1 else cfg.lr
    order = epoch_order(cfg.seed, stage, epoch, len(scenes))
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        acc = None
        for i in batch:
            loss, G = net.loss_and_grads(scenes[i], stage)
            if not np.isfinite(loss):
                return float("nan")
            total += loss
            if acc is None:
                acc = {n: G[n].copy() for n in names}
            else:
                for n in names:
                    acc[n] += G[n]
        for n in names:
            acc[n] /= len(batch)
        sgd_step(net.params, acc, state.velocity, names, lr, cfg.momentum, cfg.weight_decay)
    return total / max(len(scenes), 1)


def stages_for(net):
    out = []
    if net.embed is not None:
        out.append(1)
    if net.task is not None:
        out.append(2)
    return out


def train(net, scenes, val, cfg, state=None, on_epoch=None):
    """Train in place from ``state`` (fresh when None); returns the final state.

    ``on_epoch(state)`` runs after every completed epoch, e.g. to checkpoint.
    Raises TrainingDiverged carrying the last good state on a non-finite loss.
    """
    if not scenes and (cfg.epochs or cfg.embed_epochs):
        raise ValueError("training needs at least one scene")
    state = state or TrainState(stage=stages_for(net)[0] if stages_for(net) else 2)
    val = val[:cfg.val_scenes]
    for stage in stages_for(net):
        if stage < state.stage:
            continue
        if stage > state.stage:
            state.stage, state.epoch, state.velocity = stage, 0, {}
        epochs = cfg.embed_epochs if stage == 1 else cfg.epochs
        while state.epoch < epochs:
            good = state.copy()
            good_params = {k: v.copy() for k, v in net.params.items()}
            loss = run_epoch(net, stage, state.epoch, scenes, cfg, state)
            if not np.isfinite(loss):
                net.params.update(good_params)
                raise TrainingDiverged(stage, state.epoch, good)
            name, value = validate(net, stage, val)
            state.epoch += 1
            state.history.append({"stage": stage, "epoch": state.epoch, "loss": loss,
                                  "metric": name or "", "value": value})
            log.info("stage %d epoch %d loss %.6f %s %.4f", stage, state.epoch, loss, name, value)
            if on_epoch is not None:
                on_epoch(state)
    return state
