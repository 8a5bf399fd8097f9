"""Multi-scale embedding network, switchable task network and their gradients.

Parameters live in one flat ``{name: ndarray}`` dict so the optimizer,
checkpoints and the gradient audit can treat every layer the same way.
Scalars (mask hardness, CRF weights) are stored as shape-(1,) arrays.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from segaware import layers as ly
from segaware.crf import CRFParams
from segaware.embedding_loss import LossConfig, embedding_loss
from segaware.gradcheck import central_difference, is_kinked, rel_error
from segaware.masks import ConfigurationError
from segaware.patches import PatchSpec
from segaware.tensor import fan_in_bound, init_uniform

SEGAWARE_MODES = ("none", "last_layer", "all_layers")
POST_MODES = ("none", "bilateral", "crf")
TASKS = ("segmentation", "flow")


@dataclass
class EmbedNetConfig:
    channels: Tuple[int, ...] = (16, 16, 32, 32, 32, 32, 32)
    dim: int = 16
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if len(self.channels) != 7 or min(self.channels) < 1:
            raise ValueError("embedding net needs 7 positive conv widths")
        if self.dim < 2:
            raise ValueError("embedding dimension must be >= 2")


@dataclass
class CRFConfig:
    w1: float = 1.0
    w2: float = 1.0
    theta_alpha: float = 4.0
    theta_beta: float = 1.0
    theta_gamma: float = 1.5
    bilateral_kernel: int = 13
    bilateral_atrous: int = 9
    spatial_kernel: int = 5
    spatial_atrous: int = 1
    iterations: int = 2

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("CRF needs at least one iteration")
        self.params(self.w1, self.w2)

    def params(self, w1, w2):
        return CRFParams(w1=float(w1), w2=float(w2), theta_alpha=self.theta_alpha,
                         theta_beta=self.theta_beta, theta_gamma=self.theta_gamma,
                         bilateral_spec=PatchSpec(self.bilateral_kernel, self.bilateral_kernel,
                                                  self.bilateral_atrous),
                         spatial_spec=PatchSpec(self.spatial_kernel, self.spatial_kernel,
                                                self.spatial_atrous),
                         iterations=self.iterations)


@dataclass
class TaskNetConfig:
    task: str = "segmentation"
    num_classes: int = 6
    channels: Tuple[int, ...] = (16, 16, 16, 16)
    atrous: Tuple[int, ...] = (1, 2, 4, 8)
    kernel: int = 3
    segaware: str = "none"
    post: str = "none"
    bilateral_repeats: int = 1
    bilateral_kernel: int = 5
    bilateral_atrous: int = 1
    mask_norm: str = "l1"
    activation: str = "relu"
    finetune_embeddings: bool = True
    embed_loss_weight: float = 0.0
    crf: CRFConfig = field(default_factory=CRFConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.segaware not in SEGAWARE_MODES:
            raise ValueError(f"segaware must be one of {SEGAWARE_MODES}")
        if self.post not in POST_MODES:
            raise ValueError(f"post must be one of {POST_MODES}")
        if len(self.channels) != len(self.atrous) or not self.channels:
            raise ValueError("channels and atrous must be non-empty and equally long")
        if self.post == "crf" and self.task != "segmentation":
            raise ValueError("the CRF head only applies to segmentation")
        if self.bilateral_repeats < 1:
            raise ValueError("bilateral_repeats must be >= 1")
        if self.activation not in ("relu", "linear"):
            raise ValueError("activation must be relu or linear")
        if self.embed_loss_weight < 0:
            raise ValueError("embed_loss_weight must be >= 0")
        PatchSpec(self.kernel, self.kernel, 1)

    @property
    def outputs(self):
        return self.num_classes if self.task == "segmentation" else 2

    @property
    def needs_embeddings(self):
        return self.segaware != "none" or self.post != "none"

    def segaware_layers(self):
        n = len(self.channels)
        if self.segaware == "all_layers":
            return set(range(n))
        if self.segaware == "last_layer":
            return {n - 1}
        return set()


def _conv_init(rng, k, cin, cout, gain=1.0):
    return init_uniform((k * cin, cout), rng, gain * fan_in_bound(k * cin)), np.zeros(cout)


class EmbeddingNet:
    """Seven 3x3 convs with 2x2 pooling after the 2nd and 4th, one embedding
    head per scale, and a 1x1 fusion of the upsampled heads."""

    prefix = "embed"
    spec = PatchSpec(3, 3, 1)
    one = PatchSpec(1, 1, 1)

    def __init__(self, cfg):
        self.cfg = cfg

    def init_params(self, rng):
        P, kinds = {}, {}
        cin = 3
        for i, c in enumerate(self.cfg.channels, 1):
            P[f"embed.conv{i}.w"], P[f"embed.conv{i}.b"] = _conv_init(rng, 9, cin, c)
            kinds[f"embed.conv{i}.w"] = kinds[f"embed.conv{i}.b"] = "conv"
            cin = c
        D = self.cfg.dim
        for s, src in enumerate((2, 4, 7), 1):
            P[f"embed.head{s}.w"], P[f"embed.head{s}.b"] = _conv_init(rng, 1, self.cfg.channels[src - 1], D)
            kinds[f"embed.head{s}.w"] = kinds[f"embed.head{s}.b"] = "conv"
        P["embed.fuse.w"], P["embed.fuse.b"] = _conv_init(rng, 1, 3 * D, D)
        kinds["embed.fuse.w"] = kinds["embed.fuse.b"] = "fuse1x1"
        return P, kinds

    def forward(self, P, image):
        H, W, _ = image.shape
        if H % 4 or W % 4:
            raise ConfigurationError(f"embedding net needs extents divisible by 4, got {image.shape}")
        cache = {}
        h = image
        heads = []
        for i in range(1, 8):
            if i in (3, 5):
                h, cache[f"pool{i}"] = ly.maxpool2_forward(h)
            h, cache[f"conv{i}"] = ly.conv_forward(h, P[f"embed.conv{i}.w"], P[f"embed.conv{i}.b"], self.spec)
            h, cache[f"relu{i}"] = ly.relu_forward(h)
            if i in (2, 4, 7):
                s = len(heads) + 1
                e, cache[f"head{s}"] = ly.conv_forward(h, P[f"embed.head{s}.w"], P[f"embed.head{s}.b"], self.one)
                heads.append(e)
        ups = [heads[0], ly.upsample_forward(heads[1], 2)[0], ly.upsample_forward(heads[2], 4)[0]]
        cat = np.concatenate(ups, axis=2)
        emb, cache["fuse"] = ly.conv_forward(cat, P["embed.fuse.w"], P["embed.fuse.b"], self.one)
        return emb, heads, cache

    def backward(self, P, cache, g_emb, g_heads=None):
        G = {}
        D = self.cfg.dim
        g_cat, G["embed.fuse.w"], G["embed.fuse.b"] = ly.conv_backward(g_emb, cache["fuse"])
        g_h = [g_cat[..., :D], ly.upsample_backward(g_cat[..., D:2 * D], 2),
               ly.upsample_backward(g_cat[..., 2 * D:], 4)]
        if g_heads is not None:
            g_h = [a + b for a, b in zip(g_h, g_heads)]
        g = None
        for i in range(7, 0, -1):
            if i in (2, 4, 7):
                s = {2: 1, 4: 2, 7: 3}[i]
                gx, G[f"embed.head{s}.w"], G[f"embed.head{s}.b"] = ly.conv_backward(g_h[s - 1], cache[f"head{s}"])
                g = gx if g is None else g + gx
            g = ly.relu_backward(g, cache[f"relu{i}"])
            g, G[f"embed.conv{i}.w"], G[f"embed.conv{i}.b"] = ly.conv_backward(g, cache[f"conv{i}"])
            if i in (3, 5):
                g = ly.maxpool2_backward(g, cache[f"pool{i}"])
        return G

    def head_losses(self, emb, heads, labels):
        """Per-head losses (each divided by its pixel count) and their gradients."""
        outs = []
        for e, step in ((heads[0], 1), (heads[1], 2), (heads[2], 4), (emb, 1)):
            lab = labels[::step, ::step]
            loss, g = embedding_loss(e, lab, self.cfg.loss)
            n = lab.size
            outs.append((loss / n, g / n))
        return outs

    def loss(self, P, image, labels):
        emb, heads, cache = self.forward(P, image)
        parts = self.head_losses(emb, heads, labels)
        G = self.backward(P, cache, parts[3][1], [p[1] for p in parts[:3]])
        return sum(p[0] for p in parts), G


class TaskNet:
    """Dilated conv/ReLU stack, 1x1 output head and optional post-processing."""

    one = PatchSpec(1, 1, 1)

    def __init__(self, cfg):
        self.cfg = cfg
        self.specs = [PatchSpec(cfg.kernel, cfg.kernel, a) for a in cfg.atrous]
        self.segaware = cfg.segaware_layers()
        self.post_spec = PatchSpec(cfg.bilateral_kernel, cfg.bilateral_kernel, cfg.bilateral_atrous)

    def init_params(self, rng, lambda_init=1.0):
        P, kinds = {}, {}
        cin = 3
        for i, (c, spec) in enumerate(zip(self.cfg.channels, self.specs)):
            name = f"task.conv{i + 1}"
            # mask-sum normalization divides by up to K; scale so outputs start at conv magnitude
            gain = spec.K if i in self.segaware else 1.0
            P[name + ".w"], P[name + ".b"] = _conv_init(rng, spec.K, cin, c, gain)
            kind = "segaware_conv" if i in self.segaware else "conv"
            kinds[name + ".w"] = kinds[name + ".b"] = kind
            if i in self.segaware:
                P[name + ".lam"] = np.array([float(lambda_init)])
                kinds[name + ".lam"] = kind
            cin = c
        P["task.head.w"], P["task.head.b"] = _conv_init(rng, 1, cin, self.cfg.outputs)
        kinds["task.head.w"] = kinds["task.head.b"] = "conv"
        if self.cfg.post == "bilateral":
            P["task.bilateral.lam"] = np.array([float(lambda_init)])
            kinds["task.bilateral.lam"] = "bilateral"
        elif self.cfg.post == "crf":
            P["task.crf.w1"] = np.array([self.cfg.crf.w1])
            P["task.crf.w2"] = np.array([self.cfg.crf.w2])
            kinds["task.crf.w1"] = kinds["task.crf.w2"] = "crf"
        return P, kinds

    def forward(self, P, image, emb=None):
        """Returns (output, cache); output is logits, CRF marginals or flow."""
        if self.cfg.needs_embeddings and emb is None:
            raise ConfigurationError("this task net configuration needs embeddings")
        cache = {}
        h = image
        for i, spec in enumerate(self.specs):
            name = f"task.conv{i + 1}"
            if i in self.segaware:
                h, cache[f"conv{i}"] = ly.segaware_forward(h, emb, P[name + ".w"], P[name + ".b"],
                                                          P[name + ".lam"][0], spec, self.cfg.mask_norm)
            else:
                h, cache[f"conv{i}"] = ly.conv_forward(h, P[name + ".w"], P[name + ".b"], spec)
            if self.cfg.activation == "relu":
                h, cache[f"relu{i}"] = ly.relu_forward(h)
        out, cache["head"] = ly.conv_forward(h, P["task.head.w"], P["task.head.b"], self.one)
        if self.cfg.post == "bilateral":
            out, cache["post"] = ly.bilateral_forward(out, emb, P["task.bilateral.lam"][0], self.post_spec,
                                                      self.cfg.bilateral_repeats, self.cfg.mask_norm)
        elif self.cfg.post == "crf":
            params = self.cfg.crf.params(P["task.crf.w1"][0], P["task.crf.w2"][0])
            out, cache["post"] = ly.crf_layer_forward(out, emb, params)
        return out, cache

    def backward(self, P, cache, g, need_emb=True):
        """Returns (param grads, grad wrt embeddings or None)."""
        G = {}
        g_emb = None

        def add_emb(ge):
            nonlocal g_emb
            if ge is not None:
                g_emb = ge if g_emb is None else g_emb + ge

        if self.cfg.post == "bilateral":
            g, glam, ge = ly.bilateral_backward(g, cache["post"], need_emb)
            G["task.bilateral.lam"] = np.array([glam])
            add_emb(ge)
        elif self.cfg.post == "crf":
            g, ge, gw1, gw2 = ly.crf_layer_backward(g, cache["post"])
            G["task.crf.w1"], G["task.crf.w2"] = np.array([gw1]), np.array([gw2])
            add_emb(ge if need_emb else None)
        g, G["task.head.w"], G["task.head.b"] = ly.conv_backward(g, cache["head"])
        for i in range(len(self.specs) - 1, -1, -1):
            name = f"task.conv{i + 1}"
            if self.cfg.activation == "relu":
                g = ly.relu_backward(g, cache[f"relu{i}"])
            if i in self.segaware:
                g, G[name + ".w"], G[name + ".b"], glam, ge = ly.segaware_backward(
                    g, cache[f"conv{i}"], need_emb)
                G[name + ".lam"] = np.array([glam])
                add_emb(ge)
            else:
                g, G[name + ".w"], G[name + ".b"] = ly.conv_backward(g, cache[f"conv{i}"])
        return G, g_emb

    def loss(self, out, target):
        """(loss, grad_out); target is a label map or a flow field."""
        if self.cfg.task == "flow":
            return ly.l2_regression(out, target)
        if self.cfg.post == "crf":
            return ly.marginal_xent(out, target)
        return ly.softmax_xent(out, target)

    def decode(self, out):
        return out.argmax(axis=-1) if self.cfg.task == "segmentation" else out


class Network:
    """Embedding net and/or task net over one shared parameter dict."""

    def __init__(self, embed_cfg=None, task_cfg=None):
        if task_cfg is not None and task_cfg.needs_embeddings and embed_cfg is None:
            raise ConfigurationError("segmentation-aware layers need an embedding network")
        self.embed = EmbeddingNet(embed_cfg) if embed_cfg is not None else None
        self.task = TaskNet(task_cfg) if task_cfg is not None else None
        self.params = {}
        self.kinds = {}

    def init(self, seed, lambda_init=1.0):
        if self.embed is not None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
            P, k = self.embed.init_params(rng)
            self.params.update(P)
            self.kinds.update(k)
        if self.task is not None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
            P, k = self.task.init_params(rng, lambda_init)
            self.params.update(P)
            self.kinds.update(k)
        return self

    def stage_params(self, stage):
        """Names updated in a stage: 1 trains the embeddings, 2 the task net
        (plus the embeddings when fine-tuning is on)."""
        if stage == 1:
            return [n for n in self.params if n.startswith("embed.")]
        names = [n for n in self.params if n.startswith("task.")]
        if self.task.cfg.needs_embeddings and self.task.cfg.finetune_embeddings:
            names += [n for n in self.params if n.startswith("embed.")]
        return names

    def embeddings(self, image):
        return self.embed.forward(self.params, image)[0]

    def loss_and_grads(self, scene, stage):
        P = self.params
        if stage == 1:
            return self.embed.loss(P, scene.image, scene.labels)
        cfg = self.task.cfg
        emb = heads = ecache = None
        if cfg.needs_embeddings:
            emb, heads, ecache = self.embed.forward(P, scene.image)
        out, cache = self.task.forward(P, scene.image, emb)
        target = scene.flow if cfg.task == "flow" else scene.labels
        loss, g = self.task.loss(out, target)
        finetune = cfg.needs_embeddings and cfg.finetune_embeddings
        G, g_emb = self.task.backward(P, cache, g, need_emb=finetune)
        if finetune:
            g_heads = None
            if cfg.embed_loss_weight > 0:
                parts = self.embed.head_losses(emb, heads, scene.labels)
                w = cfg.embed_loss_weight
                loss += w * sum(p[0] for p in parts)
                g_emb = g_emb + w * parts[3][1]
                g_heads = [w * p[1] for p in parts[:3]]
            G.update(self.embed.backward(P, ecache, g_emb, g_heads))
        return loss, G

    def predict(self, image):
        """Decoded task output (labels or flow) for one image."""
        emb = self.embeddings(image) if self.task.cfg.needs_embeddings else None
        out, _ = self.task.forward(self.params, image, emb)
        return self.task.decode(out)

    def forward_output(self, image):
        emb = self.embeddings(image) if self.task.cfg.needs_embeddings else None
        return self.task.forward(self.params, image, emb)[0]


def numeric_grad_audit(loss_fn, params, grads, kinds, rng, per_kind=8, h=1e-5, kink_tol=1e-6, names=None):
    """Compare analytic ``grads`` with central differences of ``loss_fn()``.

    ``loss_fn`` reads ``params`` in place. Up to ``per_kind`` randomly chosen
    entries are checked for every layer kind; entries flagged by
    :func:`segaware.gradcheck.is_kinked` straddle a kink and are skipped.
    Returns {kind: {"max_rel_error": e, "checked": n, "skipped": m}}.
    """
    names = list(names or grads)
    by_kind = {}
    for n in names:
        by_kind.setdefault(kinds[n], []).append(n)
    report = {}
    for kind in sorted(by_kind):
        entries = [(n, i) for n in by_kind[kind] for i in range(params[n].size)]
        pick = rng.choice(len(entries), size=min(per_kind, len(entries)), replace=False)
        worst, checked, skipped = 0.0, 0, 0
        for j in sorted(pick):
            n, i = entries[j]
            flat = params[n].reshape(-1)
            num, kink = central_difference(loss_fn, flat, i, h)
            if is_kinked(num, kink, kink_tol):
                skipped += 1
                continue
            worst = max(worst, float(rel_error(grads[n].reshape(-1)[i], num)))
            checked += 1
        report[kind] = {"max_rel_error": worst, "checked": checked, "skipped": skipped}
    return report
