"""Synthetic dense-prediction scenes: textured shapes on a textured background.

Every foreground class has a fixed palette color and a fixed 2-D flow
vector, and a scene draws its shape classes without replacement, so each
class appears at most once and the label map doubles as an instance map.
Pixel values are quantized to multiples of 1/255, which makes the on-disk
PPM copy an exact round trip.
"""

import json
import os
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy import ndimage

from segaware import config as cfgmod
from segaware.imageio import read_pgm, read_ppm, write_pgm, write_ppm
from segaware.tensor import read_tnsr, write_tnsr

PALETTE = np.array([
    [110, 110, 110],  # background
    [220, 50, 50],
    [50, 190, 60],
    [50, 80, 220],
    [220, 200, 50],
    [190, 60, 190],
    [60, 200, 200],
    [240, 150, 90],
]) / 255.0

SPLITS = ("train", "test")


@dataclass
class DatasetConfig:
    height: int = 64
    width: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    kinds: Tuple[str, ...] = ("rectangle", "disk")
    num_classes: int = 6  # including background
    noise_sigma: float = 0.05
    texture_amplitude: float = 0.25
    min_size: int = 10
    max_size: int = 30
    min_area: int = 16
    flow_magnitude: float = 2.0
    num_train: int = 200
    num_test: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValueError("scenes must be at least 4x4")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if not 2 <= self.num_classes <= len(PALETTE):
            raise ValueError(f"num_classes must be in [2, {len(PALETTE)}]")
        if self.max_shapes > self.num_classes - 1:
            raise ValueError("max_shapes exceeds the number of foreground classes")
        if not self.kinds or any(k not in ("rectangle", "disk") for k in self.kinds):
            raise ValueError("kinds must be a non-empty subset of rectangle, disk")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("need 1 <= min_size <= max_size")
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise ValueError("noise and texture amplitudes must be >= 0")
        if self.num_train < 0 or self.num_test < 0:
            raise ValueError("scene counts must be >= 0")


class SyntheticScene(NamedTuple):
    image: np.ndarray  # H x W x 3 in [0, 1]
    labels: np.ndarray  # H x W int64
    flow: Optional[np.ndarray]  # H x W x 2


def flow_table(cfg):
    """Per-class flow vectors; background is still, the others sit on a circle."""
    n = cfg.num_classes - 1
    ang = 2 * np.pi * np.arange(n) / max(n, 1)
    vec = cfg.flow_magnitude * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return np.vstack([np.zeros((1, 2)), vec])


def _shape_mask(kind, cfg, rng, yy, xx):
    H, W = cfg.height, cfg.width
    cy, cx = rng.integers(0, H), rng.integers(0, W)
    if kind == "rectangle":
        h, w = rng.integers(cfg.min_size, cfg.max_size + 1, size=2)
        y0, x0 = cy - h // 2, cx - w // 2
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    r = rng.uniform(cfg.min_size / 2, cfg.max_size / 2)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _layout_ok(labels, classes, min_area):
    for c in classes:
        region = labels == c
        if region.sum() < min_area:
            return False
        if ndimage.label(region)[1] != 1:  # 4-connected components
            return False
    return True


def _layout(cfg, rng):
    H, W = cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(10000):
        n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        classes = rng.choice(np.arange(1, cfg.num_classes), size=n, replace=False)
        labels = np.zeros((H, W), dtype=np.int64)
        for c in classes:  # painted back to front
            kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
            labels[_shape_mask(kind, cfg, rng, yy, xx)] = c
        if _layout_ok(labels, classes, cfg.min_area):
            return labels, classes
    raise RuntimeError("could not place shapes; relax min_area or sizes")


def generate_scene(cfg, rng):
    labels, classes = _layout(cfg, rng)
    H, W = labels.shape
    yy, xx = np.mgrid[0:H, 0:W]
    image = np.empty((H, W, 3))
    for c in [0, *classes]:
        region = labels == c
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.08, 0.25)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        image[region] = PALETTE[c] + cfg.texture_amplitude * wave[region][:, None]
    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    flow = flow_table(cfg)[labels]
    return SyntheticScene(image, labels, flow)


def scene_rng(seed, split, index):
    """Independent stream per (seed, split, scene) so scenes can be made in any order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, SPLITS.index(split), index])))


def generate_split(cfg, split):
    count = cfg.num_train if split == "train" else cfg.num_test
    return [generate_scene(cfg, scene_rng(cfg.seed, split, i)) for i in range(count)]


def _paths(root, split, i):
    base = os.path.join(root, split, f"scene_{i:05d}")
    return base + ".ppm", base + "_labels.pgm", base + "_flow.tnsr"


def write_dataset(cfg, out_dir):
    manifest = {"schema_version": 1, "config": cfgmod.to_dict(cfg)}
    for split in SPLITS:
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        scenes = generate_split(cfg, split)
        for i, s in enumerate(scenes):
            ppm, pgm, tnsr = _paths(out_dir, split, i)
            write_ppm(ppm, s.image)
            write_pgm(pgm, s.labels)
            write_tnsr(tnsr, s.flow)
        manifest[f"num_{split}"] = len(scenes)
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_manifest(data_dir):
    with open(os.path.join(data_dir, "dataset.json")) as fh:
        return json.load(fh)


def load_split(data_dir, split, limit=None):
    manifest = read_manifest(data_dir)
    n = manifest[f"num_{split}"] if limit is None else min(limit, manifest[f"num_{split}"])
    scenes = []
    for i in range(n):
        ppm, pgm, tnsr = _paths(data_dir, split, i)
        flow = read_tnsr(tnsr) if os.path.exists(tnsr) else None
        scenes.append(SyntheticScene(read_ppm(ppm), read_pgm(pgm), flow))
    return scenes


def dataset_config(data_dir):
    return cfgmod.from_dict(DatasetConfig, read_manifest(data_dir)["config"])
