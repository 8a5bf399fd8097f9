"""Checkpoints: a directory of TNSR files plus a JSON manifest."""

import json
import os

import numpy as np

from segaware.tensor import read_tnsr, write_tnsr
from segaware.train import TrainState

SCHEMA_VERSION = 1


class ArchitectureMismatch(ValueError):
    pass


def save(path, net, state=None, config=None):
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    os.makedirs(os.path.join(path, "momentum"), exist_ok=True)
    layers = {}
    for name in sorted(net.params):
        fname = f"params/{name}.tnsr"
        write_tnsr(os.path.join(path, fname), net.params[name])
        layers[name] = {"file": fname, "shape": list(net.params[name].shape), "kind": net.kinds[name]}
    velocity = {}
    if state is not None:
        for name in sorted(state.velocity):
            fname = f"momentum/{name}.tnsr"
            write_tnsr(os.path.join(path, fname), state.velocity[name])
            velocity[name] = fname
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "layers": layers,
        "momentum": velocity,
        "state": None if state is None else {"stage": state.stage, "epoch": state.epoch,
                                             "history": state.history},
        "config": config,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_manifest(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema {manifest.get('schema_version')}")
    return manifest


def check_architecture(net, manifest):
    layers = manifest["layers"]
    diffs = []
    for name in sorted(set(layers) | set(net.params)):
        if name not in net.params:
            diffs.append(f"{name}: only in checkpoint")
        elif name not in layers:
            diffs.append(f"{name}: missing from checkpoint")
        elif tuple(layers[name]["shape"]) != net.params[name].shape or layers[name]["kind"] != net.kinds[name]:
            diffs.append(f"{name}: checkpoint {layers[name]['kind']} {layers[name]['shape']}, "
                         f"config {net.kinds[name]} {list(net.params[name].shape)}")
    if diffs:
        raise ArchitectureMismatch("checkpoint does not match the configured network:\n  " + "\n  ".join(diffs))


def load(path, net, subset=None):
    """Load parameters into ``net``; returns the saved TrainState (or None).

    With ``subset`` (a name prefix such as "embed.") only matching layers
    are required and loaded.
    """
    manifest = read_manifest(path)
    if subset is None:
        check_architecture(net, manifest)
    names = [n for n in net.params if subset is None or n.startswith(subset)]
    for name in names:
        entry = manifest["layers"].get(name)
        if entry is None:
            raise ArchitectureMismatch(f"{name}: missing from checkpoint")
        value = read_tnsr(os.path.join(path, entry["file"]))
        if value.shape != net.params[name].shape:
            raise ArchitectureMismatch(f"{name}: shape {value.shape} vs {net.params[name].shape}")
        net.params[name] = np.ascontiguousarray(value)
    st = manifest["state"]
    if st is None or subset is not None:
        return None
    velocity = {n: read_tnsr(os.path.join(path, f)) for n, f in manifest["momentum"].items()}
    return TrainState(st["stage"], st["epoch"], velocity, st["history"])
