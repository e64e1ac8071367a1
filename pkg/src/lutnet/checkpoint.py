"""Checkpoint persistence: a self-describing JSON text format with explicit
field names.  Floats go through repr (shortest round-trip decimal), so
load(save(x)) reproduces every tensor bit-for-bit; serialisation is
key-sorted and therefore byte-deterministic for a given checkpoint."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError
from .model import (BatchNormLayer, ConvLayer, DenseLayer, FixedPointSpec,
                    LutChannel, LutData, MaxPoolLayer, Network, SoftmaxLayer)
from .training import TrainLog

SCHEMA_VERSION = 1


@dataclass
class Checkpoint:
    net: Network
    logs: list = field(default_factory=list)   # TrainLog per completed phase


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def _levels_out(levels):
    if levels is None:
        return None
    return [{"w": w.tolist(), "gamma": g} for w, g in levels]


def _lut_out(lut):
    if lut is None:
        return None
    return {
        "k": lut.k,
        "gammas": lut.gammas.tolist(),
        "channels": [{
            "node_positions": ch.node_positions.tolist(),
            "indices": ch.indices.tolist(),
            "reconnected": ch.reconnected.astype(int).tolist(),
            "coeffs": ch.coeffs.tolist(),
            "masks": None if ch.masks is None else ch.masks.tolist(),
        } for ch in lut.channels],
    }


def _compute_out(layer):
    d = {
        "unrolled": layer.unrolled,
        "weights": _arr(layer.weights),
        "alpha": layer.alpha,
        "prune_mask": None if layer.prune_mask is None else layer.prune_mask.astype(int).tolist(),
        "phase1_weights": _arr(layer.phase1_weights),
        "levels": _levels_out(layer.levels),
        "lut": _lut_out(layer.lut),
        "tau": _arr(layer.tau),
        "flip": None if layer.flip is None else layer.flip.astype(int).tolist(),
    }
    if layer.kind == "dense":
        d.update(kind="dense", in_features=layer.in_features, out_features=layer.out_features)
    else:
        d.update(kind="conv", in_channels=layer.in_channels, out_channels=layer.out_channels,
                 kernel=layer.kernel, stride=layer.stride)
    return d


def _layer_out(layer):
    if layer.kind in ("dense", "conv"):
        return _compute_out(layer)
    if layer.kind == "batchnorm":
        return {"kind": "batchnorm", "num_features": layer.num_features,
                "gamma": _arr(layer.gamma), "beta": _arr(layer.beta),
                "running_mean": _arr(layer.running_mean), "running_var": _arr(layer.running_var),
                "eps": layer.eps, "momentum": layer.momentum}
    if layer.kind == "maxpool":
        return {"kind": "maxpool", "size": layer.size}
    return {"kind": "softmax"}


def to_dict(ckpt: Checkpoint) -> dict:
    net = ckpt.net
    return {
        "schema_version": SCHEMA_VERSION,
        "name": net.name,
        "stage": net.stage,
        "b_levels": net.b_levels,
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "fx": None if net.fx is None else {"frac_bits": net.fx.frac_bits},
        "layers": [_layer_out(l) for l in net.layers],
        "logs": [{"phase": lg.phase, "rows": [list(r) for r in lg.rows]} for lg in ckpt.logs],
    }


def _np(a, dtype=np.float64):
    return None if a is None else np.asarray(a, dtype=dtype)


def _levels_in(raw):
    if raw is None:
        return None
    return [(np.asarray(l["w"], dtype=np.float64), float(l["gamma"])) for l in raw]


def _lut_in(raw):
    if raw is None:
        return None
    k = int(raw["k"])
    n_planes = len(raw["gammas"])
    channels = []
    for ch in raw["channels"]:
        n = len(ch["node_positions"])
        channels.append(LutChannel(
            node_positions=np.asarray(ch["node_positions"], dtype=np.int64),
            indices=np.asarray(ch["indices"], dtype=np.int64).reshape(n, k),
            reconnected=np.asarray(ch["reconnected"], dtype=bool).reshape(n, k),
            coeffs=np.asarray(ch["coeffs"], dtype=np.float64).reshape(n_planes, n, 1 << k),
            masks=None if ch["masks"] is None else
            np.asarray(ch["masks"], dtype=np.int8).reshape(n_planes, n, 1 << k),
        ))
    return LutData(k=k, gammas=np.asarray(raw["gammas"], dtype=np.float64),
                   channels=channels)


def _layer_in(raw: dict):
    kind = raw.get("kind")
    if kind == "dense" or kind == "conv":
        if kind == "dense":
            layer = DenseLayer(int(raw["in_features"]), int(raw["out_features"]))
        else:
            layer = ConvLayer(int(raw["in_channels"]), int(raw["out_channels"]),
                              int(raw["kernel"]), int(raw["stride"]))
        layer.unrolled = bool(raw["unrolled"])
        layer.weights = _np(raw["weights"])
        layer.alpha = float(raw["alpha"])
        layer.prune_mask = _np(raw["prune_mask"], bool)
        layer.phase1_weights = _np(raw["phase1_weights"])
        layer.levels = _levels_in(raw["levels"])
        layer.lut = _lut_in(raw["lut"])
        layer.tau = _np(raw["tau"])
        layer.flip = _np(raw["flip"], bool)
        return layer
    if kind == "batchnorm":
        layer = BatchNormLayer(int(raw["num_features"]))
        layer.gamma = _np(raw["gamma"])
        layer.beta = _np(raw["beta"])
        layer.running_mean = _np(raw["running_mean"])
        layer.running_var = _np(raw["running_var"])
        layer.eps = float(raw["eps"])
        layer.momentum = float(raw["momentum"])
        return layer
    if kind == "maxpool":
        return MaxPoolLayer(int(raw["size"]))
    if kind == "softmax":
        return SoftmaxLayer()
    raise SchemaError(f"unknown layer kind {kind!r}")


def from_dict(raw: dict) -> Checkpoint:
    if not isinstance(raw, dict) or "schema_version" not in raw:
        raise SchemaError("not a checkpoint: missing schema_version")
    version = raw["schema_version"]
    if version > SCHEMA_VERSION:
        raise SchemaError(f"checkpoint schema {version} is newer than supported "
                          f"{SCHEMA_VERSION}; refusing to load")
    layers = [_layer_in(l) for l in raw["layers"]]
    if not layers:
        raise SchemaError("checkpoint has an empty layer list")
    net = Network(
        name=raw["name"], layers=layers, b_levels=int(raw["b_levels"]),
        input_shape=tuple(raw["input_shape"]), seed=int(raw["seed"]),
        stage=raw["stage"],
        fx=None if raw.get("fx") is None else FixedPointSpec(int(raw["fx"]["frac_bits"])))
    logs = []
    for lg in raw.get("logs", []):
        log = TrainLog(phase=int(lg["phase"]))
        for row in lg["rows"]:
            log.append(*row)
        logs.append(log)
    return Checkpoint(net=net, logs=logs)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    text = json.dumps(to_dict(ckpt), sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="ascii") as f:
        f.write(text)
        f.write("\n")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "r", encoding="ascii") as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: corrupt checkpoint at line {e.lineno} col {e.colno}: "
                          f"{e.msg}") from e
    return from_dict(raw)
