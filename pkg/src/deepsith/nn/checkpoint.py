"""Checkpoints: a single ``.npz`` holding named parameter arrays plus a JSON header.

Layout (format version 1):

* ``__meta__`` -- 0-d unicode array containing JSON with keys
  ``format`` ("deepsith-checkpoint"), ``version`` (1), ``readout_mode``,
  ``dtype``, ``layers`` (list of ``{tau_min, tau_max, n_taus, k, dt,
  truncation_mass, hidden, n_in, batch_norm, dropout_rate, conv,
  bn_momentum, bn_eps}``), ``n_out`` and ``config`` (free-form echo of the
  experiment config, may be null).
* one array per entry of ``DeepSITHNet.parameters()`` and ``buffers()``,
  under the same dotted names, e.g. ``layers.0.dense.weights``.

Filter banks are rebuilt from their spec on load; construction is
deterministic, so a loaded net reproduces the saved one bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..filterbank import FilterSpec, build_kernels, geometric_taus
from .layers import BatchNorm, DeepSITHLayer, DenseLayer
from .network import DeepSITHNet

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT", "VERSION"]

FORMAT = "deepsith-checkpoint"
VERSION = 1


def save_checkpoint(net: DeepSITHNet, path: str | Path, config: dict | None = None) -> None:
    layers = []
    for layer in net.layers:
        spec = layer.bank.spec
        layers.append(
            {
                "tau_min": spec.grid.tau_min,
                "tau_max": spec.grid.tau_max,
                "n_taus": spec.grid.count,
                "k": spec.k,
                "dt": spec.dt,
                "truncation_mass": spec.truncation_mass,
                "hidden": layer.n_out,
                "n_in": layer.n_in,
                "batch_norm": layer.batch_norm is not None,
                "bn_momentum": layer.batch_norm.momentum if layer.batch_norm else None,
                "bn_eps": layer.batch_norm.eps if layer.batch_norm else None,
                "dropout_rate": layer.dropout_rate,
                "conv": layer.conv,
            }
        )
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "readout_mode": net.readout_mode,
        "dtype": np.dtype(net.dtype).name,
        "n_out": net.n_out,
        "layers": layers,
        "config": config,
    }
    arrays = {**net.parameters(), **net.buffers()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[DeepSITHNet, dict | None]:
    """Return ``(net, config_echo)``."""
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise ValueError(f"{path} is not a DeepSITH checkpoint")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path} is not a DeepSITH checkpoint")
        if meta.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {name: data[name] for name in data.files if name != "__meta__"}
    dtype = np.dtype(meta["dtype"])
    layers = []
    for i, lm in enumerate(meta["layers"]):
        grid = geometric_taus(lm["tau_min"], lm["tau_max"], lm["n_taus"])
        bank = build_kernels(FilterSpec(grid, lm["k"], lm["dt"], lm["truncation_mass"]))
        prefix = f"layers.{i}."
        dense = DenseLayer(arrays[prefix + "dense.weights"].astype(dtype), arrays[prefix + "dense.bias"].astype(dtype))
        bn = None
        if lm["batch_norm"]:
            bn = BatchNorm(
                arrays[prefix + "bn.gamma"].astype(dtype),
                arrays[prefix + "bn.beta"].astype(dtype),
                arrays[prefix + "bn.running_mean"].astype(dtype),
                arrays[prefix + "bn.running_var"].astype(dtype),
                lm["bn_momentum"],
                lm["bn_eps"],
            )
        layers.append(DeepSITHLayer(bank, dense, bn, lm["dropout_rate"], lm["conv"]))
    readout = DenseLayer(arrays["readout.weights"].astype(dtype), arrays["readout.bias"].astype(dtype))
    return DeepSITHNet(layers, readout, meta["readout_mode"]), meta.get("config")
