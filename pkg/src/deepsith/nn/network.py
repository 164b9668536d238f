"""Stacked DeepSITH layers with a linear readout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..filterbank import FilterSpec, build_kernels, geometric_taus, select_k
from .layers import (
    MODES,
    BatchNorm,
    DeepSITHLayer,
    DenseLayer,
    LayerCache,
    layer_backward,
    layer_forward,
)
from .optim import AdamState, adam_step

__all__ = [
    "LayerConfig",
    "DeepSITHNet",
    "NetTrace",
    "StaleTraceError",
    "build_network",
    "net_forward",
    "net_backward",
    "count_parameters",
    "apply_update",
]

READOUT_MODES = ("final", "every")


class StaleTraceError(RuntimeError):
    """Raised when a trace no longer matches the network it came from."""


@dataclass
class LayerConfig:
    tau_max: float
    n_taus: int
    hidden: int
    k: int | str = "auto"
    batch_norm: bool = False
    tau_min: float = 1.0


@dataclass(eq=False)
class DeepSITHNet:
    layers: list[DeepSITHLayer]
    readout: DenseLayer
    readout_mode: str = "final"
    version: int = 0  # bumped whenever parameters change in place

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one DeepSITH layer")
        if self.readout_mode not in READOUT_MODES:
            raise ValueError(f"readout_mode must be one of {READOUT_MODES}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        if self.readout.weights.shape[1] != self.layers[-1].n_out:
            raise ValueError("readout input width must equal the last hidden size")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.readout.weights.shape[0]

    @property
    def dtype(self):
        return self.readout.weights.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        """Learnable arrays by name. The arrays are live; updating them in place updates the net."""
        params: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.dense.weights"] = layer.dense.weights
            params[f"layers.{i}.dense.bias"] = layer.dense.bias
            if layer.batch_norm is not None:
                params[f"layers.{i}.bn.gamma"] = layer.batch_norm.gamma
                params[f"layers.{i}.bn.beta"] = layer.batch_norm.beta
        params["readout.weights"] = self.readout.weights
        params["readout.bias"] = self.readout.bias
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-learnable state that still belongs in a checkpoint."""
        bufs: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            if layer.batch_norm is not None:
                bufs[f"layers.{i}.bn.running_mean"] = layer.batch_norm.running_mean
                bufs[f"layers.{i}.bn.running_var"] = layer.batch_norm.running_var
        return bufs


@dataclass(eq=False)
class NetTrace:
    mode: str
    version: int
    input_shape: tuple
    caches: list[LayerCache]
    hidden: np.ndarray  # last layer output fed to the readout
    consumed: bool = field(default=False)


def resolve_k(cfg: LayerConfig, k_max: int = 300) -> int:
    if cfg.k == "auto":
        return select_k(geometric_taus(cfg.tau_min, cfg.tau_max, cfg.n_taus), k_max).chosen_k
    return int(cfg.k)


def build_network(
    n_in: int,
    n_out: int,
    layer_configs: list[LayerConfig],
    readout_mode: str = "final",
    dropout_rate: float = 0.2,
    seed: int | np.random.Generator = 0,
    dtype=np.float64,
    conv: str = "auto",
) -> DeepSITHNet:
    """Build a network; dropout goes on every layer output except the last."""
    rng = np.random.default_rng(seed)
    layers = []
    width = n_in
    for j, cfg in enumerate(layer_configs):
        k = resolve_k(cfg)
        bank = build_kernels(FilterSpec(geometric_taus(cfg.tau_min, cfg.tau_max, cfg.n_taus), k))
        dense = DenseLayer.init(width * cfg.n_taus, cfg.hidden, rng, dtype)
        bn = BatchNorm.init(cfg.hidden, dtype) if cfg.batch_norm else None
        rate = dropout_rate if j < len(layer_configs) - 1 else 0.0
        layers.append(DeepSITHLayer(bank, dense, bn, rate, conv))
        width = cfg.hidden
    readout = DenseLayer.init(width, n_out, rng, dtype)
    return DeepSITHNet(layers, readout, readout_mode)


def net_forward(
    net: DeepSITHNet,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, NetTrace]:
    """Run a ``(B, T, F)`` batch through the net.

    Returns ``(outputs, trace)``; outputs are ``(B, n_out)`` for a final-step
    readout and ``(B, T, n_out)`` for an every-step readout.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] != net.n_in:
        raise ValueError(f"expected (B, T, {net.n_in}) input, got {x.shape}")
    caches = []
    h = x
    for layer in net.layers:
        h, cache = layer_forward(layer, h, mode, rng)
        caches.append(cache)
    last = h[:, -1] if net.readout_mode == "final" else h
    out = net.readout.forward(last)
    return out, NetTrace(mode, net.version, x.shape, caches, last)


def net_backward(net: DeepSITHNet, trace: NetTrace, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every learnable parameter, keyed like :meth:`DeepSITHNet.parameters`."""
    if trace is None:
        raise StaleTraceError("no trace: run net_forward first")
    if trace.version != net.version:
        raise StaleTraceError(
            f"trace was recorded at parameter version {trace.version}, net is at {net.version}"
        )
    if trace.consumed:
        raise StaleTraceError("trace has already been used for a backward pass")
    if len(trace.caches) != len(net.layers):
        raise StaleTraceError("trace does not match the network's layer count")
    loss_grad = np.asarray(loss_grad, dtype=net.dtype)
    grads: dict[str, np.ndarray] = {}
    g_last, grads["readout.weights"], grads["readout.bias"] = net.readout.backward(trace.hidden, loss_grad)
    B, T = trace.input_shape[:2]
    if net.readout_mode == "final":
        g = np.zeros((B, T, g_last.shape[-1]), dtype=net.dtype)
        g[:, -1] = g_last
    else:
        g = g_last
    for i in range(len(net.layers) - 1, -1, -1):
        g, layer_grads = layer_backward(net.layers[i], trace.caches[i], g, need_input_grad=i > 0)
        for name, value in layer_grads.items():
            grads[f"layers.{i}.{name}"] = value
    trace.consumed = True
    params = net.parameters()
    return {name: grads[name] for name in params}


def count_parameters(net: DeepSITHNet) -> int:
    return sum(p.size for p in net.parameters().values())


def apply_update(net: DeepSITHNet, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One Adam step on the net's parameters; invalidates outstanding traces."""
    adam_step(net.parameters(), grads, state)
    net.version += 1
