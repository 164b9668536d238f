"""DeepSITH layer: fixed SITH memory -> dense -> ReLU -> batch norm -> dropout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from ..filterbank import FilterBank
from ..sith import sith_backward, sith_forward

__all__ = [
    "DenseLayer",
    "BatchNorm",
    "DeepSITHLayer",
    "LayerCache",
    "layer_forward",
    "layer_backward",
]

MODES = ("train", "eval")


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64) -> "DenseLayer":
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        return cls(w, np.zeros(n_out, dtype=dtype))

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias

    def backward(self, x: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(grad_x, grad_weights, grad_bias)`` for ``y = x W^T + b``."""
        g2 = grad.reshape(-1, grad.shape[-1])
        gw = g2.T @ x.reshape(-1, x.shape[-1])
        return grad @ self.weights, gw, g2.sum(axis=0)


@dataclass(eq=False)
class BatchNorm:
    """Per-feature normalization over every batch and time sample."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, n: int, dtype=np.float64) -> "BatchNorm":
        return cls(
            np.ones(n, dtype=dtype),
            np.zeros(n, dtype=dtype),
            np.zeros(n, dtype=dtype),
            np.ones(n, dtype=dtype),
        )

    @property
    def n_params(self) -> int:
        return self.gamma.size + self.beta.size


@dataclass(eq=False)
class DeepSITHLayer:
    bank: FilterBank
    dense: DenseLayer
    batch_norm: BatchNorm | None = None
    dropout_rate: float = 0.0
    conv: str = "auto"  # "materialize", "spectral" or "auto"

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.dense.weights.shape[1] % self.bank.n_taus:
            raise ValueError("dense input width must be a multiple of the number of tau_stars")

    @property
    def n_in(self) -> int:
        return self.dense.weights.shape[1] // self.bank.n_taus

    @property
    def n_out(self) -> int:
        return self.dense.weights.shape[0]

    @property
    def use_batch_norm(self) -> bool:
        return self.batch_norm is not None

    @property
    def n_params(self) -> int:
        n = self.dense.n_params
        if self.batch_norm is not None:
            n += self.batch_norm.n_params
        return n


@dataclass(eq=False)
class LayerCache:
    mode: str
    x_shape: tuple
    conv: str
    conv_cache: dict = field(default_factory=dict)
    pre: np.ndarray | None = None  # dense output before ReLU
    bn_xhat: np.ndarray | None = None
    bn_inv_std: np.ndarray | None = None
    mask: np.ndarray | None = None  # inverted-dropout multiplier


# --- SITH memory followed by the dense map -------------------------------------


def _conv_strategy(layer: DeepSITHLayer, T: int) -> str:
    if layer.conv != "auto":
        return layer.conv
    return "materialize" if layer.bank.n_taus * T * T <= 4_000_000 else "spectral"


def _parseval_weights(n: int, nf: int, dtype) -> np.ndarray:
    # rfft keeps half the spectrum; interior bins stand for a conjugate pair
    w = np.full(nf, 2.0, dtype=dtype)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w / n


def _sith_dense_forward(layer: DeepSITHLayer, x: np.ndarray, how: str) -> tuple[np.ndarray, dict]:
    B, T, F = x.shape
    N = layer.bank.n_taus
    W = layer.dense.weights
    H = W.shape[0]
    if how == "materialize":
        mem = sith_forward(x, layer.bank).reshape(B, T, F * N)
        return layer.dense.forward(mem), {"mem": mem}
    if how != "spectral":
        raise ValueError(f"unknown conv strategy {how!r}")
    # Convolution and the dense map are both linear, so fold the weights into
    # per-(feature, hidden) kernels in frequency space and never form (B, T, F, N).
    kern = np.ascontiguousarray(layer.bank.kernels[:, :T], dtype=x.dtype)
    n = sfft.next_fast_len(T + kern.shape[1] - 1, real=True)
    kf = sfft.rfft(kern, n, axis=1)  # (N, nf)
    nf = kf.shape[1]
    w3 = W.reshape(H, F, N)
    gf = (kf.T @ w3.transpose(2, 1, 0).reshape(N, F * H)).reshape(nf, F, H)
    xf = sfft.rfft(x, n, axis=1).transpose(1, 0, 2)  # (nf, B, F)
    zf = xf @ gf  # (nf, B, H)
    z = sfft.irfft(zf, n, axis=0)[:T].transpose(1, 0, 2)
    z = np.ascontiguousarray(z, dtype=x.dtype) + layer.dense.bias
    return z, {"kf": kf, "gf": gf, "xf": xf, "n": n}


def _sith_dense_backward(
    layer: DeepSITHLayer, cache: dict, how: str, x_shape: tuple, grad: np.ndarray, need_input_grad: bool
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    B, T, F = x_shape
    N = layer.bank.n_taus
    H = grad.shape[-1]
    gb = grad.sum(axis=(0, 1))
    if how == "materialize":
        gmem, gw, _ = layer.dense.backward(cache["mem"], grad)
        gx = sith_backward(gmem.reshape(B, T, F, N), layer.bank) if need_input_grad else None
        return gx, gw, gb
    kf, gf, xf, n = cache["kf"], cache["gf"], cache["xf"], cache["n"]
    nf = kf.shape[1]
    gzf = sfft.rfft(grad, n, axis=1).transpose(1, 0, 2)  # (nf, B, H)
    # Parseval: sum_t gz[t] * (k_i * x_f)[t] in the frequency domain
    p = np.conj(gzf).transpose(0, 2, 1) @ xf  # (nf, H, F)
    q = _parseval_weights(n, nf, grad.dtype)[:, None] * kf.T  # (nf, N)
    gw = (p.reshape(nf, H * F).T @ q).real.reshape(H, F * N).astype(grad.dtype)
    gx = None
    if need_input_grad:
        gxf = gzf @ np.conj(gf).transpose(0, 2, 1)  # (nf, B, F)
        gx = sfft.irfft(gxf, n, axis=0)[:T].transpose(1, 0, 2)
        gx = np.ascontiguousarray(gx, dtype=grad.dtype)
    return gx, gw, gb


# --- full layer -------------------------------------------------------------------


def layer_forward(
    layer: DeepSITHLayer,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, LayerCache]:
    """Run one layer on a ``(B, T, F)`` batch; returns ``(output, cache)``.

    In train mode batch statistics are used (and the running estimates
    updated) and dropout draws its mask from ``rng``. Eval mode touches no
    random state.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if x.ndim != 3 or x.shape[2] != layer.n_in:
        raise ValueError(f"layer expects (B, T, {layer.n_in}) input, got {x.shape}")
    how = _conv_strategy(layer, x.shape[1])
    z, conv_cache = _sith_dense_forward(layer, x, how)
    cache = LayerCache(mode, x.shape, how, conv_cache, pre=z)
    out = np.maximum(z, 0.0)

    bn = layer.batch_norm
    if bn is not None:
        if mode == "train":
            mean = out.mean(axis=(0, 1))
            var = out.var(axis=(0, 1))
            count = out.shape[0] * out.shape[1]
            bn.running_mean *= 1.0 - bn.momentum
            bn.running_mean += bn.momentum * mean
            unbiased = var * count / max(count - 1, 1)
            bn.running_var *= 1.0 - bn.momentum
            bn.running_var += bn.momentum * unbiased
        else:
            mean, var = bn.running_mean, bn.running_var
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = (out - mean) * inv_std
        out = bn.gamma * xhat + bn.beta
        cache.bn_xhat, cache.bn_inv_std = xhat, inv_std

    if mode == "train" and layer.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = 1.0 - layer.dropout_rate
        mask = (rng.random(out.shape) < keep).astype(out.dtype) / keep
        out = out * mask
        cache.mask = mask
    return out.astype(x.dtype, copy=False), cache


def layer_backward(
    layer: DeepSITHLayer, cache: LayerCache, grad: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
    """Backpropagate through one layer; returns ``(grad_input, param_grads)``."""
    grads: dict[str, np.ndarray] = {}
    if cache.mask is not None:
        grad = grad * cache.mask
    bn = layer.batch_norm
    if bn is not None:
        xhat = cache.bn_xhat
        grads["bn.gamma"] = (grad * xhat).sum(axis=(0, 1))
        grads["bn.beta"] = grad.sum(axis=(0, 1))
        gxhat = grad * bn.gamma
        if cache.mode == "train":
            grad = cache.bn_inv_std * (
                gxhat - gxhat.mean(axis=(0, 1)) - xhat * (gxhat * xhat).mean(axis=(0, 1))
            )
        else:
            grad = gxhat * cache.bn_inv_std
    grad = grad * (cache.pre > 0)
    gx, gw, gb = _sith_dense_backward(layer, cache.conv_cache, cache.conv, cache.x_shape, grad, need_input_grad)
    grads["dense.weights"] = gw
    grads["dense.bias"] = gb
    return gx, grads
