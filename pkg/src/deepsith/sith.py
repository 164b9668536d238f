"""Causal convolution of a multivariate series with a filter bank, and its adjoint.

Shapes follow a time-major convention: a signal is ``(T, F)`` or batched
``(B, T, F)``; the memory it produces is ``(T, F, N)`` or ``(B, T, F, N)``
with one slot per ``tau_star``.
"""

from __future__ import annotations

import weakref

import numpy as np
from scipy import fft as sfft

from .filterbank import FilterBank

__all__ = ["sith_forward", "sith_backward", "sith_final", "sith_final_backward"]

_METHODS = ("auto", "direct", "fft")

# Toeplitz matrices are rebuilt per (T, dtype); banks are immutable so caching by identity is safe.
_toeplitz_cache: "weakref.WeakKeyDictionary[FilterBank, dict]" = weakref.WeakKeyDictionary()


def _truncated(bank: FilterBank, T: int, dtype) -> np.ndarray:
    # lags >= T never reach an output inside the window
    return np.ascontiguousarray(bank.kernels[:, :T], dtype=dtype)


def _toeplitz(bank: FilterBank, T: int, dtype) -> np.ndarray:
    per_bank = _toeplitz_cache.setdefault(bank, {})
    key = (T, np.dtype(dtype).str)
    mat = per_bank.get(key)
    if mat is None:
        kern = _truncated(bank, T, dtype)
        L = kern.shape[1]
        lag = np.arange(T)[:, None] - np.arange(T)[None, :]
        valid = (lag >= 0) & (lag < L)
        mat = np.zeros((bank.n_taus, T, T), dtype=dtype)
        mat[:, valid] = kern[:, lag[valid]]
        mat = mat.reshape(bank.n_taus * T, T)
        mat.setflags(write=False)
        per_bank[key] = mat
    return mat


def _pick(method: str, T: int, n_taus: int) -> str:
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {_METHODS}")
    if method != "auto":
        return method
    # a dense (N*T, T) Toeplitz is fast under BLAS until it gets large
    return "direct" if n_taus * T * T <= 4_000_000 else "fft"


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim - 1} or {ndim} dims, got shape {x.shape}")
    return x, False


def sith_forward(signal: np.ndarray, bank: FilterBank, method: str = "auto") -> np.ndarray:
    """Causal memory ``out[t, f, i] = sum_l kernel_i[l] * signal[t - l, f]``.

    History before ``t = 0`` is zero. Works on ``(T, F)`` or ``(B, T, F)``
    input and keeps the input's floating dtype.
    """
    x = np.asarray(signal)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    x, squeeze = _as_batch(x, 3)
    B, T, F = x.shape
    N = bank.n_taus
    how = _pick(method, T, N)
    if how == "direct":
        mat = _toeplitz(bank, T, x.dtype)
        cols = x.transpose(1, 0, 2).reshape(T, B * F)
        out = (mat @ cols).reshape(N, T, B, F).transpose(2, 1, 3, 0)
    else:
        kern = _truncated(bank, T, x.dtype)
        n = sfft.next_fast_len(T + kern.shape[1] - 1, real=True)
        kf = sfft.rfft(kern, n, axis=1)  # (N, nf)
        xf = sfft.rfft(x, n, axis=1)  # (B, nf, F)
        out = sfft.irfft(xf[..., None] * kf.T[None, :, None, :], n, axis=1)[:, :T]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    return out[0] if squeeze else out


def sith_backward(grad_out: np.ndarray, bank: FilterBank, method: str = "auto") -> np.ndarray:
    """Vector-Jacobian product of :func:`sith_forward`.

    ``grad_in[t, f] = sum_i sum_l kernel_i[l] * grad_out[t + l, f, i]``.
    """
    g = np.asarray(grad_out)
    g, squeeze = _as_batch(g, 4)
    B, T, F, N = g.shape
    if N != bank.n_taus:
        raise ValueError(f"grad_out has {N} tau slots, bank has {bank.n_taus}")
    how = _pick(method, T, N)
    if how == "direct":
        mat = _toeplitz(bank, T, g.dtype)
        rows = g.transpose(3, 1, 0, 2).reshape(N * T, B * F)
        grad = (mat.T @ rows).reshape(T, B, F).transpose(1, 0, 2)
    else:
        kern = _truncated(bank, T, g.dtype)
        n = sfft.next_fast_len(T + kern.shape[1] - 1, real=True)
        kf = sfft.rfft(kern, n, axis=1)
        # correlation with the kernel is a product with its conjugate spectrum;
        # n >= T + L - 1 keeps t + l from wrapping
        gf = sfft.rfft(g, n, axis=1)  # (B, nf, F, N)
        acc = gf @ np.conj(kf).T[:, :, None]  # (B, nf, F, 1): sum over tau slots
        grad = sfft.irfft(acc[..., 0], n, axis=1)[:, :T]
    grad = np.ascontiguousarray(grad, dtype=g.dtype)
    return grad[0] if squeeze else grad


def sith_final(signal: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Memory at the last timestep only, ``(B, T, F) -> (B, F, N)``."""
    x, squeeze = _as_batch(np.asarray(signal), 3)
    T = x.shape[1]
    kern = _truncated(bank, T, x.dtype)
    L = kern.shape[1]
    recent = x[:, T - L :][:, ::-1]  # (B, L, F), lag-ordered
    out = np.einsum("blf,nl->bfn", recent, kern)
    return out[0] if squeeze else out


def sith_final_backward(grad_out: np.ndarray, bank: FilterBank, T: int) -> np.ndarray:
    """Adjoint of :func:`sith_final`, ``(B, F, N) -> (B, T, F)``."""
    g, squeeze = _as_batch(np.asarray(grad_out), 3)
    kern = _truncated(bank, T, g.dtype)
    L = kern.shape[1]
    grad = np.zeros((g.shape[0], T, g.shape[1]), dtype=g.dtype)
    grad[:, T - L :] = np.einsum("bfn,nl->blf", g, kern)[:, ::-1]
    return grad[0] if squeeze else grad
