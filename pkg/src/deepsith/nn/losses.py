"""Losses return ``(value, gradient w.r.t. the prediction)``; both are batch-mean reduced."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

__all__ = ["loss_cross_entropy", "loss_mse", "metric_nrmse", "accuracy"]


def loss_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    lse = logsumexp(logits, axis=1, keepdims=True)
    logp = logits - lse
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over every element; the gradient is scaled to match."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def metric_nrmse(pred: np.ndarray, target: np.ndarray) -> float:
    """RMSE divided by the target's standard deviation; predicting the mean scores 1."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float).reshape(pred.shape)
    rmse = np.sqrt(np.mean((pred - target) ** 2))
    return float(rmse / np.std(target))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))
