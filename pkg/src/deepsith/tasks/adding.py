"""The adding problem: remember two marked values in a long sequence and sum them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AddingSample", "gen_adding", "gen_adding_batch"]


@dataclass(frozen=True, eq=False)
class AddingSample:
    input: np.ndarray  # (T, 2)
    target: float
    markers: tuple[int, int]


def _check_T(T: int) -> None:
    if T < 2 or T % 2:
        raise ValueError(f"T must be an even integer >= 2, got {T}")


def gen_adding_batch(T: int, batch_size: int, seed, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch_size`` samples from one stream seeded by ``seed``.

    ``seed`` may be an int or a sequence such as ``(master_seed, step)``.
    Returns inputs ``(B, T, 2)`` and targets ``(B,)``.
    """
    _check_T(T)
    rng = np.random.default_rng(seed)
    half = T // 2
    values = rng.random((batch_size, T))
    first = rng.integers(0, half, size=batch_size)
    second = rng.integers(half, T, size=batch_size)
    x = np.zeros((batch_size, T, 2), dtype=dtype)
    x[:, :, 0] = values
    rows = np.arange(batch_size)
    x[rows, first, 1] = 1.0
    x[rows, second, 1] = 1.0
    y = (values[rows, first] + values[rows, second]).astype(dtype)
    return x, y


def gen_adding(T: int, seed) -> AddingSample:
    _check_T(T)
    rng = np.random.default_rng(seed)
    half = T // 2
    values = rng.random(T)
    m1 = int(rng.integers(0, half))
    m2 = int(rng.integers(half, T))
    x = np.zeros((T, 2))
    x[:, 0] = values
    x[[m1, m2], 1] = 1.0
    return AddingSample(x, float(values[m1] + values[m2]), (m1, m2))
