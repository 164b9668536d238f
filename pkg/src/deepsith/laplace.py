"""Streaming temporal memory through the real Laplace transform.

``F(t, s)`` obeys ``dF/dt = -s F + f(t)``, so it can be updated one sample at a
time with constant memory. The Post inversion formula

    f~(t, tau*) = (-1)**k / k! * s**(k+1) * d^k F / ds^k,   s = k / tau*

recovers the same gamma-kernel memory that :mod:`deepsith.sith` builds by
convolution. The k-th derivative is taken with iterated central differences on
a log-spaced ``s`` grid, which limits this route to modest ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filterbank import TauStarGrid

__all__ = [
    "SGrid",
    "LaplaceState",
    "UnsupportedKError",
    "make_s_grid",
    "init_state",
    "laplace_step",
    "laplace_run",
    "post_invert",
    "MAX_K",
]

MAX_K = 12
# finer steps lose more to round-off in the k-th difference than they gain
MIN_LOG_STEP = 0.0125


class UnsupportedKError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SGrid:
    """Log-even ``s`` values, largest first (so in increasing ``tau*`` order).

    ``targets[j]`` indexes the grid point with ``s = k / taus[j]``; ``k``
    points of padding sit beyond each end target for the difference stencil.
    """

    s_values: np.ndarray
    log_step: float
    k: int
    oversample: int
    targets: np.ndarray
    taus: np.ndarray

    def __len__(self) -> int:
        return len(self.s_values)


@dataclass(frozen=True, eq=False)
class LaplaceState:
    F: np.ndarray  # (n_features, len(grid))
    t: float
    grid: SGrid


def make_s_grid(taus: TauStarGrid, k: int, oversample: int | None = None) -> SGrid:
    """Grid for inverting onto ``taus`` with sharpness ``k``.

    ``oversample`` is the number of grid steps between neighbouring targets.
    By default it is chosen so the log step is about ``0.1 / k`` (never below
    ``MIN_LOG_STEP``), which keeps the truncation error near 1%.
    """
    if k < 1 or k > MAX_K:
        raise UnsupportedKError(f"k={k} is outside the stable range 1..{MAX_K} for finite-difference inversion")
    spacing = math.log1p(taus.c)
    if oversample is None:
        target_step = max(0.1 / k, MIN_LOG_STEP)
        oversample = max(1, math.ceil(spacing / target_step))
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    h = spacing / oversample
    n_inner = (taus.count - 1) * oversample + 1
    u_top = math.log(k / taus.tau_min) + k * h
    u = u_top - h * np.arange(n_inner + 2 * k)
    targets = k + oversample * np.arange(taus.count)
    return SGrid(np.exp(u), h, k, oversample, targets, taus.values.copy())


def init_state(grid: SGrid, n_features: int = 1, dtype=np.float64) -> LaplaceState:
    return LaplaceState(np.zeros((n_features, len(grid)), dtype=dtype), 0.0, grid)


def laplace_step(state: LaplaceState, f_t, dt: float = 1.0) -> LaplaceState:
    """Advance one sample: ``F <- F * exp(-s dt) + f_t * dt``.

    The decay factor is exact for the homogeneous part, so the update is
    stable for any ``s * dt``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    f_t = np.atleast_1d(np.asarray(f_t, dtype=state.F.dtype))
    if f_t.shape != (state.F.shape[0],):
        raise ValueError(f"expected {state.F.shape[0]} input features, got shape {f_t.shape}")
    decay = np.exp(-state.grid.s_values * dt)
    return LaplaceState(state.F * decay + f_t[:, None] * dt, state.t + dt, state.grid)


def laplace_run(signal: np.ndarray, grid: SGrid, dt: float = 1.0, state: LaplaceState | None = None) -> LaplaceState:
    """Feed a ``(T, F)`` series through :func:`laplace_step` and return the final state."""
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        signal = signal[:, None]
    if state is None:
        state = init_state(grid, signal.shape[1])
    for row in signal:
        state = laplace_step(state, row, dt)
    return state


def post_invert(state: LaplaceState, k: int, taus: TauStarGrid) -> np.ndarray:
    """Approximate the memory ``f~(t, tau*)`` for every feature, shape ``(F, N)``."""
    grid = state.grid
    if k > MAX_K:
        raise UnsupportedKError(f"k={k} exceeds the stable limit {MAX_K}")
    if k != grid.k or len(taus.values) != len(grid.taus) or not np.allclose(taus.values, grid.taus, rtol=1e-12):
        raise ValueError("state grid was built for a different k or tau* grid")
    G = state.F
    s = grid.s_values
    # d/ds = (1/s) d/du with u = log s; each pass trims one point per side
    for _ in range(k):
        G = (G[:, 2:] - G[:, :-2]) / (2.0 * -grid.log_step) / s[1:-1]
        s = s[1:-1]
    idx = grid.targets - k
    s_t = s[idx]
    coeff = (-1.0) ** k / math.factorial(k)
    return coeff * s_t ** (k + 1) * G[:, idx]
