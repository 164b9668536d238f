"""Mackey-Glass delay differential equation.

    dx/dt = beta * x(t - tau) / (1 + x(t - tau)**n) - gamma * x(t)

integrated with classic RK4. Delayed values between stored grid points are
linearly interpolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..nn.optim import DivergenceError

__all__ = ["MGParams", "MGSeries", "gen_mackey_glass", "gen_mackey_glass_batch", "TAU_DISTANCE_GRID"]

# tau / prediction-distance pairs studied for increasing signal complexity
TAU_DISTANCE_GRID = ((17, 15), (34, 30), (51, 45), (68, 60), (85, 75))


@dataclass(frozen=True)
class MGParams:
    beta: float = 0.2
    gamma: float = 0.1
    n: float = 10.0
    dt: float = 1.0  # integration step
    warmup: int = 500  # emitted steps discarded before the series starts
    history: float = 1.2  # constant part of the initial history
    jitter: float = 0.2  # width of the uniform noise added to the history


@dataclass(frozen=True, eq=False)
class MGSeries:
    values: np.ndarray
    tau: int
    params: MGParams = field(default_factory=MGParams)
    warmup_dropped: int = 500


def _integrate(hist: np.ndarray, tau: float, n_out: int, p: MGParams) -> np.ndarray:
    """Integrate a batch of histories; returns ``(batch, n_out)`` samples at unit spacing."""
    dt = p.dt
    per_unit = round(1.0 / dt)
    if not math.isclose(per_unit * dt, 1.0, rel_tol=1e-12):
        raise ValueError("integration dt must divide the unit output step")
    n_hist = hist.shape[1]  # covers [-tau, 0] at spacing dt
    n_steps = (n_out + p.warmup) * per_unit
    x = np.empty((hist.shape[0], n_hist + n_steps))
    x[:, :n_hist] = hist
    origin = n_hist - 1  # index of t = 0

    def delayed(idx_float: float) -> np.ndarray:
        lo = math.floor(idx_float)
        frac = idx_float - lo
        if frac == 0.0:
            return x[:, lo]
        return (1.0 - frac) * x[:, lo] + frac * x[:, lo + 1]

    def rhs(xt, xd):
        return p.beta * xd / (1.0 + xd**p.n) - p.gamma * xt

    lag = tau / dt
    for j in range(n_steps):
        i = origin + j
        xi = x[:, i]
        d0 = delayed(i - lag)
        dh = delayed(i + 0.5 - lag)
        d1 = delayed(i + 1 - lag)
        k1 = rhs(xi, d0)
        k2 = rhs(xi + 0.5 * dt * k1, dh)
        k3 = rhs(xi + 0.5 * dt * k2, dh)
        k4 = rhs(xi + dt * k3, d1)
        x[:, i + 1] = xi + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x[:, i + 1])):
            raise DivergenceError(f"Mackey-Glass integration diverged at step {j}")
    start = origin + 1 + p.warmup * per_unit
    return x[:, start::per_unit][:, :n_out]


def _history(rng: np.random.Generator, tau: float, p: MGParams) -> np.ndarray:
    n_hist = int(math.ceil(tau / p.dt)) + 1
    return p.history + p.jitter * (rng.random(n_hist) - 0.5)


def gen_mackey_glass(tau: int, length: int, seed, params: MGParams | None = None) -> MGSeries:
    """One series of ``length`` unit-spaced samples after the warmup."""
    p = params or MGParams()
    if tau < 1 or length < 1:
        raise ValueError("tau and length must both be >= 1")
    hist = _history(np.random.default_rng(seed), tau, p)[None]
    return MGSeries(_integrate(hist, tau, length, p)[0], tau, p, p.warmup)


def gen_mackey_glass_batch(tau: int, length: int, n_series: int, seed: int, params: MGParams | None = None) -> np.ndarray:
    """``(n_series, length)`` series; series ``i`` equals ``gen_mackey_glass(tau, length, (seed, i))``."""
    p = params or MGParams()
    if tau < 1 or length < 1:
        raise ValueError("tau and length must both be >= 1")
    hist = np.stack([_history(np.random.default_rng((seed, i)), tau, p) for i in range(n_series)])
    return _integrate(hist, tau, length, p)
