"""Scale-invariant temporal filters.

A filter bank is a set of gamma-shaped impulse responses ``x**k * exp(-k*x)``
with ``x = lag / tau_star``. Each filter peaks at its own ``tau_star`` and the
``tau_star`` values are spaced geometrically, so the bank tiles the past with
constant resolution on a logarithmic time axis.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

__all__ = [
    "TauStarGrid",
    "FilterSpec",
    "FilterBank",
    "KSelectionReport",
    "geometric_taus",
    "phi",
    "build_kernels",
    "std_ratio_objective",
    "select_k",
]


@dataclass(frozen=True, eq=False)
class TauStarGrid:
    """Geometrically spaced peak times, in units of the input timestep."""

    tau_min: float
    tau_max: float
    count: int
    values: np.ndarray
    c: float

    def __len__(self) -> int:
        return self.count


@dataclass(frozen=True)
class FilterSpec:
    grid: TauStarGrid
    k: int
    dt: float = 1.0
    truncation_mass: float = 0.999
    max_length: int | None = None  # default cap: 16 * tau_max / dt

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not 0.99 < self.truncation_mass < 1.0:
            raise ValueError(
                f"truncation_mass must lie in (0.99, 1), got {self.truncation_mass}"
            )


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Discrete, area-normalized kernels for one layer.

    ``kernels`` is an ``(N, max(lengths) + 1)`` array; row ``i`` holds the taps
    for lags ``0..lengths[i]`` followed by zero padding.
    """

    spec: FilterSpec
    kernels: np.ndarray
    lengths: np.ndarray

    @property
    def taus(self) -> np.ndarray:
        return self.spec.grid.values

    @property
    def n_taus(self) -> int:
        return self.kernels.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.kernels[i, : self.lengths[i] + 1]

    def coefficient_of_variation(self) -> np.ndarray:
        """Std of the lag divided by the mean lag, treating each row as a distribution."""
        lags = np.arange(self.kernels.shape[1]) * self.spec.dt
        mean = self.kernels @ lags
        var = self.kernels @ lags**2 - mean**2
        return np.sqrt(np.maximum(var, 0.0)) / mean

    def resolved(self, min_std_lags: float = 1.0) -> np.ndarray:
        """Rows whose analytic kernel width spans at least ``min_std_lags`` samples.

        Narrower rows collapse onto one or two taps and cannot carry the
        continuous coefficient of variation.
        """
        std = self.taus / (self.spec.dt * math.sqrt(self.spec.k + 1))
        return std >= min_std_lags


@dataclass
class KSelectionReport:
    candidate_ks: list[int]
    objective_values: list[float]
    chosen_k: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "objective"])
            for k, v in zip(self.candidate_ks, self.objective_values):
                writer.writerow([k, repr(float(v))])


def geometric_taus(tau_min: float, tau_max: float, count: int) -> TauStarGrid:
    """Return ``count`` peak times from ``tau_min`` to ``tau_max`` evenly spaced in log."""
    if int(count) != count or count < 2:
        raise ValueError(f"count must be an integer >= 2, got {count}")
    if not tau_min > 0:
        raise ValueError(f"tau_min must be positive, got {tau_min}")
    if not tau_max > tau_min:
        raise ValueError(f"tau_max ({tau_max}) must exceed tau_min ({tau_min})")
    count = int(count)
    ratio = (tau_max / tau_min) ** (1.0 / (count - 1))
    values = tau_min * ratio ** np.arange(count)
    # pin the endpoint exactly; the power series can drift by an ulp or two
    values[-1] = tau_max
    return TauStarGrid(float(tau_min), float(tau_max), count, values, ratio - 1.0)


def phi(x, k: int):
    """Unnormalized gamma kernel ``x**k * exp(-k*x)``, evaluated in log space."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("phi is defined for x >= 0 only")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(k * (np.log(x[pos]) - x[pos]))
    return out if out.ndim else float(out)


def build_kernels(spec: FilterSpec) -> FilterBank:
    taus = spec.grid.values
    k = spec.k
    cap = spec.max_length
    if cap is None:
        cap = int(math.ceil(16 * spec.grid.tau_max / spec.dt))
    # As a density over lag, x**k e^{-kx} with x = lag*dt/tau is Gamma(k+1, scale=tau/(k*dt)).
    lengths = np.array(
        [
            int(math.ceil(stats.gamma.ppf(spec.truncation_mass, k + 1, scale=tau / (k * spec.dt))))
            for tau in taus
        ]
    )
    # the peak must be inside the row even when the tail quantile is tiny
    lengths = np.maximum(lengths, np.ceil(taus / spec.dt).astype(int) + 1)
    if lengths.max() > cap:
        raise ValueError(
            f"kernel length {lengths.max()} exceeds cap {cap}; "
            f"k={k} is pathological for tau_max={spec.grid.tau_max}"
        )
    kernels = np.zeros((len(taus), lengths.max() + 1))
    for i, (tau, length) in enumerate(zip(taus, lengths)):
        lags = np.arange(length + 1)
        # peak-relative log values keep the exponentials in range for large k
        x = lags * spec.dt / tau
        with np.errstate(divide="ignore"):
            logv = k * (np.log(x) - x + 1.0)
        row = np.exp(logv)
        kernels[i, : length + 1] = row / row.sum()
    kernels.setflags(write=False)
    lengths.setflags(write=False)
    return FilterBank(spec, kernels, lengths)


def _peak_normalized(grid: TauStarGrid, k: int, n_samples: int) -> np.ndarray:
    t = np.geomspace(grid.tau_min, grid.tau_max, n_samples)
    x = t[None, :] / grid.values[:, None]
    return np.exp(k * (np.log(x) - x + 1.0))


def std_ratio_objective(grid: TauStarGrid, k: int, n_samples: int = 2000) -> float:
    """Std of the summed filters over the std of every other filter's sum.

    Filters are scaled to unit peak and sampled evenly on a log-time axis over
    ``[tau_min, tau_max]``. The alternating subset is the odd-indexed rows.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    filters = _peak_normalized(grid, k, n_samples)
    std_all = filters.sum(axis=0).std()
    std_alt = filters[1::2].sum(axis=0).std()
    return float(std_all / std_alt)


def select_k(grid: TauStarGrid, k_max: int = 300, n_samples: int = 2000) -> KSelectionReport:
    """Scan integer ``k`` in ``[1, k_max]`` and pick the minimizer of the std ratio."""
    if k_max < 2:
        raise ValueError(f"k_max must be >= 2, got {k_max}")
    ks = list(range(1, k_max + 1))
    values = [std_ratio_objective(grid, k, n_samples) for k in ks]
    # np.argmin returns the first minimum, i.e. ties resolve to the smaller k
    chosen = ks[int(np.argmin(values))]
    return KSelectionReport(ks, values, chosen)
