"""Gaussian kernel density estimates of return samples."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class KDEResult:
    points: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.points))


def silverman_bandwidth(values) -> float:
    x = np.asarray(values, dtype=float)
    return 1.06 * float(x.std(ddof=1)) * x.size ** (-0.2)


def kde(values, bandwidth: float | None = None, n_points: int = 512, chunk: int = 4096) -> KDEResult:
    """Density on ``n_points`` evenly spaced points over ``[min - 3h, max + 3h]``."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("a density estimate needs at least two values")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    if not x.std() > 0:
        raise ValueError("values have zero variance")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_points)
    dens = np.zeros(n_points)
    for start in range(0, x.size, chunk):
        u = (grid[:, None] - x[None, start : start + chunk]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= x.size * h * math.sqrt(2 * math.pi)
    return KDEResult(grid, dens, h)
