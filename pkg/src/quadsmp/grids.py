"""Time grids, Brownian ensembles and control processes.

Array conventions used throughout the package:

* node processes (states, Y-components, adjoint p/P, weights) have shape
  ``(n_paths, n_steps + 1, ...)`` and live on the grid nodes ``t_0 .. t_N``;
* step processes (controls, Z-components, adjoint q/Q, coefficients of
  backward equations) have shape ``(n_paths, n_steps, ...)`` and are read at
  the left endpoint of each grid cell;
* Brownian increments have shape ``(n_paths, n_steps, d)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "BrownianEnsemble",
    "generate_brownian",
    "constant_control",
    "write_ensemble_csv",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into n_steps cells."""

    horizon: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of a node time t; raises if t is off-grid."""
        k = t / self.dt
        k_round = int(round(k))
        if not (0 <= k_round <= self.n_steps) or abs(k - k_round) > 1e-9 * max(1, abs(k)):
            raise ValueError(f"time {t} is not a node of the grid (dt={self.dt})")
        return k_round


@dataclass(frozen=True)
class BrownianEnsemble:
    """Seeded i.i.d. Gaussian increments of a d-dimensional Brownian motion."""

    grid: TimeGrid
    dim: int
    seed: int
    increments: np.ndarray = field(repr=False)  # (n_paths, n_steps, dim)

    def __post_init__(self) -> None:
        expected = (self.n_paths, self.grid.n_steps, self.dim)
        if self.increments.shape != expected:
            raise ValueError(f"increments shape {self.increments.shape}, expected {expected}")

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    def paths(self) -> np.ndarray:
        """Brownian node values W_{t_k}, shape (n_paths, n_steps+1, dim)."""
        w = np.zeros((self.n_paths, self.grid.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w


def generate_brownian(n_paths: int, grid: TimeGrid, d: int, seed: int) -> BrownianEnsemble:
    """Draw a reproducible ensemble; increments are N(0, dt) per coordinate."""
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    dw = rng.standard_normal((n_paths, grid.n_steps, d)) * np.sqrt(grid.dt)
    return BrownianEnsemble(grid=grid, dim=d, seed=seed, increments=dw)


def constant_control(value, n_paths: int, n_steps: int) -> np.ndarray:
    """Step process equal to a constant control value, shape (n_paths, n_steps, k)."""
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return np.broadcast_to(v, (n_paths, n_steps, v.shape[-1])).copy()


def write_ensemble_csv(path, array: np.ndarray) -> None:
    """Dump a (n_paths, n_steps, coord) or (n_paths, n_steps) array for debugging.

    Columns: path, step, coordinate, value. Floats carry 17 significant digits.
    """
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "step", "coordinate", "value"])
        for p in range(a.shape[0]):
            for s in range(a.shape[1]):
                for c in range(a.shape[2]):
                    writer.writerow([p, s, c, format(a[p, s, c], ".17g")])
