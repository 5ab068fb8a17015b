"""
Time discretisations of [0, T].

A grid is an immutable array of node times t_0 = 0 < t_1 < ... < t_N = T.
Uniform grids are the dyadic backbone of the multilevel machinery; Chebyshev
(Lobatto) grids cluster nodes near both ends of the interval. Non-uniform
grids are accepted everywhere a grid is: the local step t_{n+1} - t_n plays
the role of dt.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from fbsdenet.errors import DomainError, ShapeError


class GridKind(str, enum.Enum):
    UNIFORM = "uniform"
    CHEBYSHEV = "chebyshev"


@dataclass(frozen=True)
class TimeGrid:
    """
    Ordered node times on [0, T].

    Attributes
    ----------
    horizon : float
        T > 0.
    points : np.ndarray
        Read-only array of shape (N+1,), points[0] == 0 and points[-1] == T exactly.
    kind : GridKind
    """

    horizon: float
    points: np.ndarray
    kind: GridKind = GridKind.UNIFORM

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 1 or points.size < 2:
            raise ShapeError("TimeGrid: need at least two node times")
        if points[0] != 0.0 or points[-1] != self.horizon:
            raise DomainError("TimeGrid: endpoints must be exactly 0 and T")
        if np.any(np.diff(points) <= 0.0):
            raise DomainError("TimeGrid: node times must be strictly increasing")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def steps(self) -> int:
        return self.points.size - 1

    @property
    def dt(self) -> np.ndarray:
        """Local steps t_{n+1} - t_n, shape (N,)."""
        return np.diff(self.points)

    @property
    def level(self) -> int | None:
        """Dyadic level l with N = 2^l for uniform grids, else None."""
        n = self.steps
        if self.kind is not GridKind.UNIFORM or n & (n - 1):
            return None
        return n.bit_length() - 1


def _check_horizon(T: float) -> None:
    if not math.isfinite(T) or T <= 0.0:
        raise DomainError(f"horizon must be finite and > 0, got {T}")


def uniform_grid(T: float, N: int) -> TimeGrid:
    _check_horizon(T)
    if N < 1:
        raise DomainError(f"uniform grid needs N >= 1, got {N}")
    points = np.linspace(0.0, T, N + 1)
    points[-1] = T
    return TimeGrid(horizon=T, points=points, kind=GridKind.UNIFORM)


def level_grid(T: float, level: int) -> TimeGrid:
    if level < 0:
        raise DomainError(f"level must be >= 0, got {level}")
    return uniform_grid(T, 2**level)


def chebyshev_grid(T: float, N: int) -> TimeGrid:
    """Chebyshev-Lobatto nodes cos(k*pi/N), k = N..0, mapped affinely onto [0, T]."""
    _check_horizon(T)
    if N < 2:
        raise DomainError(f"chebyshev grid needs N >= 2, got {N}")
    k = np.arange(N + 1)
    # sin form of cos((N-k)pi/N): exactly antisymmetric about the midpoint
    nodes = np.sin(np.pi * (2 * k - N) / (2 * N))
    points = 0.5 * T * (1.0 + nodes)
    points[0] = 0.0
    points[-1] = T
    if N % 2 == 0:
        points[N // 2] = 0.5 * T
    return TimeGrid(horizon=T, points=points, kind=GridKind.CHEBYSHEV)


def make_grid(kind: GridKind, T: float, N: int) -> TimeGrid:
    if GridKind(kind) is GridKind.CHEBYSHEV:
        return chebyshev_grid(T, N)
    return uniform_grid(T, N)


def locate(grid: TimeGrid, t: float) -> int:
    """max{n : t_n <= t}; a time equal to a node resolves to that node."""
    if not (0.0 <= t <= grid.horizon):
        raise DomainError(f"t={t} outside [0, {grid.horizon}]")
    index = int(np.searchsorted(grid.points, t, side="right")) - 1
    return min(max(index, 0), grid.steps)


def _check_values(grid: TimeGrid, values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != grid.points.size:
        raise ShapeError(f"expected {grid.points.size} values, got {values.shape[0]}")
    return values


def interpolate_constant(grid: TimeGrid, values, t: float):
    values = _check_values(grid, values)
    return values[locate(grid, t)]


def interpolate_linear(grid: TimeGrid, values, t: float):
    values = _check_values(grid, values)
    n = locate(grid, t)
    if n == grid.steps:
        return values[n]
    t0, t1 = grid.points[n], grid.points[n + 1]
    weight = (t - t0) / (t1 - t0)
    if weight == 0.0:
        return values[n]
    return (1.0 - weight) * values[n] + weight * values[n + 1]
