"""
Brownian lattices and level-coupled increments.

The lattice stores only the finest standard Gaussians Z for M paths and 2^L
slots per path. Every coarser level is built from them by pairwise sums, so
the coarse/fine coupling holds by construction. Gaussians come from the
inverse normal CDF of counter-based Philox uniforms keyed by the seed, with
the counter's high word set to the path index: path m is addressable on its
own, whatever the chunking or thread count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from fbsdenet.config import settings
from fbsdenet.core.timegrid import TimeGrid
from fbsdenet.errors import DomainError, LatticeTooLargeError, ShapeError
from fbsdenet.monitoring.metrics import lattice_scalars

logger = logging.getLogger(__name__)

# keeps uniforms strictly inside (0, 1) for the inverse CDF
_UNIFORM_SHIFT = 2.0**-54


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def path_gaussians(seed: int, path: int, count: int) -> np.ndarray:
    """`count` standard Gaussians for one path from the (seed, path) Philox stream."""
    bit_generator = np.random.Philox(key=seed, counter=[0, 0, 0, path])
    uniforms = np.random.Generator(bit_generator).random(count) + _UNIFORM_SHIFT
    return norm.ppf(uniforms)


def _gaussian_block(seed: int, paths: int, per_path: int, dim: int) -> np.ndarray:
    if seed < 0:
        raise DomainError(f"seed must be non-negative, got {seed}")
    z = np.empty((paths, per_path, dim))
    for m in range(paths):
        z[m] = path_gaussians(seed, m, per_path * dim).reshape(per_path, dim)
    lattice_scalars.inc(z.size)
    return z


@dataclass(frozen=True)
class BrownianLattice:
    """
    Finest-level Gaussians for M paths.

    Attributes
    ----------
    max_level : int
        L; each path holds 2^L Gaussian vectors.
    batch : int
        M paths.
    dim : int
        d, Brownian dimension.
    horizon : float
        T.
    seed : int
    z : np.ndarray
        Read-only array of shape (M, 2^L, d).
    """

    max_level: int
    batch: int
    dim: int
    horizon: float
    seed: int
    z: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        """The M * 2^L Gaussian vectors in path-major order, shape (M * 2^L, d)."""
        return self.z.reshape(self.batch * 2**self.max_level, self.dim)


@dataclass(frozen=True)
class IncrementSet:
    """
    Brownian increments for M paths over N steps.

    `level` is the dyadic level for lattice-derived sets and None for sets
    sampled directly on an arbitrary grid. `lattice_seed` identifies the
    lattice the increments came from; coupled sets share it, and direct
    samples carry None.
    """

    level: int | None
    dw: np.ndarray
    dt: np.ndarray
    lattice_seed: int | None = None

    def __post_init__(self) -> None:
        if self.dw.ndim != 3:
            raise ShapeError(f"increments must have shape (M, N, d), got {self.dw.shape}")
        if self.dt.shape != (self.dw.shape[1],):
            raise ShapeError(f"dt shape {self.dt.shape} does not match {self.dw.shape[1]} steps")

    @property
    def batch(self) -> int:
        return self.dw.shape[0]

    @property
    def steps(self) -> int:
        return self.dw.shape[1]

    @property
    def dim(self) -> int:
        return self.dw.shape[2]

    def select(self, paths: slice) -> IncrementSet:
        return IncrementSet(self.level, self.dw[paths], self.dt, self.lattice_seed)


def sample_lattice(seed: int, L: int, M: int, d: int, T: float, memory_cap: int | None = None) -> BrownianLattice:
    if L < 0 or M < 1 or d < 1:
        raise DomainError(f"need L >= 0, M >= 1, d >= 1; got L={L} M={M} d={d}")
    if not math.isfinite(T) or T <= 0.0:
        raise DomainError(f"horizon must be finite and > 0, got {T}")
    cap = settings.MEMORY_CAP_SCALARS if memory_cap is None else memory_cap
    scalars = M * 2**L * d
    if scalars > cap:
        raise LatticeTooLargeError(f"lattice needs {scalars} scalars, cap is {cap}")
    z = _gaussian_block(seed, M, 2**L, d)
    logger.debug("lattice sampled seed=%d L=%d M=%d d=%d", seed, L, M, d)
    return BrownianLattice(max_level=L, batch=M, dim=d, horizon=T, seed=seed, z=_readonly(z))


def block_start(n: int, m: int, l: int, L: int) -> int:
    """kappa(n, m, l) = 2^L (m-1) + n 2^(L-l), with paths counted from m = 1."""
    return 2**L * (m - 1) + n * 2 ** (L - l)


def increments_at_level(lattice: BrownianLattice, l: int) -> IncrementSet:
    """Level-l increments: sqrt(T) 2^(-L/2) times block sums of 2^(L-l) finest Gaussians."""
    L = lattice.max_level
    if not 0 <= l <= L:
        raise DomainError(f"level {l} outside [0, {L}]")
    scale = math.sqrt(lattice.horizon) * 2.0 ** (-L / 2)
    current = IncrementSet(
        level=L,
        dw=scale * lattice.z,
        dt=np.full(2**L, lattice.horizon / 2**L),
        lattice_seed=lattice.seed,
    )
    for _ in range(L - l):
        current = coarse_from_fine(current)
    return IncrementSet(current.level, _readonly(current.dw), current.dt, current.lattice_seed)


def coarse_from_fine(fine: IncrementSet) -> IncrementSet:
    if fine.steps % 2:
        raise DomainError(f"coarsening needs an even step count, got {fine.steps}")
    level = None if fine.level is None else fine.level - 1
    return IncrementSet(
        level=level,
        dw=fine.dw[:, 0::2] + fine.dw[:, 1::2],
        dt=fine.dt[0::2] + fine.dt[1::2],
        lattice_seed=fine.lattice_seed,
    )


def antithetic_reflect(incs: IncrementSet) -> IncrementSet:
    return IncrementSet(incs.level, -incs.dw, incs.dt, incs.lattice_seed)


def antithetic_twin(fine: IncrementSet) -> IncrementSet:
    """Swap each consecutive pair (2k, 2k+1) of increments."""
    if fine.steps % 2:
        raise DomainError(f"antithetic twins need an even step count, got {fine.steps}")
    M, N, d = fine.dw.shape
    swapped = fine.dw.reshape(M, N // 2, 2, d)[:, :, ::-1, :].reshape(M, N, d)
    dt = fine.dt.reshape(N // 2, 2)[:, ::-1].reshape(N)
    return IncrementSet(fine.level, np.ascontiguousarray(swapped), np.ascontiguousarray(dt), fine.lattice_seed)


def concat_paths(first: IncrementSet, second: IncrementSet) -> IncrementSet:
    if first.dw.shape[1:] != second.dw.shape[1:] or not np.array_equal(first.dt, second.dt):
        raise ShapeError("increment sets differ in steps, dimension or step sizes")
    return IncrementSet(first.level, np.concatenate([first.dw, second.dw]), first.dt, first.lattice_seed)


def sample_increments(seed: int, grid: TimeGrid, M: int, d: int) -> IncrementSet:
    """Increments sampled directly on any grid; used where lattice coupling is undefined."""
    if M < 1 or d < 1:
        raise DomainError(f"need M >= 1 and d >= 1; got M={M} d={d}")
    z = _gaussian_block(seed, M, grid.steps, d)
    dw = np.sqrt(grid.dt)[None, :, None] * z
    return IncrementSet(level=grid.level, dw=_readonly(dw), dt=grid.dt.copy(), lattice_seed=None)


@dataclass(frozen=True)
class MartingaleStatistics:
    count: int
    mean: float
    mean_se: float
    variance: float
    expected_variance: float


def increment_square_statistics(incs: IncrementSet) -> MartingaleStatistics:
    """Sample mean and variance of dW^2 - dt, against the exact variance 2 dt^2."""
    if not np.allclose(incs.dt, incs.dt[0]):
        raise DomainError("square-increment statistics need a uniform step")
    dt = float(incs.dt[0])
    q = (incs.dw**2 - dt).ravel()
    variance = float(q.var(ddof=1))
    return MartingaleStatistics(
        count=q.size,
        mean=float(q.mean()),
        mean_se=math.sqrt(variance / q.size),
        variance=variance,
        expected_variance=2.0 * dt**2,
    )
