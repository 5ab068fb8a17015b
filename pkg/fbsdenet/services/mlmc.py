"""
Multilevel estimators and the strong-error measurement harness.

A difference compares two evaluations of u or u_hat along paths driven by
one lattice. Each side is a (level, source) pair: level None is the exact
forward process sampled on the lattice Brownian path, source None is the
exact solution u, otherwise a surrogate network. Values are compared at the
nodes of the coarser side (the exact process counts as finer than every
level), which makes every difference antisymmetric in its two sides.
"""

from __future__ import annotations

import enum
import logging
import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.stats import linregress

from fbsdenet.core.brownian import BrownianLattice, increments_at_level
from fbsdenet.core.problems import ProblemSpec
from fbsdenet.core.surrogate import DTYPE, MlpSurrogate
from fbsdenet.core.timegrid import level_grid
from fbsdenet.errors import CouplingError, DomainError, MissingDerivativeError, ShapeError
from fbsdenet.monitoring.metrics import scan_cell_duration
from fbsdenet.services.simulate import PathBundle, PathMode, PathOptions, Track, TrackPaths, exact_forward_path, generate_paths
from fbsdenet.utils.tables import frame

logger = logging.getLogger(__name__)

SCAN_COLUMNS = ["kind", "level", "dt", "n_samples", "l1_error", "l1_se", "variance", "var_se", "cost_steps"]


def terminal_value(paths: TrackPaths) -> torch.Tensor:
    return paths.y[:, -1]


def payoff(bundle: PathBundle, track: Track, functional: Callable[[TrackPaths], torch.Tensor] = terminal_value) -> np.ndarray:
    """One value per path of `functional` applied to the chosen track."""
    values = functional(bundle.track(track))
    return values.detach().numpy().astype(np.float64)


class DifferenceKind(str, enum.Enum):
    BASE = "base"
    TWO_WAY_TEMPORAL = "two_way_temporal"
    TWO_WAY_NETWORK = "two_way_network"
    TWO_WAY_MIXED = "two_way_mixed"
    FOUR_WAY = "four_way"


@dataclass(frozen=True)
class DifferenceSample:
    """
    Per-path differences at matched node times.

    values has shape (M, K) for K matched nodes whose times are `times`;
    the last node is always t = T. `level` is the finer of the two levels
    involved (None for the exact process).
    """

    kind: DifferenceKind
    level_fine: Optional[int]
    level_coarse: Optional[int]
    values: np.ndarray
    times: np.ndarray
    lattice_seed: int
    cost_steps: int = 0

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    @property
    def sup_abs(self) -> np.ndarray:
        return np.abs(self.values).max(axis=1)


def combine(first: DifferenceSample, second: DifferenceSample, kind: DifferenceKind) -> DifferenceSample:
    """first - second, for samples drawn from the same lattice on the same nodes."""
    if first.lattice_seed != second.lattice_seed:
        raise CouplingError(f"samples come from different lattices ({first.lattice_seed} vs {second.lattice_seed})")
    if first.values.shape != second.values.shape or not np.array_equal(first.times, second.times):
        raise CouplingError("samples are not evaluated at the same paths and nodes")
    return DifferenceSample(
        kind=kind,
        level_fine=first.level_fine,
        level_coarse=first.level_coarse,
        values=first.values - second.values,
        times=first.times,
        lattice_seed=first.lattice_seed,
        cost_steps=first.cost_steps + second.cost_steps,
    )


def _rank(level: Optional[int]) -> float:
    return math.inf if level is None else level


def _check_level(lattice: BrownianLattice, level: Optional[int]) -> None:
    if level is not None and not 0 <= level <= lattice.max_level:
        raise DomainError(f"level {level} outside the lattice range [0, {lattice.max_level}]")


class SideEvaluator:
    """
    Evaluates one side of a difference, u or u_hat along a level's paths.

    Results are memoised per (level, source) so scans reuse simulations.
    """

    def __init__(self, spec: ProblemSpec, lattice: BrownianLattice, chunk_size: Optional[int] = None):
        if lattice.dim != spec.dim or lattice.horizon != spec.horizon:
            raise CouplingError("lattice dimension or horizon does not match the problem")
        self.spec = spec
        self.lattice = lattice
        self.chunk_size = chunk_size
        self._cache: Dict[Tuple[int, int, int], np.ndarray] = {}

    def values(self, level: Optional[int], source: Optional[MlpSurrogate], node_level: int) -> np.ndarray:
        """Values along the side's own nodes; the exact process is sampled on level `node_level`."""
        key = (-1 if level is None else level, node_level if level is None else -1, id(source))
        if key not in self._cache:
            self._cache[key] = self._evaluate(level, source, node_level)
        return self._cache[key]

    def _evaluate(self, level: Optional[int], source: Optional[MlpSurrogate], node_level: int) -> np.ndarray:
        spec = self.spec
        if level is None:
            grid = level_grid(spec.horizon, node_level)
            increments = increments_at_level(self.lattice, node_level)
            x = exact_forward_path(spec, grid, increments)
            M, nodes, d = x.shape
            t = torch.as_tensor(grid.points, dtype=DTYPE).repeat(M)
            flat = x.reshape(M * nodes, d)
            with torch.no_grad():
                if source is None:
                    if spec.solution is None:
                        raise MissingDerivativeError(f"{spec.name}: exact u is required")
                    y = spec.solution(t, flat)
                else:
                    y = source(t, flat)
            return y.reshape(M, nodes).numpy()
        grid = level_grid(spec.horizon, level)
        increments = increments_at_level(self.lattice, level)
        mode = PathMode.EXACT_ONLY if source is None else PathMode.SURROGATE_ONLY
        track = Track.EXACT_U if source is None else Track.SURROGATE
        bundle = generate_paths(spec, grid, increments, source, PathOptions(mode=mode, chunk_size=self.chunk_size))
        return payoff(bundle, track, lambda paths: paths.y)

    def steps(self, level: Optional[int]) -> int:
        return 0 if level is None else 2**level


def _infer_kind(level_a, source_a, level_b, source_b) -> DifferenceKind:
    same_level = level_a == level_b
    same_source = source_a is source_b
    if same_level:
        return DifferenceKind.TWO_WAY_NETWORK
    if same_source:
        return DifferenceKind.TWO_WAY_TEMPORAL
    return DifferenceKind.TWO_WAY_MIXED


def _difference(
    evaluator: SideEvaluator,
    level_f: Optional[int],
    source_f: Optional[MlpSurrogate],
    level_c: Optional[int],
    source_c: Optional[MlpSurrogate],
    full_grid: bool,
    kind: Optional[DifferenceKind] = None,
) -> DifferenceSample:
    lattice = evaluator.lattice
    _check_level(lattice, level_f)
    _check_level(lattice, level_c)
    if level_f is None and level_c is None:
        raise DomainError("at least one side must be a discretised level")
    coarse_level = min(_rank(level_f), _rank(level_c))
    fine_level = max(_rank(level_f), _rank(level_c))
    coarse_level = int(coarse_level)
    # the exact process is sampled on the nodes of the comparison grid
    node_level = int(fine_level) if full_grid and fine_level != math.inf else coarse_level

    def side(level, source) -> np.ndarray:
        values = evaluator.values(level, source, node_level)
        own_level = node_level if level is None else level
        if own_level > node_level:
            return values[:, :: 2 ** (own_level - node_level)]
        if own_level < node_level:
            # piecewise-constant extension of the coarser side
            nodes = np.arange(2**node_level + 1)
            return values[:, np.minimum(nodes // 2 ** (node_level - own_level), 2**own_level)]
        return values

    values = side(level_f, source_f) - side(level_c, source_c)
    times = level_grid(lattice.horizon, node_level).points
    return DifferenceSample(
        kind=kind or _infer_kind(level_f, source_f, level_c, source_c),
        level_fine=level_f,
        level_coarse=level_c,
        values=values,
        times=np.asarray(times),
        lattice_seed=lattice.seed,
        cost_steps=lattice.batch * (evaluator.steps(level_f) + evaluator.steps(level_c)),
    )


def two_way_difference(
    spec: ProblemSpec,
    lattice: BrownianLattice,
    level_f: Optional[int],
    source_f: Optional[MlpSurrogate],
    level_c: Optional[int],
    source_c: Optional[MlpSurrogate],
    full_grid: bool = False,
    chunk_size: Optional[int] = None,
) -> DifferenceSample:
    """
    Evaluation of side f minus evaluation of side c on coupled paths.

    A side with source None evaluates u along exact-u paths, otherwise u_hat
    along the network's paths. Level None is the exact forward process.
    With full_grid the coarser side is extended piecewise-constantly onto
    the finer side's nodes instead of comparing at the coarse nodes only.
    """
    evaluator = SideEvaluator(spec, lattice, chunk_size)
    return _difference(evaluator, level_f, source_f, level_c, source_c, full_grid)


def _check_architectures(theta: MlpSurrogate, theta_prime: MlpSurrogate) -> None:
    if not theta.same_architecture(theta_prime):
        raise ShapeError(f"architectures differ: {theta.layer_dims} vs {theta_prime.layer_dims}")


def _four_way(evaluator: SideEvaluator, level_f: int, level_c: int, theta: MlpSurrogate, theta_prime: MlpSurrogate, full_grid: bool) -> DifferenceSample:
    _check_architectures(theta, theta_prime)
    primed = _difference(evaluator, level_f, theta_prime, level_c, theta_prime, full_grid)
    plain = _difference(evaluator, level_f, theta, level_c, theta, full_grid)
    return combine(primed, plain, DifferenceKind.FOUR_WAY)


def four_way_difference(
    spec: ProblemSpec,
    lattice: BrownianLattice,
    level_f: int,
    level_c: int,
    theta: MlpSurrogate,
    theta_prime: MlpSurrogate,
    full_grid: bool = False,
    chunk_size: Optional[int] = None,
) -> DifferenceSample:
    """[u_hat'(fine) - u_hat'(coarse)] - [u_hat(fine) - u_hat(coarse)], theta' the later checkpoint."""
    evaluator = SideEvaluator(spec, lattice, chunk_size)
    return _four_way(evaluator, level_f, level_c, theta, theta_prime, full_grid)


def level_sample(spec: ProblemSpec, lattice: BrownianLattice, level: int, source: Optional[MlpSurrogate] = None, chunk_size: Optional[int] = None) -> DifferenceSample:
    """Base sample: P_l itself, taken as a difference against P_{-1} = 0."""
    _check_level(lattice, level)
    evaluator = SideEvaluator(spec, lattice, chunk_size)
    values = evaluator.values(level, source, level)
    return DifferenceSample(
        kind=DifferenceKind.BASE,
        level_fine=level,
        level_coarse=None,
        values=values,
        times=np.asarray(level_grid(spec.horizon, level).points),
        lattice_seed=lattice.seed,
        cost_steps=lattice.batch * 2**level,
    )


@dataclass(frozen=True)
class LevelEstimate:
    level: int
    count: int
    total: float
    sum_squares: float
    cost: int

    @property
    def mean(self) -> float:
        return self.total / self.count

    @property
    def variance(self) -> float:
        if self.count < 2:
            return 0.0
        return max((self.sum_squares - self.total**2 / self.count) / (self.count - 1), 0.0)


@dataclass(frozen=True)
class MlmcResult:
    estimate: float
    levels: List[LevelEstimate]

    @property
    def estimator_variance(self) -> float:
        return sum(level.variance / level.count for level in self.levels)


def _sample_level(sample: DifferenceSample) -> int:
    level = sample.level_fine
    if level is None:
        raise DomainError("samples against the exact process have no multilevel index")
    return level


def mlmc_estimate(samples: Sequence[DifferenceSample]) -> MlmcResult:
    """Sum over levels of the mean terminal difference, with a per-level variance report."""
    if not samples:
        raise DomainError("no level samples")
    ordered = sorted(samples, key=_sample_level)
    levels = [_sample_level(s) for s in ordered]
    if levels[0] != 0:
        raise DomainError(f"levels must start at 0, got {levels[0]}")
    if levels != list(range(levels[0], levels[0] + len(levels))):
        raise DomainError(f"levels must be contiguous, got {levels}")
    if ordered[0].kind is not DifferenceKind.BASE:
        raise DomainError("the lowest level must be a base sample")
    for level, sample in zip(levels[1:], ordered[1:]):
        if sample.level_coarse != level - 1:
            raise DomainError(f"level {level} correction is not taken against level {level - 1}")
    seeds = {s.lattice_seed for s in ordered}
    if len(seeds) > 1:
        logger.info("mlmc estimate over independent lattices seeds=%s", sorted(seeds))
    estimates = []
    for level, sample in zip(levels, ordered):
        if sample.n_samples == 0:
            raise DomainError(f"level {level} has no samples")
        terminal = sample.terminal.astype(np.float64)
        estimates.append(LevelEstimate(
            level=level,
            count=terminal.size,
            total=float(terminal.sum()),
            sum_squares=float((terminal**2).sum()),
            cost=sample.cost_steps,
        ))
    result = MlmcResult(estimate=sum(e.mean for e in estimates), levels=estimates)
    logger.info(
        "mlmc estimate=%.6e estimator_variance=%.3e levels=%d", result.estimate, result.estimator_variance, len(estimates)
    )
    return result


class StrongErrorNorm(str, enum.Enum):
    L1_TERMINAL = "l1_terminal"
    L2_TERMINAL = "l2_terminal"
    SUP_OUTSIDE_L2 = "sup_outside_l2"
    SUP_INSIDE_L2 = "sup_inside_l2"
    SUP_INSIDE_LP = "sup_inside_lp"


def strong_error(exact, approx, norm: StrongErrorNorm, p: float = 2.0) -> float:
    """
    Strong error over paths (axis 0) and nodes (axis 1), reported as a norm.

    The L2 variants return (E|.|^2)^(1/2) and the Lp variant (E sup|.|^p)^(1/p),
    so every variant shares the convergence order of the error itself.
    """
    exact = np.asarray(exact, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if exact.shape != approx.shape:
        raise ShapeError(f"shapes differ: {exact.shape} vs {approx.shape}")
    norm = StrongErrorNorm(norm)
    if norm is StrongErrorNorm.SUP_INSIDE_LP and p < 1.0:
        raise DomainError(f"p must be >= 1, got {p}")
    error = np.abs(exact - approx)
    if error.ndim == 1:
        error = error[:, None]
    if norm is StrongErrorNorm.L1_TERMINAL:
        return float(error[:, -1].mean())
    if norm is StrongErrorNorm.L2_TERMINAL:
        return float(np.sqrt((error[:, -1] ** 2).mean()))
    if norm is StrongErrorNorm.SUP_OUTSIDE_L2:
        return float(np.sqrt((error**2).mean(axis=0).max()))
    if norm is StrongErrorNorm.SUP_INSIDE_L2:
        return float(np.sqrt((error.max(axis=1) ** 2).mean()))
    return float(((error.max(axis=1) ** p).mean()) ** (1.0 / p))


@dataclass(frozen=True)
class ConvergenceFit:
    slope: float
    intercept: float
    r_squared: float

    @property
    def order(self) -> float:
        """Order in dt for dyadic levels (dt = T 2^-l)."""
        return -self.slope


def convergence_fit(levels, errors) -> ConvergenceFit:
    """Least-squares line through (level, log2 error)."""
    levels = np.asarray(levels, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if levels.shape != errors.shape:
        raise ShapeError("levels and errors differ in length")
    if levels.size < 3:
        raise DomainError(f"a fit needs at least 3 levels, got {levels.size}")
    if np.any(~np.isfinite(errors)) or np.any(errors <= 0.0):
        raise DomainError("errors must be positive and finite")
    log_errors = np.log2(errors)
    if np.ptp(log_errors) == 0.0:
        return ConvergenceFit(slope=0.0, intercept=float(log_errors[0]), r_squared=1.0)
    result = linregress(levels, log_errors)
    return ConvergenceFit(slope=float(result.slope), intercept=float(result.intercept), r_squared=float(result.rvalue**2))


class Marker(str, enum.Enum):
    """Difference rows of the variance-structure scan; `symbol` is the plot marker."""

    FILLED_CIRCLE = "filled_circle"
    CIRCLE = "circle"
    SQUARE = "square"
    FILLED_TRIANGLE = "filled_triangle"
    TRIANGLE_DOWN = "triangle_down"
    TRIANGLE_UP = "triangle_up"
    TRIANGLE_UP_MIXED = "triangle_up_mixed"
    DIAMOND = "diamond"

    @property
    def symbol(self) -> str:
        return _SYMBOLS[self]


_SYMBOLS = {
    Marker.FILLED_CIRCLE: "●",
    Marker.CIRCLE: "○",
    Marker.SQUARE: "□",
    Marker.FILLED_TRIANGLE: "▲",
    Marker.TRIANGLE_DOWN: "▽",
    Marker.TRIANGLE_UP: "△",
    Marker.TRIANGLE_UP_MIXED: "(△)",
    Marker.DIAMOND: "◇",
}

# fine-level offset over the row's level, and the checkpoints the row needs
_MARKER_NEEDS = {
    Marker.FILLED_CIRCLE: (0, 1),
    Marker.CIRCLE: (0, 0),
    Marker.SQUARE: (1, 0),
    Marker.FILLED_TRIANGLE: (0, 1),
    Marker.TRIANGLE_DOWN: (1, 1),
    Marker.TRIANGLE_UP: (0, 2),
    Marker.TRIANGLE_UP_MIXED: (1, 2),
    Marker.DIAMOND: (1, 2),
}


def marker_difference(
    evaluator: SideEvaluator,
    marker: Marker,
    level: int,
    checkpoints: Sequence[MlpSurrogate],
    full_grid: bool = False,
) -> DifferenceSample:
    """
    The difference behind one scan row at coarse level `level` (fine = level + 1).

    circle         u(X_t) - u(X^c)            filled_circle     u(X^c) - u_hat(X^c,theta)
    square         u(X^f) - u(X^c)            filled_triangle   u(X_t) - u_hat(X^c,theta)
    triangle_down  u_hat(X^f,theta) - u_hat(X^c,theta)
    triangle_up    u_hat'(X^c,theta') - u_hat(X^c,theta)
    triangle_up_mixed  u_hat'(X^f,theta') - u_hat(X^c,theta)
    diamond        four-way difference of theta' and theta across f and c
    """
    theta = checkpoints[0] if checkpoints else None
    theta_prime = checkpoints[1] if len(checkpoints) > 1 else None
    fine = level + 1
    K = DifferenceKind
    if marker is Marker.CIRCLE:
        return _difference(evaluator, None, None, level, None, full_grid, K.TWO_WAY_TEMPORAL)
    if marker is Marker.SQUARE:
        return _difference(evaluator, fine, None, level, None, full_grid, K.TWO_WAY_TEMPORAL)
    if marker is Marker.FILLED_CIRCLE:
        return _difference(evaluator, level, None, level, theta, full_grid, K.TWO_WAY_NETWORK)
    if marker is Marker.FILLED_TRIANGLE:
        return _difference(evaluator, None, None, level, theta, full_grid, K.TWO_WAY_MIXED)
    if marker is Marker.TRIANGLE_DOWN:
        return _difference(evaluator, fine, theta, level, theta, full_grid, K.TWO_WAY_TEMPORAL)
    if marker is Marker.TRIANGLE_UP:
        _check_architectures(theta, theta_prime)
        return _difference(evaluator, level, theta_prime, level, theta, full_grid, K.TWO_WAY_NETWORK)
    if marker is Marker.TRIANGLE_UP_MIXED:
        _check_architectures(theta, theta_prime)
        return _difference(evaluator, fine, theta_prime, level, theta, full_grid, K.TWO_WAY_MIXED)
    return _four_way(evaluator, fine, level, theta, theta_prime, full_grid)


def _skip_reason(spec: ProblemSpec, lattice: BrownianLattice, marker: Marker, level: int, n_checkpoints: int) -> Optional[str]:
    offset, needed = _MARKER_NEEDS[marker]
    if n_checkpoints < needed:
        return f"needs {needed} checkpoint(s), got {n_checkpoints}"
    if level + offset > lattice.max_level:
        return f"fine level {level + offset} exceeds lattice level {lattice.max_level}"
    if marker in (Marker.CIRCLE, Marker.SQUARE, Marker.FILLED_CIRCLE, Marker.FILLED_TRIANGLE) and spec.solution is None:
        return "needs the exact solution u"
    if marker in (Marker.CIRCLE, Marker.FILLED_TRIANGLE) and spec.exact_state is None:
        return "needs the exact forward process"
    return None


def _variance_se(values: np.ndarray) -> Tuple[float, float]:
    n = values.size
    variance = float(values.var(ddof=1)) if n > 1 else 0.0
    if n < 4:
        return variance, float("nan")
    central = values - values.mean()
    m4 = float((central**4).mean())
    spread = max(m4 - variance**2 * (n - 3) / (n - 1), 0.0)
    return variance, math.sqrt(spread / n)


def variance_structure_scan(
    spec: ProblemSpec,
    lattice: BrownianLattice,
    checkpoints: Sequence[MlpSurrogate],
    levels: Sequence[int],
    markers: Sequence[Marker] = tuple(Marker),
    full_grid: bool = False,
    chunk_size: Optional[int] = None,
) -> pd.DataFrame:
    """
    L1 strong error E(sup_n |difference|) and terminal variance per (marker, level).

    Rows whose sources are missing are skipped with a warning. All rows share
    the one lattice; simulations are memoised across rows.
    """
    evaluator = SideEvaluator(spec, lattice, chunk_size)
    rows = []
    for marker in (Marker(m) for m in markers):
        for level in sorted(set(int(l) for l in levels)):
            reason = _skip_reason(spec, lattice, marker, level, len(checkpoints))
            if reason:
                message = f"variance scan row skipped kind={marker.value} level={level}: {reason}"
                logger.warning(message)
                warnings.warn(message, RuntimeWarning, stacklevel=2)
                continue
            start = time.time()
            sample = marker_difference(evaluator, marker, level, checkpoints, full_grid)
            scan_cell_duration.observe(time.time() - start)
            sup = sample.sup_abs
            variance, var_se = _variance_se(sample.terminal)
            rows.append({
                "kind": marker.value,
                "level": level,
                "dt": spec.horizon / 2**level,
                "n_samples": sample.n_samples,
                "l1_error": float(sup.mean()),
                "l1_se": float(sup.std(ddof=1) / math.sqrt(sup.size)) if sup.size > 1 else float("nan"),
                "variance": variance,
                "var_se": var_se,
                "cost_steps": sample.cost_steps,
            })
            logger.info("variance scan kind=%s level=%d l1=%.6e", marker.value, level, rows[-1]["l1_error"])
    return frame(rows, SCAN_COLUMNS)


def scan_fits(scan: pd.DataFrame) -> Dict[str, ConvergenceFit]:
    fits = {}
    for kind, rows in scan.groupby("kind", sort=False):
        errors = rows["l1_error"].to_numpy()
        if len(rows) >= 3 and np.all(errors > 0.0):
            fits[kind] = convergence_fit(rows["level"].to_numpy(), errors)
    return fits


def scan_with_fit_rows(scan: pd.DataFrame) -> pd.DataFrame:
    """Append a 'fit' row per kind: slope in l1_error, r^2 in l1_se, intercept in variance."""
    rows = []
    for kind, fit in scan_fits(scan).items():
        rows.append({
            "kind": kind,
            "level": "fit",
            "dt": np.nan,
            "n_samples": np.nan,
            "l1_error": fit.slope,
            "l1_se": fit.r_squared,
            "variance": fit.intercept,
            "var_se": np.nan,
            "cost_steps": np.nan,
        })
    if not rows:
        return scan
    return pd.concat([scan.astype({"level": object}), frame(rows, SCAN_COLUMNS)], ignore_index=True)


def plateau_detected(errors: Sequence[float], last: int = 3, threshold: float = 2.0**-0.15) -> bool:
    """True when every level-to-level ratio over the last `last` levels exceeds `threshold`."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size < last:
        raise DomainError(f"need at least {last} levels, got {errors.size}")
    tail = errors[-last:]
    return bool(np.all(tail[1:] / tail[:-1] > threshold))
