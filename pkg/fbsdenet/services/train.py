"""
Training procedures.

Single-level training runs K Adam iterations at N = 2^L steps, either on one
fixed lattice or on a fresh lattice per iteration. Multilevel-inspired
training samples one lattice at level L and walks l = 0..L, warm-starting
each level from the previous level's parameters. Two-level telescoping trains
a coarse and a fine copy of one prior independently on one shared lattice, so
mean(f(theta_c)) + mean(f(theta_f) - f(theta_c)) estimates mean(f(theta_f)).
Warm starting alone (theta_f trained from theta_c) does not have that form.
"""

from __future__ import annotations

import copy
import enum
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from fbsdenet.core.brownian import (
    BrownianLattice,
    IncrementSet,
    antithetic_reflect,
    antithetic_twin,
    concat_paths,
    increments_at_level,
    sample_increments,
    sample_lattice,
)
from fbsdenet.core.problems import ProblemSpec, epsilon_theta_estimate, evaluation_cloud
from fbsdenet.core.surrogate import AdamState, MlpSurrogate, adam_step, flat_parameters, parameter_gradient
from fbsdenet.core.timegrid import GridKind, TimeGrid, level_grid, make_grid
from fbsdenet.errors import DomainError, NumericalAbort, ShapeError
from fbsdenet.monitoring.metrics import numerical_aborts, training_iterations, training_loss, training_step_duration
from fbsdenet.services.loss import GradientTarget, LossOptions, LossVariant, compute_loss
from fbsdenet.services.simulate import PathMode, PathOptions, generate_paths
from fbsdenet.utils.hashing import derive_seed
from fbsdenet.utils.tables import frame
from fbsdenet.workers.pool import chunk_slices, map_ordered

logger = logging.getLogger(__name__)


class Antithetic(str, enum.Enum):
    NONE = "none"
    # append the negated batch
    REFLECT = "reflect"
    # append the batch with consecutive increment pairs swapped
    TWIN = "twin"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_level: int = 4
    iterations: int = 2000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossVariant = LossVariant.PATHWISE
    # None: resample for single-level training, fixed paths for the multilevel procedure
    resample_paths: Optional[bool] = None
    seed: int = 0
    grid_kind: GridKind = GridKind.UNIFORM
    terminal_gradient_weight: float = 1.0
    terminal_gradient_target: GradientTarget = GradientTarget.GRADIENT
    antithetic: Antithetic = Antithetic.NONE
    weighted_loss: bool = False
    chunk_size: Optional[int] = None
    divergence_factor: float = 1e6
    eval_points: int = 10_000
    eval_box: Tuple[float, float] = (0.5, 2.0)
    eval_seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_level < 0 or self.iterations < 0:
            raise DomainError("max_level and iterations must be non-negative")
        if self.learning_rate <= 0.0:
            raise DomainError(f"learning_rate must be > 0, got {self.learning_rate}")

    def loss_options(self) -> LossOptions:
        return LossOptions(
            terminal_gradient_weight=self.terminal_gradient_weight,
            terminal_gradient_target=self.terminal_gradient_target,
            weighted=self.weighted_loss,
        )


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    level: int
    loss: float


@dataclass
class LevelSegment:
    level: int
    start: int
    stop: int
    wall_ms: float
    entry_parameters: torch.Tensor
    exit_parameters: torch.Tensor

    @property
    def iterations(self) -> int:
        return self.stop - self.start


@dataclass
class TrainReport:
    history: List[LossRecord] = field(default_factory=list)
    segments: List[LevelSegment] = field(default_factory=list)
    epsilon_initial: Optional[float] = None
    epsilon_final: Optional[float] = None
    lattice: Optional[BrownianLattice] = None
    checkpoint: Optional[Path] = None

    @property
    def iterations(self) -> int:
        return len(self.history)

    def history_frame(self) -> pd.DataFrame:
        return frame(
            ({"iteration": r.iteration, "level": r.level, "loss": r.loss} for r in self.history),
            ["iteration", "level", "loss"],
        )

    def timings_frame(self) -> pd.DataFrame:
        return frame(
            ({"level": s.level, "iterations": s.iterations, "wall_ms": s.wall_ms} for s in self.segments),
            ["level", "iterations", "wall_ms"],
        )


def _augment(increments: IncrementSet, antithetic: Antithetic) -> IncrementSet:
    if antithetic is Antithetic.REFLECT:
        return concat_paths(increments, antithetic_reflect(increments))
    if antithetic is Antithetic.TWIN:
        return concat_paths(increments, antithetic_twin(increments))
    return increments


def _effective_antithetic(config: TrainConfig, steps: int) -> Antithetic:
    antithetic = Antithetic(config.antithetic)
    if antithetic is Antithetic.TWIN and steps % 2:
        logger.warning("antithetic twins need an even step count, batch not augmented steps=%d", steps)
        return Antithetic.NONE
    return antithetic


def loss_and_gradient(
    spec: ProblemSpec, net: MlpSurrogate, grid: TimeGrid, increments: IncrementSet, config: TrainConfig
) -> Tuple[float, torch.Tensor]:
    """Batch loss and its parameter gradient, reduced over fixed path chunks in chunk order."""
    options = config.loss_options()

    def work(chunk: slice) -> Tuple[torch.Tensor, torch.Tensor]:
        part = increments.select(chunk)
        bundle = generate_paths(spec, grid, part, net, PathOptions(mode=PathMode.SURROGATE_ONLY, record_graph=True))
        total = compute_loss(config.loss, bundle, spec, part, net, options).total
        if not torch.isfinite(total):
            numerical_aborts.labels(reason="non_finite_loss").inc()
            raise NumericalAbort(f"non-finite loss on paths {chunk.start}..{chunk.stop - 1}")
        return total.detach(), parameter_gradient(net, total)

    results = map_ordered(work, chunk_slices(increments.batch, config.chunk_size))
    loss, grads = results[0]
    for part_loss, part_grads in results[1:]:
        loss = loss + part_loss
        grads = grads + part_grads
    return float(loss), grads


class _Trainer:
    """Shared iteration loop: records history, guards divergence, tracks metrics."""

    def __init__(self, spec: ProblemSpec, net: MlpSurrogate, config: TrainConfig, report: TrainReport):
        if net.dim != spec.dim:
            raise ShapeError(f"network input dimension {net.dim} does not match d={spec.dim}")
        self.spec = spec
        self.net = net
        self.config = config
        self.report = report
        self.initial_loss: Optional[float] = None

    def new_state(self) -> AdamState:
        c = self.config
        return AdamState(self.net.parameters(), c.learning_rate, c.beta1, c.beta2, c.adam_eps)

    def step(self, state: AdamState, grid: TimeGrid, increments: IncrementSet, level: int) -> float:
        start = time.time()
        loss, grads = loss_and_gradient(self.spec, self.net, grid, increments, self.config)
        if self.initial_loss is None:
            self.initial_loss = loss
        elif loss > self.config.divergence_factor * max(self.initial_loss, np.finfo(float).tiny):
            numerical_aborts.labels(reason="divergence").inc()
            raise NumericalAbort(
                f"training diverged level={level} iteration={len(self.report.history)} "
                f"loss={loss:.6e} initial={self.initial_loss:.6e}"
            )
        self.report.history.append(LossRecord(iteration=len(self.report.history), level=level, loss=loss))
        adam_step(state, list(self.net.parameters()), grads)
        training_iterations.inc()
        training_loss.set(loss)
        training_step_duration.observe(time.time() - start)
        return loss

    def segment(self, level: int, iterations: int, grid: TimeGrid, batches: Callable[[int], IncrementSet]) -> None:
        entry = flat_parameters(self.net)
        begin = len(self.report.history)
        started = time.time()
        state = self.new_state()
        for k in range(iterations):
            loss = self.step(state, grid, batches(k), level)
            if k % 100 == 0:
                logger.info("training level=%d iteration=%d loss=%.6e", level, begin + k, loss)
        self.report.segments.append(LevelSegment(
            level=level,
            start=begin,
            stop=len(self.report.history),
            wall_ms=1000.0 * (time.time() - started),
            entry_parameters=entry,
            exit_parameters=flat_parameters(self.net),
        ))

    def measure_epsilon(self) -> Optional[float]:
        if self.spec.solution is None:
            return None
        c = self.config
        cloud = evaluation_cloud(self.spec, c.eval_points, c.eval_box[0], c.eval_box[1], seed=c.eval_seed)
        return epsilon_theta_estimate(self.spec, self.net, cloud)


def _check_lattice(lattice: BrownianLattice, spec: ProblemSpec, config: TrainConfig) -> None:
    if lattice.max_level < config.max_level or lattice.batch != config.batch_size or lattice.dim != spec.dim:
        raise DomainError("supplied lattice does not cover the configured level, batch size or dimension")


def train_single_level(
    spec: ProblemSpec, net: MlpSurrogate, config: TrainConfig, lattice: Optional[BrownianLattice] = None
) -> TrainReport:
    """
    K iterations at N = 2^L. With a supplied lattice, or resample_paths false,
    every iteration uses the same increments; otherwise iteration k draws a
    fresh batch from the seed derived from (seed, k).
    """
    L, M, d, T = config.max_level, config.batch_size, spec.dim, spec.horizon
    grid = make_grid(config.grid_kind, T, 2**L) if 2**L >= 2 else level_grid(T, L)
    uniform = grid.kind is GridKind.UNIFORM
    resample = config.resample_paths if config.resample_paths is not None else True
    if lattice is not None:
        _check_lattice(lattice, spec, config)
        if not uniform:
            raise DomainError("a shared lattice needs a uniform grid")
        resample = False
    antithetic = _effective_antithetic(config, grid.steps)

    report = TrainReport()
    trainer = _Trainer(spec, net, config, report)
    report.epsilon_initial = trainer.measure_epsilon()

    if resample:
        def batches(k: int) -> IncrementSet:
            seed_k = derive_seed(config.seed, k)
            if uniform:
                fresh = increments_at_level(sample_lattice(seed_k, L, M, d, T), L)
            else:
                fresh = sample_increments(seed_k, grid, M, d)
            return _augment(fresh, antithetic)
    else:
        if uniform:
            lattice = lattice or sample_lattice(config.seed, L, M, d, T)
            fixed = increments_at_level(lattice, L)
        else:
            fixed = sample_increments(config.seed, grid, M, d)
        fixed = _augment(fixed, antithetic)
        report.lattice = lattice

        def batches(k: int) -> IncrementSet:
            return fixed

    logger.info("single-level training L=%d M=%d K=%d resample=%s", L, M, config.iterations, resample)
    trainer.segment(L, config.iterations, grid, batches)
    report.epsilon_final = trainer.measure_epsilon()
    return report


def level_iterations(K: int, L: int) -> List[int]:
    """floor(K / (L+1)) per level, the remainder appended to the finest level."""
    share, remainder = divmod(K, L + 1)
    return [share] * L + [share + remainder]


def train_multilevel_inspired(
    spec: ProblemSpec, net: MlpSurrogate, config: TrainConfig, lattice: Optional[BrownianLattice] = None
) -> TrainReport:
    """One lattice sampled once; level l = 0..L trains at N = 2^l from the previous level's parameters."""
    L, M, d, T = config.max_level, config.batch_size, spec.dim, spec.horizon
    if GridKind(config.grid_kind) is not GridKind.UNIFORM:
        raise DomainError("multilevel training needs dyadic uniform grids")
    if config.iterations < L + 1:
        raise DomainError(f"need at least L+1 = {L + 1} iterations, got {config.iterations}")
    if config.resample_paths:
        raise DomainError("multilevel training samples its lattice once; resample_paths must be false")
    if lattice is None:
        lattice = sample_lattice(config.seed, L, M, d, T)
    else:
        _check_lattice(lattice, spec, config)

    report = TrainReport(lattice=lattice)
    trainer = _Trainer(spec, net, config, report)
    report.epsilon_initial = trainer.measure_epsilon()
    for level, iterations in enumerate(level_iterations(config.iterations, L)):
        grid = level_grid(T, level)
        increments = _augment(increments_at_level(lattice, level), _effective_antithetic(config, grid.steps))
        logger.info("multilevel training level=%d N=%d iterations=%d", level, grid.steps, iterations)
        trainer.segment(level, iterations, grid, lambda k, increments=increments: increments)
    report.epsilon_final = trainer.measure_epsilon()
    return report


@dataclass
class TelescopingResult:
    coarse: MlpSurrogate
    fine: MlpSurrogate
    coarse_report: TrainReport
    fine_report: TrainReport
    difference: torch.Tensor


def train_two_level_telescoping(
    spec: ProblemSpec,
    prior: MlpSurrogate,
    coarse: TrainConfig,
    fine: TrainConfig,
    lattice: Optional[BrownianLattice] = None,
) -> TelescopingResult:
    """Train coarse and fine copies of `prior` independently on one shared lattice."""
    if prior.dim != spec.dim:
        raise ShapeError(f"prior input dimension {prior.dim} does not match d={spec.dim}")
    if coarse.batch_size != fine.batch_size:
        raise DomainError("coarse and fine training must share the lattice batch size")
    if lattice is None:
        top = max(coarse.max_level, fine.max_level)
        lattice = sample_lattice(fine.seed, top, fine.batch_size, spec.dim, spec.horizon)
    coarse_net = copy.deepcopy(prior)
    fine_net = copy.deepcopy(prior)
    coarse_report = train_single_level(spec, coarse_net, coarse, lattice=lattice)
    fine_report = train_single_level(spec, fine_net, fine, lattice=lattice)
    return TelescopingResult(
        coarse=coarse_net,
        fine=fine_net,
        coarse_report=coarse_report,
        fine_report=fine_report,
        difference=flat_parameters(fine_net) - flat_parameters(coarse_net),
    )


def telescoping_replicas(
    spec: ProblemSpec,
    make_prior: Callable[[int], MlpSurrogate],
    coarse: TrainConfig,
    fine: TrainConfig,
    replicas: int,
    seed: int,
) -> List[TelescopingResult]:
    """Independent replicas, each with its own prior and lattice seeds derived from (seed, r)."""

    def run(r: int) -> TelescopingResult:
        lattice_seed = derive_seed(seed, r, 1)
        return train_two_level_telescoping(
            spec,
            make_prior(derive_seed(seed, r, 0)),
            replace(coarse, seed=lattice_seed),
            replace(fine, seed=lattice_seed),
        )

    return map_ordered(run, range(replicas))


@dataclass(frozen=True)
class TelescopingEstimate:
    coarse_mean: float
    correction_mean: float
    fine_mean: float

    @property
    def estimate(self) -> float:
        return self.coarse_mean + self.correction_mean


def telescoping_estimate(
    results: Sequence[TelescopingResult], functional: Callable[[MlpSurrogate], float]
) -> TelescopingEstimate:
    """mean f(theta_c) + mean (f(theta_f) - f(theta_c)) over replicas."""
    if not results:
        raise DomainError("no replicas")
    coarse = np.array([float(functional(r.coarse)) for r in results])
    fine = np.array([float(functional(r.fine)) for r in results])
    return TelescopingEstimate(
        coarse_mean=float(coarse.mean()),
        correction_mean=float((fine - coarse).mean()),
        fine_mean=float(fine.mean()),
    )
