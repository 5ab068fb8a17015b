"""
Training losses and their diagnostics.

The pathwise loss sums, over paths and steps, the squared mismatch between
the Euler-Maruyama backward step and the next stored value,
    Y_{n+1} - Y_n - phi_n dt_n - Z_n . dW_n,
plus the squared terminal mismatch Y_N - g(X_N). The driver is evaluated at
step-n states. The higher-order variant subtracts b^2 H (dW^2 - dt) / 2 from
every residual, H being the spatial Hessian of the solution source.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from fbsdenet.core.brownian import IncrementSet, increments_at_level, sample_lattice
from fbsdenet.core.problems import ExactSolution, ProblemSpec, SolutionSource, SurrogateSolution
from fbsdenet.core.surrogate import DTYPE, MlpSurrogate
from fbsdenet.core.timegrid import TimeGrid, level_grid
from fbsdenet.errors import DomainError, MissingDerivativeError, ShapeError, UnsupportedOperationError
from fbsdenet.services.mlmc import ConvergenceFit, convergence_fit
from fbsdenet.services.simulate import PathBundle, PathMode, PathOptions, Track, TrackPaths, em_backward_step, em_forward_step, generate_paths
from fbsdenet.utils.tables import frame

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

SCAN_COLUMNS = ["level", "dt", "variant", "mean_signed", "se_signed", "mean_abs", "se_abs"]
REMAINDER_COLUMNS = ["path", "step", "t", "r1", "r2", "r3", "r4", "r5", "r6", "r_tail", "residual"]


class GradientTarget(str, enum.Enum):
    # compare Z_N with grad g(X_N)
    GRADIENT = "gradient"
    # compare Z_N with b(T, X_N, Y_N)^T grad g(X_N)
    HIDDEN = "hidden"


class LossVariant(str, enum.Enum):
    PATHWISE = "pathwise"
    PATHWISE_PLUS_TERMINAL_GRAD = "pathwise_terminal_grad"
    HIGHER_ORDER = "higher_order"


@dataclass(frozen=True)
class LossOptions:
    track: Track = Track.SURROGATE
    terminal_gradient_weight: float = 0.0
    terminal_gradient_target: GradientTarget = GradientTarget.GRADIENT
    # scale each squared residual by dt_n / (T / N)
    weighted: bool = False


@dataclass
class LossBreakdown:
    per_step_residuals: Tensor
    terminal_term: Tensor
    terminal_gradient_term: Optional[Tensor]
    total: Tensor
    terminal_gradient_weight: float = 0.0

    @property
    def value(self) -> float:
        return float(self.total.detach())


def _check_shapes(bundle: PathBundle, increments: IncrementSet, paths: TrackPaths) -> None:
    M, nodes, d = paths.x.shape
    if increments.dw.shape != (M, nodes - 1, d):
        raise ShapeError(f"increments {increments.dw.shape} do not match paths {(M, nodes - 1, d)}")
    if nodes != bundle.grid.points.size:
        raise ShapeError(f"paths have {nodes} nodes, grid has {bundle.grid.points.size}")


def _flat_steps(grid: TimeGrid, paths: TrackPaths):
    """Step-n states flattened over (path, step): t (M N,), x (M N, d), y (M N,), z (M N, d)."""
    M, nodes, d = paths.x.shape
    N = nodes - 1
    t = torch.as_tensor(grid.points[:-1], dtype=DTYPE).repeat(M)
    return (
        t,
        paths.x[:, :-1].reshape(M * N, d),
        paths.y[:, :-1].reshape(M * N),
        paths.z[:, :-1].reshape(M * N, d),
    )


def one_step_residuals(bundle: PathBundle, spec: ProblemSpec, increments: IncrementSet, track: Track = Track.SURROGATE) -> Tensor:
    """Y_{n+1} - Y_n - phi_n dt_n - Z_n . dW_n, shape (M, N)."""
    paths = bundle.track(track)
    _check_shapes(bundle, increments, paths)
    M, nodes, d = paths.x.shape
    t, x, y, z = _flat_steps(bundle.grid, paths)
    phi = spec.driver(t, x, y, z).reshape(M, nodes - 1)
    dt = torch.as_tensor(bundle.grid.dt, dtype=DTYPE)
    dw = torch.as_tensor(increments.dw, dtype=DTYPE)
    return paths.y[:, 1:] - paths.y[:, :-1] - phi * dt - (paths.z[:, :-1] * dw).sum(-1)


def hessian_correction(bundle: PathBundle, spec: ProblemSpec, increments: IncrementSet, source: SolutionSource, track: Track = Track.SURROGATE) -> Tensor:
    """b^2 H (dW^2 - dt) / 2 at every step, shape (M, N); one-dimensional problems only."""
    if spec.dim != 1:
        raise UnsupportedOperationError(f"the higher-order loss is one-dimensional, problem has d={spec.dim}")
    paths = bundle.track(track)
    M, nodes, _ = paths.x.shape
    t, x, y, _ = _flat_steps(bundle.grid, paths)
    b = spec.diffusion(t, x, y)[:, 0, 0].reshape(M, nodes - 1)
    hessian = source.hessian(t, x)[:, 0, 0].reshape(M, nodes - 1)
    dt = torch.as_tensor(bundle.grid.dt, dtype=DTYPE)
    dw = torch.as_tensor(increments.dw[:, :, 0], dtype=DTYPE)
    return 0.5 * b**2 * hessian * (dw**2 - dt)


def terminal_gradient_term(
    bundle: PathBundle,
    spec: ProblemSpec,
    track: Track = Track.SURROGATE,
    target: GradientTarget = GradientTarget.GRADIENT,
) -> Tensor:
    """Sum over paths of ||Z_N - grad g(X_N)||^2 (or of the hidden-process target)."""
    if spec.terminal_gradient is None:
        raise MissingDerivativeError(f"{spec.name}: grad g is not available")
    paths = bundle.track(track)
    x_T, y_T, z_T = paths.x[:, -1], paths.y[:, -1], paths.z[:, -1]
    expected = spec.terminal_gradient(x_T)
    if GradientTarget(target) is GradientTarget.HIDDEN:
        t_T = torch.full((x_T.shape[0],), bundle.grid.horizon, dtype=DTYPE)
        expected = torch.einsum("mji,mj->mi", spec.diffusion(t_T, x_T, y_T), expected)
    return ((z_T - expected) ** 2).sum()


def _assemble(
    residuals: Tensor, bundle: PathBundle, spec: ProblemSpec, options: LossOptions
) -> LossBreakdown:
    paths = bundle.track(options.track)
    terminal = ((paths.y[:, -1] - spec.terminal(paths.x[:, -1])) ** 2).sum()
    squares = residuals**2
    if options.weighted:
        grid = bundle.grid
        weights = torch.as_tensor(grid.dt * grid.steps / grid.horizon, dtype=DTYPE)
        squares = squares * weights
    total = squares.sum() + terminal
    gradient_term = None
    weight = options.terminal_gradient_weight
    if weight > 0.0:
        if spec.terminal_gradient is None:
            message = f"{spec.name}: grad g unavailable, terminal-gradient term disabled"
            logger.warning(message)
            warnings.warn(message, RuntimeWarning, stacklevel=3)
            weight = 0.0
        else:
            gradient_term = terminal_gradient_term(bundle, spec, options.track, options.terminal_gradient_target)
            total = total + weight * gradient_term
    return LossBreakdown(
        per_step_residuals=residuals,
        terminal_term=terminal,
        terminal_gradient_term=gradient_term,
        total=total,
        terminal_gradient_weight=weight,
    )


def pathwise_loss(bundle: PathBundle, spec: ProblemSpec, increments: IncrementSet, options: LossOptions = LossOptions()) -> LossBreakdown:
    residuals = one_step_residuals(bundle, spec, increments, options.track)
    return _assemble(residuals, bundle, spec, options)


def _as_source(source: Union[MlpSurrogate, SolutionSource]) -> SolutionSource:
    if isinstance(source, MlpSurrogate):
        return SurrogateSolution(source, record=True)
    return source


def higher_order_loss(
    bundle: PathBundle,
    spec: ProblemSpec,
    increments: IncrementSet,
    net: Union[MlpSurrogate, SolutionSource],
    options: LossOptions = LossOptions(),
) -> LossBreakdown:
    source = _as_source(net)
    residuals = one_step_residuals(bundle, spec, increments, options.track)
    residuals = residuals - hessian_correction(bundle, spec, increments, source, options.track)
    return _assemble(residuals, bundle, spec, options)


def compute_loss(
    variant: LossVariant,
    bundle: PathBundle,
    spec: ProblemSpec,
    increments: IncrementSet,
    net: MlpSurrogate,
    options: LossOptions = LossOptions(),
) -> LossBreakdown:
    """Dispatch on the variant; only PATHWISE_PLUS_TERMINAL_GRAD keeps the terminal-gradient weight."""
    variant = LossVariant(variant)
    if variant is not LossVariant.PATHWISE_PLUS_TERMINAL_GRAD:
        options = replace(options, terminal_gradient_weight=0.0)
    if variant is LossVariant.HIGHER_ORDER:
        return higher_order_loss(bundle, spec, increments, net, options)
    return pathwise_loss(bundle, spec, increments, options)


@dataclass
class RemainderReport:
    """Per-path remainder terms of one backward step; r_tail lumps everything beyond r6."""

    r1: Tensor
    r2: Tensor
    r3: Tensor
    r4: Tensor
    r5: Tensor
    r6: Tensor
    r_tail: Tensor
    residual: Tensor

    def explicit_sum(self) -> Tensor:
        return self.r1 + self.r2 + self.r3 + self.r4 + self.r5 + self.r6


def remainder_decomposition(
    spec: ProblemSpec,
    net: Union[MlpSurrogate, SolutionSource],
    t_n: float,
    x: Tensor,
    y: Tensor,
    z: Tensor,
    dt: float,
    dw: Tensor,
) -> RemainderReport:
    """
    Split Y_EM_{n+1} - u_hat(t_{n+1}, X_{n+1}) into its Taylor remainders (d = 1).

    Y_EM is the Euler-Maruyama backward step from (X, Y, Z) and X_{n+1} the
    forward step. r_tail is defined by subtraction, so the terms add up to the
    residual by construction.
    """
    if spec.dim != 1:
        raise UnsupportedOperationError(f"remainder decomposition is one-dimensional, problem has d={spec.dim}")
    source = net if not isinstance(net, MlpSurrogate) else SurrogateSolution(net)
    M = x.shape[0]
    t = torch.full((M,), float(t_n), dtype=DTYPE)
    u = source.value(t, x)
    u_t, u_x = source.derivatives(t, x)
    u_x = u_x[:, 0]
    hessian = source.hessian(t, x)[:, 0, 0]
    a = spec.drift(t, x, y, z)[:, 0]
    b = spec.diffusion(t, x, y)[:, 0, 0]
    phi = spec.driver(t, x, y, z)
    w = dw[:, 0]

    r1 = y - u
    r2 = (z[:, 0] - b * u_x) * w
    r3 = (phi - u_t - a * u_x - 0.5 * b**2 * hessian) * dt
    r4 = -0.5 * b**2 * hessian * (w**2 - dt)
    r5 = -0.5 * a**2 * hessian * dt**2
    r6 = -a * b * hessian * w * dt

    x_next = em_forward_step(spec, t_n, x, y, z, dt, dw)
    y_em = em_backward_step(spec, t_n, x, y, z, dt, dw)
    residual = y_em - source.value(torch.full((M,), float(t_n + dt), dtype=DTYPE), x_next)
    report = RemainderReport(r1, r2, r3, r4, r5, r6, r_tail=torch.zeros_like(r1), residual=residual)
    report.r_tail = residual - report.explicit_sum()
    return report


def remainder_frame(spec: ProblemSpec, net, bundle: PathBundle, track: Track) -> pd.DataFrame:
    """Remainder terms at every (path, step) of a bundle's track."""
    paths = bundle.track(track)
    grid = bundle.grid
    dw = torch.as_tensor(bundle.increments.dw, dtype=DTYPE)
    M = paths.x.shape[0]
    parts = []
    for n in range(grid.steps):
        report = remainder_decomposition(
            spec, net, float(grid.points[n]), paths.x[:, n], paths.y[:, n], paths.z[:, n], float(grid.dt[n]), dw[:, n]
        )
        columns = {"path": np.arange(M), "step": n, "t": grid.points[n]}
        for name in REMAINDER_COLUMNS[3:]:
            columns[name] = getattr(report, name).detach().numpy()
        parts.append(pd.DataFrame(columns))
    table = pd.concat(parts, ignore_index=True)
    return table.sort_values(["path", "step"], kind="stable").reset_index(drop=True)[REMAINDER_COLUMNS]


def _mean_and_se(per_path: np.ndarray) -> tuple:
    return float(per_path.mean()), float(per_path.std(ddof=1) / math.sqrt(per_path.size))


def loss_scaling_scan(
    spec: ProblemSpec,
    levels: Sequence[int],
    M: int,
    seed: int,
    chunk_size: Optional[int] = None,
    max_relative_se: Optional[float] = None,
) -> pd.DataFrame:
    """
    One-step residual statistics per level for both loss variants, with u_hat := u.

    Every level is derived from one lattice. Standard errors are taken over
    per-path step averages.
    """
    if not spec.has_exact_derivatives:
        raise MissingDerivativeError(f"{spec.name}: the loss scan needs exact u and its derivatives")
    if M < 2:
        raise DomainError(f"the scan needs at least 2 paths for standard errors, got {M}")
    levels = sorted(set(int(l) for l in levels))
    if not levels or levels[0] < 0:
        raise DomainError(f"levels must be non-negative, got {levels}")
    lattice = sample_lattice(seed, levels[-1], M, spec.dim, spec.horizon)
    source = ExactSolution(spec)
    rows = []
    for level in levels:
        grid = level_grid(spec.horizon, level)
        increments = increments_at_level(lattice, level)
        bundle = generate_paths(spec, grid, increments, None, PathOptions(mode=PathMode.EXACT_ONLY, chunk_size=chunk_size))
        base = one_step_residuals(bundle, spec, increments, Track.EXACT_U)
        corrected = base - hessian_correction(bundle, spec, increments, source, Track.EXACT_U)
        for variant, residuals in ((LossVariant.PATHWISE, base), (LossVariant.HIGHER_ORDER, corrected)):
            values = residuals.detach().numpy()
            mean_signed, se_signed = _mean_and_se(values.mean(axis=1))
            mean_abs, se_abs = _mean_and_se(np.abs(values).mean(axis=1))
            if max_relative_se is not None and se_abs > max_relative_se * mean_abs:
                raise DomainError(
                    f"M={M} too small: level {level} {variant.value} relative s.e. {se_abs / mean_abs:.3g} "
                    f"exceeds {max_relative_se}"
                )
            rows.append({
                "level": level,
                "dt": float(grid.dt[0]),
                "variant": variant.value,
                "mean_signed": mean_signed,
                "se_signed": se_signed,
                "mean_abs": mean_abs,
                "se_abs": se_abs,
            })
        logger.info("loss scan level=%d dt=%.6g done", level, grid.dt[0])
    return frame(rows, SCAN_COLUMNS)


def scaling_orders(scan: pd.DataFrame) -> dict:
    """Fitted order in dt of the mean |residual| per variant (order = -slope per level)."""
    orders = {}
    for variant, rows in scan.groupby("variant", sort=False):
        fit: ConvergenceFit = convergence_fit(rows["level"].to_numpy(), rows["mean_abs"].to_numpy())
        orders[variant] = fit
    return orders


def scan_with_fit_rows(scan: pd.DataFrame) -> pd.DataFrame:
    """Append one summary row per variant: level 'fit', orders in dt in the mean columns, r^2 in the s.e. columns."""
    rows = []
    for variant, rows_v in scan.groupby("variant", sort=False):
        levels = rows_v["level"].to_numpy()
        abs_fit = convergence_fit(levels, rows_v["mean_abs"].to_numpy())
        signed = np.abs(rows_v["mean_signed"].to_numpy())
        signed_fit = convergence_fit(levels, signed) if np.all(signed > 0.0) and len(levels) >= 3 else None
        rows.append({
            "level": "fit",
            "dt": np.nan,
            "variant": variant,
            "mean_signed": -signed_fit.slope if signed_fit else np.nan,
            "se_signed": signed_fit.r_squared if signed_fit else np.nan,
            "mean_abs": -abs_fit.slope,
            "se_abs": abs_fit.r_squared,
        })
    return pd.concat([scan.astype({"level": object}), frame(rows, SCAN_COLUMNS)], ignore_index=True)
