"""
Path generation.

`generate_paths` runs the dual-track scheme: the forward state is stepped by
Euler-Maruyama while Y and Z are set at every node from the solution source
(exact u for one track, the surrogate for the other), both tracks driven by
the same increments. Paths are processed in fixed-size chunks on the worker
pool; chunk boundaries come from options, never from the thread count.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from fbsdenet.core.brownian import IncrementSet
from fbsdenet.core.problems import ExactSolution, ProblemSpec, SolutionSource, SurrogateSolution, hidden_process
from fbsdenet.core.surrogate import DTYPE, MlpSurrogate
from fbsdenet.core.timegrid import TimeGrid
from fbsdenet.errors import DomainError, MissingDerivativeError, MissingTrackError, NumericalAbort, ShapeError, UnsupportedOperationError
from fbsdenet.monitoring.metrics import numerical_aborts, paths_simulated
from fbsdenet.utils.tables import write_csv
from fbsdenet.workers.pool import chunk_slices, map_ordered

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


class Track(str, enum.Enum):
    EXACT_U = "exact_u"
    SURROGATE = "surrogate"


class PathMode(str, enum.Enum):
    BOTH = "both"
    SURROGATE_ONLY = "surrogate"
    EXACT_ONLY = "exact"


@dataclass(frozen=True)
class PathOptions:
    mode: PathMode = PathMode.BOTH
    record_graph: bool = False
    chunk_size: Optional[int] = None


@dataclass
class TrackPaths:
    """States of one track: x (M, N+1, d), y (M, N+1), z (M, N+1, d)."""

    x: Tensor
    y: Tensor
    z: Tensor


@dataclass
class PathBundle:
    grid: TimeGrid
    increments: IncrementSet
    tracks: Dict[Track, TrackPaths]

    def track(self, track: Track) -> TrackPaths:
        try:
            return self.tracks[Track(track)]
        except KeyError:
            raise MissingTrackError(f"bundle has no {Track(track).value} track") from None


def _times(t: float, rows: int) -> Tensor:
    return torch.full((rows,), float(t), dtype=DTYPE)


def _check_finite(name: str, *tensors: Tensor) -> None:
    for tensor in tensors:
        if not torch.isfinite(tensor).all():
            numerical_aborts.labels(reason="non_finite_input").inc()
            raise NumericalAbort(f"non-finite input to {name}")


def em_forward_step(spec: ProblemSpec, t_n: float, x: Tensor, y: Tensor, z: Tensor, dt: float, dw: Tensor) -> Tensor:
    """X + a(t, X, Y, Z) dt + b(t, X, Y) dW."""
    if x.shape != dw.shape or x.shape[-1] != spec.dim:
        raise ShapeError(f"state {tuple(x.shape)} and increment {tuple(dw.shape)} do not match d={spec.dim}")
    _check_finite("em_forward_step", x, y, z, dw)
    t = _times(t_n, x.shape[0])
    return x + spec.drift(t, x, y, z) * dt + torch.einsum("mij,mj->mi", spec.diffusion(t, x, y), dw)


def em_backward_step(spec: ProblemSpec, t_n: float, x: Tensor, y: Tensor, z: Tensor, dt: float, dw: Tensor) -> Tensor:
    """Y + phi(t, X, Y, Z) dt + Z . dW."""
    if z.shape != dw.shape or y.shape != (x.shape[0],):
        raise ShapeError(f"hidden process {tuple(z.shape)} and increment {tuple(dw.shape)} do not match")
    _check_finite("em_backward_step", x, y, z, dw)
    t = _times(t_n, x.shape[0])
    return y + spec.driver(t, x, y, z) * dt + (z * dw).sum(-1)


def milstein_step_1d(
    a: Callable[[Tensor, Tensor], Tensor],
    b: Callable[[Tensor, Tensor], Tensor],
    grad_b: Callable[[Tensor, Tensor], Tensor],
    t_n: float,
    x: Tensor,
    dt: float,
    dw: Tensor,
) -> Tensor:
    """EM step plus b b' (dW^2 - dt) / 2, for decoupled scalar SDEs."""
    if x.ndim != 2 or x.shape[-1] != 1 or dw.shape != x.shape:
        raise UnsupportedOperationError(f"Milstein is one-dimensional here, got state shape {tuple(x.shape)}")
    _check_finite("milstein_step_1d", x, dw)
    t = _times(t_n, x.shape[0])
    b_val = b(t, x)
    return x + a(t, x) * dt + b_val * dw + 0.5 * b_val * grad_b(t, x) * (dw**2 - dt)


def _source_for(spec: ProblemSpec, source) -> SolutionSource:
    if isinstance(source, MlpSurrogate):
        if source.dim != spec.dim:
            raise ShapeError(f"network input dimension {source.dim} does not match d={spec.dim}")
        return SurrogateSolution(source)
    return source


def init_states(spec: ProblemSpec, source, x0: Tensor) -> Tuple[Tensor, Tensor]:
    """Y0 = u(0, X0), Z0 = b(0, X0, Y0)^T grad u(0, X0) for a batch of initial states."""
    if source is None:
        raise DomainError("no solution source (exact u or network) for the initial states")
    source = _source_for(spec, source)
    t = _times(0.0, x0.shape[0])
    y0 = source.value(t, x0)
    z0 = hidden_process(spec, t, x0, y0, source.space_gradient(t, x0))
    return y0, z0


def _simulate_track(spec: ProblemSpec, grid: TimeGrid, dw: Tensor, source: SolutionSource, offset: int) -> TrackPaths:
    M = dw.shape[0]
    x = spec.x0.expand(M, spec.dim).clone()
    y, z = init_states(spec, source, x)
    xs, ys, zs = [x], [y], [z]
    points = grid.points
    for n in range(grid.steps):
        dt = float(points[n + 1] - points[n])
        x = em_forward_step(spec, float(points[n]), x, y, z, dt, dw[:, n])
        t_next = _times(points[n + 1], M)
        y = source.value(t_next, x)
        z = hidden_process(spec, t_next, x, y, source.space_gradient(t_next, x))
        bad = ~(torch.isfinite(x).all(-1) & torch.isfinite(y) & torch.isfinite(z).all(-1))
        if bad.any():
            path = offset + int(torch.nonzero(bad)[0])
            numerical_aborts.labels(reason="non_finite_state").inc()
            raise NumericalAbort(f"non-finite state path={path} step={n + 1}", path=path, step=n + 1)
        xs.append(x)
        ys.append(y)
        zs.append(z)
    return TrackPaths(x=torch.stack(xs, dim=1), y=torch.stack(ys, dim=1), z=torch.stack(zs, dim=1))


def _track_sources(spec: ProblemSpec, net: Optional[MlpSurrogate], options: PathOptions) -> Dict[Track, SolutionSource]:
    sources: Dict[Track, SolutionSource] = {}
    want_exact = options.mode in (PathMode.BOTH, PathMode.EXACT_ONLY)
    want_surrogate = options.mode in (PathMode.BOTH, PathMode.SURROGATE_ONLY)
    if want_exact and spec.solution is not None and spec.solution_dx is not None:
        sources[Track.EXACT_U] = ExactSolution(spec)
    elif options.mode is PathMode.EXACT_ONLY:
        raise MissingDerivativeError(f"{spec.name}: the exact track needs u and grad u")
    if want_surrogate and net is not None:
        if net.dim != spec.dim:
            raise ShapeError(f"network input dimension {net.dim} does not match d={spec.dim}")
        sources[Track.SURROGATE] = SurrogateSolution(net, record=options.record_graph)
    elif options.mode is PathMode.SURROGATE_ONLY:
        raise DomainError("surrogate-only paths need a network")
    if not sources:
        raise DomainError("neither the exact nor the surrogate track can be constructed")
    return sources


def generate_paths(
    spec: ProblemSpec,
    grid: TimeGrid,
    increments: IncrementSet,
    net: Optional[MlpSurrogate] = None,
    options: PathOptions = PathOptions(),
) -> PathBundle:
    if increments.steps != grid.steps:
        raise ShapeError(f"increments have {increments.steps} steps, grid has {grid.steps}")
    if increments.dim != spec.dim:
        raise ShapeError(f"increments have dimension {increments.dim}, problem has {spec.dim}")
    if not np.allclose(increments.dt, grid.dt, rtol=1e-12, atol=0.0):
        raise ShapeError("increment step sizes do not match the grid")
    sources = _track_sources(spec, net, options)
    dw = torch.as_tensor(increments.dw, dtype=DTYPE)
    # the tape cannot be split across threads; training chunks at a higher level
    slices = [slice(0, increments.batch)] if options.record_graph else chunk_slices(increments.batch, options.chunk_size)

    tracks: Dict[Track, TrackPaths] = {}
    for track, source in sources.items():
        def run(chunk: slice, source=source) -> TrackPaths:
            return _simulate_track(spec, grid, dw[chunk], source, chunk.start)

        parts = map_ordered(run, slices)
        tracks[track] = TrackPaths(
            x=torch.cat([p.x for p in parts]),
            y=torch.cat([p.y for p in parts]),
            z=torch.cat([p.z for p in parts]),
        )
        paths_simulated.labels(track=track.value).inc(increments.batch)
    logger.debug("paths generated tracks=%s M=%d N=%d", [t.value for t in tracks], increments.batch, grid.steps)
    return PathBundle(grid=grid, increments=increments, tracks=tracks)


def brownian_path(grid: TimeGrid, increments: IncrementSet) -> Tensor:
    """W at the grid nodes, shape (M, N+1, d), W_0 = 0."""
    dw = torch.as_tensor(increments.dw, dtype=DTYPE)
    zero = torch.zeros(dw.shape[0], 1, dw.shape[2], dtype=DTYPE)
    return torch.cat([zero, torch.cumsum(dw, dim=1)], dim=1)


def exact_forward_path(spec: ProblemSpec, grid: TimeGrid, increments: IncrementSet) -> Tensor:
    """The exact forward process X_{t_n} along the lattice Brownian path, shape (M, N+1, d)."""
    if spec.exact_state is None:
        raise MissingDerivativeError(f"{spec.name}: no exact forward sampler")
    if increments.steps != grid.steps:
        raise ShapeError(f"increments have {increments.steps} steps, grid has {grid.steps}")
    w = brownian_path(grid, increments)
    M = w.shape[0]
    states = [spec.exact_state(_times(t, M), w[:, n]) for n, t in enumerate(grid.points)]
    return torch.stack(states, dim=1)


def milstein_paths(spec: ProblemSpec, grid: TimeGrid, increments: IncrementSet) -> Tensor:
    """Milstein forward paths (M, N+1, 1) for decoupled scalar problems."""
    if not spec.decoupled:
        raise UnsupportedOperationError(f"{spec.name}: Milstein needs a decoupled forward process")
    if spec.dim != 1 or spec.diffusion_dx is None:
        raise UnsupportedOperationError(f"{spec.name}: Milstein needs d = 1 and d b / d x")
    if increments.steps != grid.steps:
        raise ShapeError(f"increments have {increments.steps} steps, grid has {grid.steps}")
    dw = torch.as_tensor(increments.dw, dtype=DTYPE)
    M = dw.shape[0]
    y0 = torch.zeros(M, dtype=DTYPE)
    z0 = torch.zeros(M, 1, dtype=DTYPE)

    def a(t, x):
        return spec.drift(t, x, y0, z0)

    def b(t, x):
        return spec.diffusion(t, x, y0)[:, :, 0]

    x = spec.x0.expand(M, 1).clone()
    xs = [x]
    for n in range(grid.steps):
        x = milstein_step_1d(a, b, spec.diffusion_dx, float(grid.points[n]), x, float(grid.dt[n]), dw[:, n])
        xs.append(x)
    return torch.stack(xs, dim=1)


def paths_frame(bundle: PathBundle) -> pd.DataFrame:
    """Long format: one row per (track, path, step) with columns path, step, t, track, x_i, y, z_i."""
    frames = []
    for track, paths in bundle.tracks.items():
        M, n_nodes, d = paths.x.shape
        data = {
            "path": np.repeat(np.arange(M), n_nodes),
            "step": np.tile(np.arange(n_nodes), M),
            "t": np.tile(bundle.grid.points, M),
            "track": track.value,
        }
        x = paths.x.detach().numpy().reshape(M * n_nodes, d)
        z = paths.z.detach().numpy().reshape(M * n_nodes, d)
        for i in range(d):
            data[f"x{i}"] = x[:, i]
        data["y"] = paths.y.detach().numpy().reshape(M * n_nodes)
        for i in range(d):
            data[f"z{i}"] = z[:, i]
        frames.append(pd.DataFrame(data))
    return pd.concat(frames, ignore_index=True)


def write_paths_csv(bundle: PathBundle, path) -> None:
    write_csv(paths_frame(bundle), path)
