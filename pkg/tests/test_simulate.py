import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from fbsdenet.core.brownian import IncrementSet, increments_at_level, sample_lattice
from fbsdenet.core.problems import ExactSolution, affine_problem, bsb_problem
from fbsdenet.core.surrogate import DTYPE, Activation, MlpSurrogate
from fbsdenet.core.timegrid import level_grid, uniform_grid
from fbsdenet.errors import DomainError, MissingTrackError, NumericalAbort, ShapeError, UnsupportedOperationError
from fbsdenet.services.mlmc import convergence_fit
from fbsdenet.services.simulate import (
    PathMode,
    PathOptions,
    Track,
    brownian_path,
    em_backward_step,
    em_forward_step,
    exact_forward_path,
    generate_paths,
    init_states,
    milstein_paths,
    milstein_step_1d,
    paths_frame,
    write_paths_csv,
)
from fbsdenet.workers.pool import close_pool, init_pool

SEED = 42
R = 0.05
SIGMA = 0.4


def _t(*values):
    return torch.tensor(values, dtype=DTYPE)


def _linear_copy(spec):
    """Identity-activation network equal to the affine problem's solution."""
    p = spec.parameters
    net = MlpSurrogate([spec.dim + 1, 1], activation=Activation.IDENTITY, time_scale=spec.horizon)
    with torch.no_grad():
        net.layers[0].weight.copy_(torch.tensor([[p["ct"] * spec.horizon] + [p["cx"]] * spec.dim], dtype=DTYPE))
        net.layers[0].bias.fill_(p["c0"])
    return net


def test_forward_step_without_drift_or_diffusion():
    spec = affine_problem(d=1, a0=0.0, b0=0.0)
    x = _t(1.3).reshape(1, 1)
    out = em_forward_step(spec, 0.0, x, _t(0.0), _t(0.0).reshape(1, 1), 0.1, _t(0.7).reshape(1, 1))
    assert torch.equal(out, x)


def test_forward_step_unit_drift():
    spec = affine_problem(d=1, a0=1.0, b0=0.0)
    out = em_forward_step(spec, 0.0, _t(1.0).reshape(1, 1), _t(0.0), _t(0.0).reshape(1, 1), 0.1, _t(0.0).reshape(1, 1))
    assert float(out) == pytest.approx(1.1, abs=1e-15)


def test_forward_step_bsb():
    spec = bsb_problem(d=1, sigma=SIGMA)
    out = em_forward_step(spec, 0.0, _t(1.0).reshape(1, 1), _t(0.0), _t(0.0).reshape(1, 1), 0.1, _t(0.5).reshape(1, 1))
    assert float(out) == pytest.approx(1.2, abs=1e-15)


def test_forward_step_rejects_non_finite_and_bad_shapes():
    spec = bsb_problem(d=1)
    with pytest.raises(NumericalAbort):
        em_forward_step(spec, 0.0, _t(math.nan).reshape(1, 1), _t(0.0), _t(0.0).reshape(1, 1), 0.1, _t(0.1).reshape(1, 1))
    with pytest.raises(ShapeError):
        em_forward_step(spec, 0.0, _t(1.0).reshape(1, 1), _t(0.0), _t(0.0).reshape(1, 1), 0.1, _t(0.1, 0.2).reshape(1, 2))


def test_backward_step_without_driver():
    spec = affine_problem(d=1, ct=0.0, a0=0.0)
    x = _t(1.0).reshape(1, 1)
    assert float(em_backward_step(spec, 0.0, x, _t(2.0), _t(0.0).reshape(1, 1), 0.1, _t(0.4).reshape(1, 1))) == 2.0
    out = em_backward_step(spec, 0.0, x, _t(2.0), _t(1.0).reshape(1, 1), 0.1, _t(0.3).reshape(1, 1))
    assert float(out) == pytest.approx(2.3, abs=1e-15)


def test_backward_step_bsb_driver():
    spec = bsb_problem(d=1, r=R, sigma=SIGMA)
    # grad u = 1 at x = 1 gives z = sigma
    z = _t(SIGMA).reshape(1, 1)
    dw = _t(0.2).reshape(1, 1)
    out = em_backward_step(spec, 0.0, _t(1.0).reshape(1, 1), _t(2.0), z, 0.1, dw)
    assert float(out) == pytest.approx(2.0 + 0.005 + SIGMA * 0.2, abs=1e-15)


def test_milstein_constant_diffusion_is_euler_maruyama():
    a = lambda t, x: 0.3 * x
    b = lambda t, x: torch.full_like(x, 0.7)
    grad_b = lambda t, x: torch.zeros_like(x)
    x, dw = _t(1.0, 2.0).reshape(2, 1), _t(0.1, -0.4).reshape(2, 1)
    out = milstein_step_1d(a, b, grad_b, 0.0, x, 0.25, dw)
    torch.testing.assert_close(out, x + 0.3 * x * 0.25 + 0.7 * dw, rtol=0, atol=1e-15)


def test_milstein_gbm_correction_vanishes_when_square_matches_step():
    a = lambda t, x: torch.zeros_like(x)
    b = lambda t, x: SIGMA * x
    grad_b = lambda t, x: torch.full_like(x, SIGMA)
    out = milstein_step_1d(a, b, grad_b, 0.0, _t(1.0).reshape(1, 1), 0.25, _t(0.5).reshape(1, 1))
    assert float(out) == pytest.approx(1.0 + SIGMA * 0.5, abs=1e-15)


def test_milstein_rejects_multidimensional_state():
    with pytest.raises(UnsupportedOperationError):
        milstein_step_1d(None, None, None, 0.0, torch.zeros(1, 2, dtype=DTYPE), 0.1, torch.zeros(1, 2, dtype=DTYPE))


def test_milstein_paths_reject_multidimensional_problem():
    spec = bsb_problem(d=2)
    grid = level_grid(1.0, 2)
    incs = increments_at_level(sample_lattice(SEED, 2, 4, 2, 1.0), 2)
    with pytest.raises(UnsupportedOperationError):
        milstein_paths(spec, grid, incs)


def test_init_states_bsb_exact():
    spec = bsb_problem(d=1, r=R, sigma=SIGMA)
    y0, z0 = init_states(spec, ExactSolution(spec), spec.x0.expand(3, 1))
    torch.testing.assert_close(y0, torch.full((3,), math.exp(R + SIGMA**2), dtype=DTYPE), rtol=1e-15, atol=0)
    torch.testing.assert_close(z0[:, 0], SIGMA * 2.0 * y0, rtol=1e-15, atol=0)


def test_init_states_without_diffusion_zero_hidden_process():
    spec = affine_problem(d=2, b0=0.0)
    _, z0 = init_states(spec, ExactSolution(spec), spec.x0.expand(2, 2))
    assert torch.all(z0 == 0.0)


def test_init_states_needs_a_source():
    spec = bsb_problem()
    with pytest.raises(DomainError):
        init_states(spec, None, spec.x0.expand(1, 1))


def test_exact_copy_gives_identical_tracks():
    spec = affine_problem(d=2, a0=0.1, b0=0.3)
    grid = level_grid(spec.horizon, 4)
    incs = increments_at_level(sample_lattice(SEED, 4, 64, 2, spec.horizon), 4)
    bundle = generate_paths(spec, grid, incs, _linear_copy(spec))
    exact, surrogate = bundle.track(Track.EXACT_U), bundle.track(Track.SURROGATE)
    assert torch.equal(exact.x[:, 0], surrogate.x[:, 0])
    for name in ("x", "y", "z"):
        torch.testing.assert_close(getattr(surrogate, name), getattr(exact, name), rtol=0, atol=1e-12)


def test_frozen_state_without_drift_or_diffusion():
    spec = affine_problem(d=1, a0=0.0, b0=0.0)
    grid = level_grid(spec.horizon, 3)
    incs = increments_at_level(sample_lattice(SEED, 3, 5, 1, spec.horizon), 3)
    paths = generate_paths(spec, grid, incs, options=PathOptions(mode=PathMode.EXACT_ONLY)).track(Track.EXACT_U)
    assert torch.all(paths.x == spec.x0)
    t = torch.as_tensor(grid.points, dtype=DTYPE)
    expected = spec.solution(t, spec.x0.expand(t.shape[0], 1))
    torch.testing.assert_close(paths.y, expected.expand(5, -1), rtol=0, atol=1e-15)


def test_surrogate_only_mode_skips_exact_track():
    spec = bsb_problem(d=1)
    grid = level_grid(1.0, 2)
    incs = increments_at_level(sample_lattice(SEED, 2, 3, 1, 1.0), 2)
    bundle = generate_paths(spec, grid, incs, MlpSurrogate([2, 8, 1], seed=1), PathOptions(mode=PathMode.SURROGATE_ONLY))
    assert list(bundle.tracks) == [Track.SURROGATE]
    with pytest.raises(MissingTrackError):
        bundle.track(Track.EXACT_U)


def test_generate_paths_rejects_mismatched_increments():
    spec = bsb_problem(d=1)
    incs = increments_at_level(sample_lattice(SEED, 3, 2, 1, 1.0), 3)
    with pytest.raises(ShapeError):
        generate_paths(spec, level_grid(1.0, 2), incs)
    with pytest.raises(DomainError):
        generate_paths(spec, level_grid(1.0, 3), incs, None, PathOptions(mode=PathMode.SURROGATE_ONLY))


def test_paths_are_adapted():
    spec = bsb_problem(d=1)
    grid = level_grid(1.0, 4)
    incs = increments_at_level(sample_lattice(SEED, 4, 8, 1, 1.0), 4)
    net = MlpSurrogate([2, 8, 1], seed=2)
    base = generate_paths(spec, grid, incs, net)
    dw = incs.dw.copy()
    dw[:, 9:] += 0.25
    perturbed = generate_paths(spec, grid, IncrementSet(incs.level, dw, incs.dt), net)
    for track in base.tracks:
        for name in ("x", "y", "z"):
            assert torch.equal(getattr(base.track(track), name)[:, :10], getattr(perturbed.track(track), name)[:, :10])


def test_chunking_and_threads_do_not_change_paths():
    spec = bsb_problem(d=2)
    grid = level_grid(1.0, 3)
    incs = increments_at_level(sample_lattice(SEED, 3, 50, 2, 1.0), 3)
    net = MlpSurrogate([3, 8, 1], seed=3)
    whole = generate_paths(spec, grid, incs, net)
    serial = generate_paths(spec, grid, incs, net, PathOptions(chunk_size=7))
    init_pool(4)
    try:
        threaded = generate_paths(spec, grid, incs, net, PathOptions(chunk_size=7))
    finally:
        close_pool()
    for track in whole.tracks:
        for name in ("x", "y", "z"):
            assert torch.equal(getattr(serial.track(track), name), getattr(threaded.track(track), name))
            torch.testing.assert_close(getattr(serial.track(track), name), getattr(whole.track(track), name), rtol=0, atol=1e-12)


def test_non_finite_state_reports_path_and_step():
    spec = replace(affine_problem(d=1, b0=1.0), drift=lambda t, x, y, z: 1e10 * x)
    grid = uniform_grid(1.0, 4)
    dw = np.zeros((4, 4, 1))
    dw[2, 0, 0] = 1e308
    incs = IncrementSet(level=None, dw=dw, dt=grid.dt)
    with pytest.raises(NumericalAbort) as excinfo:
        generate_paths(spec, grid, incs, options=PathOptions(mode=PathMode.EXACT_ONLY))
    assert excinfo.value.path == 2
    assert excinfo.value.step == 2


def test_exact_forward_path_matches_gbm_formula():
    spec = bsb_problem(d=1, sigma=SIGMA)
    grid = level_grid(1.0, 3)
    incs = increments_at_level(sample_lattice(SEED, 3, 4, 1, 1.0), 3)
    x = exact_forward_path(spec, grid, incs)
    w = brownian_path(grid, incs)
    assert x.shape == (4, 9, 1)
    assert torch.all(x[:, 0] == 1.0)
    expected = torch.exp(-0.5 * SIGMA**2 * 1.0 + SIGMA * w[:, -1])
    torch.testing.assert_close(x[:, -1], expected, rtol=1e-15, atol=0)


def test_milstein_beats_euler_on_gbm():
    spec = bsb_problem(d=1, sigma=SIGMA)
    L = 6
    grid = level_grid(1.0, L)
    incs = increments_at_level(sample_lattice(SEED, L, 2048, 1, 1.0), L)
    exact = exact_forward_path(spec, grid, incs)[:, -1, 0]
    milstein = milstein_paths(spec, grid, incs)[:, -1, 0]
    euler = generate_paths(spec, grid, incs, options=PathOptions(mode=PathMode.EXACT_ONLY)).track(Track.EXACT_U).x[:, -1, 0]
    assert float(((milstein - exact) ** 2).mean()) < float(((euler - exact) ** 2).mean())


def test_paths_frame_layout(tmp_path):
    spec = bsb_problem(d=2)
    grid = level_grid(1.0, 2)
    M = 3
    incs = increments_at_level(sample_lattice(SEED, 2, M, 2, 1.0), 2)
    bundle = generate_paths(spec, grid, incs, MlpSurrogate([3, 4, 1], seed=0))
    table = paths_frame(bundle)
    assert list(table.columns) == ["path", "step", "t", "track", "x0", "x1", "y", "z0", "z1"]
    assert len(table) == 2 * M * (grid.steps + 1)
    assert set(table["track"]) == {"exact_u", "surrogate"}
    target = tmp_path / "paths.csv"
    write_paths_csv(bundle, target)
    assert target.read_text().count("\n") == len(table) + 1


def test_coupled_level_gap_decays_at_order_one_half():
    spec = bsb_problem(d=1, sigma=SIGMA)
    top = 8
    lattice = sample_lattice(SEED, top, 4096, 1, 1.0)
    terminal = {}
    for level in range(2, top + 1):
        bundle = generate_paths(spec, level_grid(1.0, level), increments_at_level(lattice, level), options=PathOptions(mode=PathMode.EXACT_ONLY))
        terminal[level] = bundle.track(Track.EXACT_U).x[:, -1, 0].numpy()
    levels = list(range(3, top + 1))
    gaps = [math.sqrt(float(np.mean((terminal[l] - terminal[l - 1]) ** 2))) for l in levels]
    fit = convergence_fit(levels, gaps)
    assert fit.slope == pytest.approx(-0.5, abs=0.15)
