import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from fbsdenet.core.brownian import IncrementSet, increments_at_level, sample_lattice
from fbsdenet.core.problems import ExactSolution, TerminalFunctional, affine_problem, bsb_problem
from fbsdenet.core.surrogate import DTYPE, Activation, MlpSurrogate
from fbsdenet.core.timegrid import level_grid, uniform_grid
from fbsdenet.errors import DomainError, MissingDerivativeError, ShapeError, UnsupportedOperationError
from fbsdenet.services.loss import (
    REMAINDER_COLUMNS,
    SCAN_COLUMNS,
    GradientTarget,
    LossOptions,
    LossVariant,
    compute_loss,
    higher_order_loss,
    loss_scaling_scan,
    one_step_residuals,
    pathwise_loss,
    remainder_decomposition,
    remainder_frame,
    scaling_orders,
    scan_with_fit_rows,
    terminal_gradient_term,
)
from fbsdenet.services.simulate import PathBundle, PathMode, PathOptions, Track, TrackPaths, generate_paths

SEED = 7
SIGMA = 0.4


def _bundle(grid, x, y, z, dw, track=Track.SURROGATE):
    x = torch.as_tensor(x, dtype=DTYPE)
    increments = IncrementSet(level=grid.level, dw=np.asarray(dw, dtype=np.float64), dt=grid.dt)
    paths = TrackPaths(x=x, y=torch.as_tensor(y, dtype=DTYPE), z=torch.as_tensor(z, dtype=DTYPE))
    return PathBundle(grid=grid, increments=increments, tracks={track: paths}), increments


def _exact_bundle(spec, level, M, net=None, mode=PathMode.EXACT_ONLY):
    grid = level_grid(spec.horizon, level)
    increments = increments_at_level(sample_lattice(SEED, level, M, spec.dim, spec.horizon), level)
    return generate_paths(spec, grid, increments, net, PathOptions(mode=mode)), increments


def test_manufactured_problem_has_zero_residuals():
    spec = affine_problem(d=2, a0=0.0, b0=0.6)
    bundle, increments = _exact_bundle(spec, 4, 32)
    residuals = one_step_residuals(bundle, spec, increments, Track.EXACT_U)
    assert residuals.shape == (32, 16)
    assert float(residuals.abs().max()) <= 1e-12


def test_terminal_term_vanishes_when_y_matches_g():
    spec = bsb_problem(d=1)
    grid = uniform_grid(1.0, 1)
    x = torch.tensor([[[1.0], [1.3]]], dtype=DTYPE)
    y = torch.tensor([[2.0, 1.3**2]], dtype=DTYPE)
    bundle, increments = _bundle(grid, x, y, torch.zeros(1, 2, 1), [[[0.1]]])
    assert float(pathwise_loss(bundle, spec, increments).terminal_term) == 0.0


def test_all_zero_states_give_zero_loss():
    spec = affine_problem(d=1, c0=0.0, ct=0.0, cx=0.0, a0=0.0)
    grid = uniform_grid(1.0, 4)
    bundle, increments = _bundle(grid, torch.zeros(3, 5, 1), torch.zeros(3, 5), torch.zeros(3, 5, 1), np.ones((3, 4, 1)))
    assert pathwise_loss(bundle, spec, increments).value == 0.0


def test_pathwise_loss_rejects_mismatched_increments():
    spec = bsb_problem(d=1)
    grid = uniform_grid(1.0, 4)
    bundle, _ = _bundle(grid, torch.ones(2, 5, 1), torch.ones(2, 5), torch.zeros(2, 5, 1), np.zeros((2, 4, 1)))
    wrong = IncrementSet(level=None, dw=np.zeros((2, 3, 1)), dt=np.full(3, 1 / 3))
    with pytest.raises(ShapeError):
        pathwise_loss(bundle, spec, wrong)


def test_terminal_gradient_term_square_functional():
    spec = bsb_problem(d=1, sigma=SIGMA)
    grid = uniform_grid(1.0, 1)
    bundle, _ = _bundle(grid, torch.ones(1, 2, 1), torch.ones(1, 2), torch.zeros(1, 2, 1), [[[0.0]]])
    assert float(terminal_gradient_term(bundle, spec)) == 4.0
    hidden = float(terminal_gradient_term(bundle, spec, target=GradientTarget.HIDDEN))
    assert hidden == pytest.approx((2.0 * SIGMA) ** 2, rel=1e-15)


def test_terminal_gradient_term_vanishes_on_target_and_ignores_order():
    spec = bsb_problem(d=2)
    grid = uniform_grid(1.0, 1)
    x = torch.tensor([[[1.0, 2.0], [0.5, 1.5]], [[1.0, 2.0], [2.0, 0.3]]], dtype=DTYPE)
    z = torch.zeros(2, 2, 2, dtype=DTYPE)
    z[:, -1] = 2.0 * x[:, -1]
    bundle, _ = _bundle(grid, x, torch.ones(2, 2), z, np.zeros((2, 1, 2)))
    assert float(terminal_gradient_term(bundle, spec)) == 0.0

    z_off = z + 0.1 * torch.arange(8, dtype=DTYPE).reshape(2, 2, 2)
    forward, _ = _bundle(grid, x, torch.ones(2, 2), z_off, np.zeros((2, 1, 2)))
    backward, _ = _bundle(grid, x.flip(0), torch.ones(2, 2), z_off.flip(0), np.zeros((2, 1, 2)))
    assert float(terminal_gradient_term(forward, spec)) == pytest.approx(float(terminal_gradient_term(backward, spec)), rel=1e-15)


def test_missing_terminal_gradient_disables_term_with_warning():
    spec = replace(bsb_problem(d=1), terminal_gradient=None)
    bundle, increments = _exact_bundle(spec, 2, 4)
    options = LossOptions(track=Track.EXACT_U, terminal_gradient_weight=1.0)
    with pytest.warns(RuntimeWarning):
        breakdown = pathwise_loss(bundle, spec, increments, options)
    assert breakdown.terminal_gradient_term is None
    assert breakdown.terminal_gradient_weight == 0.0
    with pytest.raises(MissingDerivativeError):
        terminal_gradient_term(bundle, spec, Track.EXACT_U)


def test_total_equals_sum_of_parts():
    spec = bsb_problem(d=1)
    net = MlpSurrogate([2, 8, 1], seed=4)
    bundle, increments = _exact_bundle(spec, 3, 16, net, PathMode.SURROGATE_ONLY)
    options = LossOptions(terminal_gradient_weight=0.7)
    breakdown = compute_loss(LossVariant.PATHWISE_PLUS_TERMINAL_GRAD, bundle, spec, increments, net, options)
    parts = (breakdown.per_step_residuals**2).sum() + breakdown.terminal_term + 0.7 * breakdown.terminal_gradient_term
    assert float(breakdown.total) == pytest.approx(float(parts), rel=1e-12)


def test_compute_loss_drops_gradient_weight_for_other_variants():
    spec = bsb_problem(d=1)
    net = MlpSurrogate([2, 8, 1], seed=4)
    bundle, increments = _exact_bundle(spec, 3, 8, net, PathMode.SURROGATE_ONLY)
    options = LossOptions(terminal_gradient_weight=1.0)
    plain = compute_loss(LossVariant.PATHWISE, bundle, spec, increments, net, options)
    assert plain.terminal_gradient_term is None
    assert plain.value == pytest.approx(pathwise_loss(bundle, spec, increments).value, rel=1e-15)


def test_higher_order_equals_pathwise_for_linear_network():
    spec = bsb_problem(d=1)
    net = MlpSurrogate([2, 1], activation=Activation.IDENTITY, seed=1)
    bundle, increments = _exact_bundle(spec, 3, 8, net, PathMode.SURROGATE_ONLY)
    assert torch.equal(
        higher_order_loss(bundle, spec, increments, net).per_step_residuals,
        pathwise_loss(bundle, spec, increments).per_step_residuals,
    )


def test_higher_order_equals_pathwise_when_square_increment_matches_step():
    spec = bsb_problem(d=1)
    net = MlpSurrogate([2, 8, 1], seed=1)
    grid = level_grid(1.0, 2)
    signs = np.array([[1, -1, -1, 1], [-1, -1, 1, 1]], dtype=np.float64)
    increments = IncrementSet(level=2, dw=(0.5 * signs)[:, :, None], dt=grid.dt)
    bundle = generate_paths(spec, grid, increments, net, PathOptions(mode=PathMode.SURROGATE_ONLY))
    assert torch.equal(
        higher_order_loss(bundle, spec, increments, net).per_step_residuals,
        pathwise_loss(bundle, spec, increments).per_step_residuals,
    )


def test_higher_order_loss_rejects_multidimensional_and_relu():
    spec = bsb_problem(d=2)
    net = MlpSurrogate([3, 4, 1], seed=0)
    bundle, increments = _exact_bundle(spec, 2, 4, net, PathMode.SURROGATE_ONLY)
    with pytest.raises(UnsupportedOperationError):
        higher_order_loss(bundle, spec, increments, net)
    spec1 = bsb_problem(d=1)
    relu = MlpSurrogate([2, 4, 1], activation=Activation.RELU, seed=0)
    bundle1, increments1 = _exact_bundle(spec1, 2, 4, relu, PathMode.SURROGATE_ONLY)
    with pytest.raises(UnsupportedOperationError):
        higher_order_loss(bundle1, spec1, increments1, relu)


def test_weighted_loss_on_uniform_grid_is_unchanged():
    spec = bsb_problem(d=1)
    net = MlpSurrogate([2, 8, 1], seed=5)
    bundle, increments = _exact_bundle(spec, 3, 8, net, PathMode.SURROGATE_ONLY)
    plain = pathwise_loss(bundle, spec, increments).value
    weighted = pathwise_loss(bundle, spec, increments, LossOptions(weighted=True)).value
    assert weighted == pytest.approx(plain, rel=1e-14)


def _remainders(spec, source, y_shift=0.0, M=64, dt=0.01):
    rng = np.random.default_rng(3)
    x = torch.as_tensor(rng.uniform(0.5, 2.0, size=(M, 1)), dtype=DTYPE)
    t = torch.full((M,), 0.3, dtype=DTYPE)
    exact = ExactSolution(spec)
    y = exact.value(t, x) + y_shift
    z = spec.diffusion(t, x, y)[:, :, 0] * exact.space_gradient(t, x)
    dw = torch.as_tensor(rng.normal(0.0, math.sqrt(dt), size=(M, 1)), dtype=DTYPE)
    return remainder_decomposition(spec, source, 0.3, x, y, z, dt, dw)


def test_remainders_vanish_for_linear_solution():
    spec = affine_problem(d=1, a0=0.0, b0=0.5)
    report = _remainders(spec, ExactSolution(spec))
    for name in ("r1", "r2", "r3", "r4", "r5", "r6", "r_tail", "residual"):
        assert float(getattr(report, name).abs().max()) <= 1e-12, name


def test_remainder_shift_only_moves_first_term():
    spec = affine_problem(d=1, a0=0.2, b0=0.5)
    net = MlpSurrogate([2, 8, 1], seed=6)
    base = _remainders(spec, net)
    shifted = _remainders(spec, net, y_shift=0.25)
    torch.testing.assert_close(shifted.r1 - base.r1, torch.full_like(base.r1, 0.25), rtol=0, atol=1e-14)
    for name in ("r2", "r3", "r4", "r5", "r6"):
        assert torch.equal(getattr(shifted, name), getattr(base, name)), name
    torch.testing.assert_close(shifted.r_tail, base.r_tail, rtol=0, atol=1e-12)


def test_remainders_add_up_to_residual():
    spec = bsb_problem(d=1)
    report = _remainders(spec, MlpSurrogate([2, 8, 1], seed=2))
    torch.testing.assert_close(report.explicit_sum() + report.r_tail, report.residual, rtol=1e-12, atol=1e-14)


def test_remainder_decomposition_rejects_multidimensional_problem():
    spec = bsb_problem(d=2)
    x = torch.ones(2, 2, dtype=DTYPE)
    with pytest.raises(UnsupportedOperationError):
        remainder_decomposition(spec, ExactSolution(spec), 0.0, x, torch.ones(2, dtype=DTYPE), x, 0.1, x)


def test_remainder_frame_layout():
    spec = bsb_problem(d=1)
    bundle, _ = _exact_bundle(spec, 2, 5)
    table = remainder_frame(spec, ExactSolution(spec), bundle, Track.EXACT_U)
    assert list(table.columns) == REMAINDER_COLUMNS
    assert len(table) == 5 * 4
    assert table["path"].tolist()[:4] == [0, 0, 0, 0]
    np.testing.assert_allclose(
        table[["r1", "r2", "r3", "r4", "r5", "r6", "r_tail"]].sum(axis=1), table["residual"], rtol=1e-10, atol=1e-13
    )


def test_loss_scaling_scan_rows_and_trend():
    spec = bsb_problem(d=1)
    scan = loss_scaling_scan(spec, [2, 3, 4, 5], 512, SEED)
    assert list(scan.columns) == SCAN_COLUMNS
    assert len(scan) == 8
    assert set(scan["variant"]) == {LossVariant.PATHWISE.value, LossVariant.HIGHER_ORDER.value}
    orders = scaling_orders(scan)
    assert orders[LossVariant.PATHWISE.value].slope < 0.0
    assert orders[LossVariant.HIGHER_ORDER.value].slope < orders[LossVariant.PATHWISE.value].slope
    table = scan_with_fit_rows(scan)
    fit_rows = table[table["level"] == "fit"]
    assert len(fit_rows) == 2
    assert fit_rows["mean_abs"].tolist() == pytest.approx([-o.slope for o in orders.values()])


def test_loss_scaling_scan_preconditions():
    with pytest.raises(MissingDerivativeError):
        loss_scaling_scan(replace(bsb_problem(), solution_dxx=None), [2, 3], 64, SEED)
    with pytest.raises(DomainError):
        loss_scaling_scan(bsb_problem(), [2, 3, 4], 64, SEED, max_relative_se=1e-6)


def test_terminal_functional_sum_has_unit_gradient():
    spec = bsb_problem(d=3, g=TerminalFunctional.SUM)
    grid = uniform_grid(1.0, 1)
    x = torch.ones(1, 2, 3, dtype=DTYPE)
    z = torch.ones(1, 2, 3, dtype=DTYPE)
    bundle, _ = _bundle(grid, x, torch.ones(1, 2), z, np.zeros((1, 1, 3)))
    assert float(terminal_gradient_term(bundle, spec)) == 0.0
