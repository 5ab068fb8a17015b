"""
FBSDE problem data and oracles.

All callables are batched torch functions: t has shape (M,), x (M, d),
y (M,), z (M, d). Drift returns (M, d), diffusion (M, d, d), driver and
terminal (M,). The fourth driver argument is the hidden process
z = b^T grad u, as produced along paths.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Tuple

import numpy as np
import torch
from scipy.stats import qmc

from fbsdenet.core.surrogate import DTYPE, MlpSurrogate, input_gradient, input_hessian
from fbsdenet.errors import DomainError, MissingDerivativeError, ShapeError, UnsupportedOperationError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    dim: int
    horizon: float
    x0: Tensor
    drift: Callable[[Tensor, Tensor, Tensor, Tensor], Tensor]
    diffusion: Callable[[Tensor, Tensor, Tensor], Tensor]
    driver: Callable[[Tensor, Tensor, Tensor, Tensor], Tensor]
    terminal: Callable[[Tensor], Tensor]
    terminal_gradient: Optional[Callable[[Tensor], Tensor]] = None
    solution: Optional[Callable[[Tensor, Tensor], Tensor]] = None
    solution_dt: Optional[Callable[[Tensor, Tensor], Tensor]] = None
    solution_dx: Optional[Callable[[Tensor, Tensor], Tensor]] = None
    solution_dxx: Optional[Callable[[Tensor, Tensor], Tensor]] = None
    # 1-D only: d b / d x for decoupled diffusions, shape (M, 1)
    diffusion_dx: Optional[Callable[[Tensor, Tensor], Tensor]] = None
    # exact forward state from the Brownian value W_t
    exact_state: Optional[Callable[[Tensor, Tensor], Tensor]] = None
    decoupled: bool = False
    # false when `solution` only matches g at t = T and does not solve the PDE
    solution_solves_pde: bool = True
    parameters: dict = field(default_factory=dict)

    @property
    def has_exact_solution(self) -> bool:
        return self.solution is not None

    @property
    def has_exact_derivatives(self) -> bool:
        return None not in (self.solution, self.solution_dt, self.solution_dx, self.solution_dxx)


def points(spec_dim: int, t, x) -> Tuple[Tensor, Tensor, bool]:
    x = torch.as_tensor(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x.unsqueeze(0)
    if x.ndim != 2 or x.shape[1] != spec_dim:
        raise ShapeError(f"state must have dimension {spec_dim}, got shape {tuple(x.shape)}")
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    if t.shape != (x.shape[0],):
        raise ShapeError(f"times shape {tuple(t.shape)} does not match {x.shape[0]} states")
    return t, x, single


def _expect_shape(name: str, value: Tensor, shape: tuple) -> None:
    if tuple(value.shape) != shape:
        raise ShapeError(f"{name} returned shape {tuple(value.shape)}, expected {shape}")


def validate_problem(spec: ProblemSpec, samples: int = 100, seed: int = 0) -> ProblemSpec:
    """Evaluate every callable for shape consistency and check u(T, .) = g(.) at random states."""
    d = spec.dim
    if d < 1 or spec.horizon <= 0.0:
        raise DomainError(f"{spec.name}: need d >= 1 and T > 0")
    _expect_shape("x0", spec.x0, (d,))
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.uniform(0.5, 2.0, size=(samples, d)), dtype=DTYPE)
    t = torch.as_tensor(rng.uniform(0.0, spec.horizon, size=samples), dtype=DTYPE)
    y = torch.as_tensor(rng.standard_normal(samples), dtype=DTYPE)
    z = torch.as_tensor(rng.standard_normal((samples, d)), dtype=DTYPE)
    _expect_shape("drift", spec.drift(t, x, y, z), (samples, d))
    _expect_shape("diffusion", spec.diffusion(t, x, y), (samples, d, d))
    _expect_shape("driver", spec.driver(t, x, y, z), (samples,))
    g = spec.terminal(x)
    _expect_shape("terminal", g, (samples,))
    if spec.terminal_gradient is not None:
        _expect_shape("terminal_gradient", spec.terminal_gradient(x), (samples, d))
    if spec.solution is not None:
        _expect_shape("solution", spec.solution(t, x), (samples,))
        u_T = spec.solution(torch.full((samples,), spec.horizon, dtype=DTYPE), x)
        if not torch.allclose(u_T, g, rtol=1e-10, atol=1e-14):
            worst = float((u_T - g).abs().max())
            raise DomainError(f"{spec.name}: exact solution violates u(T, x) = g(x), max gap {worst:.3e}")
    if spec.solution_dt is not None:
        _expect_shape("solution_dt", spec.solution_dt(t, x), (samples,))
    if spec.solution_dx is not None:
        _expect_shape("solution_dx", spec.solution_dx(t, x), (samples, d))
    if spec.solution_dxx is not None:
        _expect_shape("solution_dxx", spec.solution_dxx(t, x), (samples, d, d))
    if spec.diffusion_dx is not None:
        if d != 1:
            raise ShapeError("diffusion_dx is defined for d = 1 only")
        _expect_shape("diffusion_dx", spec.diffusion_dx(t, x), (samples, 1))
    logger.debug("problem validated name=%s d=%d samples=%d", spec.name, d, samples)
    return spec


class TerminalFunctional(str, enum.Enum):
    SQUARE = "square"
    SUM = "sum"
    CONSTANT = "constant"


def _terminal_functional(kind: TerminalFunctional):
    if kind is TerminalFunctional.SQUARE:
        return (
            lambda x: (x**2).sum(-1),
            lambda x: 2.0 * x,
            lambda x: 2.0 * torch.eye(x.shape[-1], dtype=DTYPE).expand(x.shape[0], -1, -1),
        )
    if kind is TerminalFunctional.SUM:
        return (
            lambda x: x.sum(-1),
            lambda x: torch.ones_like(x),
            lambda x: torch.zeros(x.shape[0], x.shape[1], x.shape[1], dtype=DTYPE),
        )
    return (
        lambda x: torch.ones(x.shape[0], dtype=DTYPE),
        lambda x: torch.zeros_like(x),
        lambda x: torch.zeros(x.shape[0], x.shape[1], x.shape[1], dtype=DTYPE),
    )


def gbm_exact_state(x0, sigma: float, t, w) -> Tensor:
    """Driftless GBM X_t = X0 exp(-sigma^2 t / 2 + sigma W_t), componentwise."""
    w = torch.as_tensor(w, dtype=DTYPE)
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim == 1 and w.ndim == 2:
        t = t.unsqueeze(-1)
    return torch.as_tensor(x0, dtype=DTYPE) * torch.exp(-0.5 * sigma**2 * t + sigma * w)


def bsb_problem(
    d: int = 1,
    r: float = 0.05,
    sigma: float = 0.4,
    g: TerminalFunctional = TerminalFunctional.SQUARE,
    T: float = 1.0,
    x0: float = 1.0,
) -> ProblemSpec:
    """
    Constant-volatility Black-Scholes-Barenblatt problem.

    dX = sigma diag(X) dW, driver r (y - sum_i z_i / sigma), which equals
    r (u - grad u . x) along solutions since z_i = sigma x_i d_i u. The attached
    exact solution exp((r + sigma^2)(T - t)) g(x) solves the PDE for the square
    functional; for the others it is the same formula, consistent at t = T.
    """
    if sigma <= 0.0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    if r < 0.0:
        raise DomainError(f"r must be >= 0, got {r}")
    g_kind = TerminalFunctional(g)
    g_fn, g_grad, g_hess = _terminal_functional(g_kind)
    rate = r + sigma**2

    def growth(t: Tensor) -> Tensor:
        return torch.exp(rate * (T - t))

    spec = ProblemSpec(
        name="bsb",
        dim=d,
        horizon=T,
        x0=torch.full((d,), float(x0), dtype=DTYPE),
        drift=lambda t, x, y, z: torch.zeros_like(x),
        diffusion=lambda t, x, y: sigma * torch.diag_embed(x),
        driver=lambda t, x, y, z: r * (y - z.sum(-1) / sigma),
        terminal=g_fn,
        terminal_gradient=g_grad,
        solution=lambda t, x: growth(t) * g_fn(x),
        solution_dt=lambda t, x: -rate * growth(t) * g_fn(x),
        solution_dx=lambda t, x: growth(t).unsqueeze(-1) * g_grad(x),
        solution_dxx=lambda t, x: growth(t)[:, None, None] * g_hess(x),
        diffusion_dx=(lambda t, x: torch.full_like(x, sigma)) if d == 1 else None,
        exact_state=lambda t, w: gbm_exact_state(x0, sigma, t, w),
        decoupled=True,
        solution_solves_pde=g_kind is TerminalFunctional.SQUARE,
        parameters={"r": r, "sigma": sigma, "g": g_kind.value, "x0": x0},
    )
    return validate_problem(spec)


def affine_problem(
    d: int = 1,
    c0: float = 0.5,
    ct: float = 0.3,
    cx: float = 1.0,
    b0: float = 0.2,
    a0: float = 0.0,
    T: float = 1.0,
    x0: float = 1.0,
) -> ProblemSpec:
    """
    Manufactured problem with solution u = c0 + ct t + cx sum(x).

    Constant drift a0 and diffusion b0 I; the driver is the constant L0 u = ct + a0 cx d,
    so Euler-Maruyama reproduces u exactly along paths.
    """
    slope = torch.full((d,), float(cx), dtype=DTYPE)
    drift_vector = torch.full((d,), float(a0), dtype=DTYPE)
    phi = ct + float(drift_vector @ slope)

    def u(t: Tensor, x: Tensor) -> Tensor:
        return c0 + ct * t + x @ slope

    spec = ProblemSpec(
        name="affine",
        dim=d,
        horizon=T,
        x0=torch.full((d,), float(x0), dtype=DTYPE),
        drift=lambda t, x, y, z: drift_vector.expand(x.shape[0], d).clone(),
        diffusion=lambda t, x, y: b0 * torch.eye(d, dtype=DTYPE).expand(x.shape[0], d, d).clone(),
        driver=lambda t, x, y, z: torch.full_like(y, phi),
        terminal=lambda x: u(torch.full((x.shape[0],), T, dtype=DTYPE), x),
        terminal_gradient=lambda x: slope.expand(x.shape[0], d).clone(),
        solution=u,
        solution_dt=lambda t, x: torch.full((x.shape[0],), float(ct), dtype=DTYPE),
        solution_dx=lambda t, x: slope.expand(x.shape[0], d).clone(),
        solution_dxx=lambda t, x: torch.zeros(x.shape[0], d, d, dtype=DTYPE),
        diffusion_dx=(lambda t, x: torch.zeros_like(x)) if d == 1 else None,
        exact_state=lambda t, w: x0 + a0 * torch.as_tensor(t, dtype=DTYPE).reshape(-1, 1) + b0 * w,
        decoupled=True,
        parameters={"c0": c0, "ct": ct, "cx": cx, "b0": b0, "a0": a0, "x0": x0},
    )
    return validate_problem(spec)


def _require_derivatives(spec: ProblemSpec) -> None:
    if not spec.has_exact_derivatives:
        raise MissingDerivativeError(f"{spec.name}: exact u and its derivatives are required")


def hidden_process(spec: ProblemSpec, t: Tensor, x: Tensor, y: Tensor, grad_x: Tensor) -> Tensor:
    """z = b(t, x, y)^T grad u."""
    return torch.einsum("mji,mj->mi", spec.diffusion(t, x, y), grad_x)


def pde_residual(spec: ProblemSpec, t, x) -> Tensor:
    """L u - phi(t, x, u, b^T grad u) from the exact derivatives; zero for a true solution."""
    _require_derivatives(spec)
    t, x, single = points(spec.dim, t, x)
    u = spec.solution(t, x)
    grad = spec.solution_dx(t, x)
    z = hidden_process(spec, t, x, u, grad)
    b = spec.diffusion(t, x, u)
    generator = (
        spec.solution_dt(t, x)
        + (spec.drift(t, x, u, z) * grad).sum(-1)
        + 0.5 * torch.einsum("mij,mkj,mik->m", b, b, spec.solution_dxx(t, x))
    )
    residual = generator - spec.driver(t, x, u, z)
    return residual[0] if single else residual


def l0_l1_apply(spec: ProblemSpec, t, x) -> Tuple[Tensor, Tensor]:
    """1-D operators L0 = d/dt + a d/dx + b^2/2 d^2/dx^2 and L1 = b d/dx applied to u."""
    if spec.dim != 1:
        raise UnsupportedOperationError(f"L0/L1 are one-dimensional operators, problem has d={spec.dim}")
    _require_derivatives(spec)
    t, x, single = points(spec.dim, t, x)
    u = spec.solution(t, x)
    u_x = spec.solution_dx(t, x)[:, 0]
    b = spec.diffusion(t, x, u)[:, 0, 0]
    z = (b * u_x).unsqueeze(-1)
    a = spec.drift(t, x, u, z)[:, 0]
    l0 = spec.solution_dt(t, x) + a * u_x + 0.5 * b**2 * spec.solution_dxx(t, x)[:, 0, 0]
    l1 = b * u_x
    if single:
        return l0[0], l1[0]
    return l0, l1


def surrogate_residual(spec: ProblemSpec, net: MlpSurrogate, t, x) -> Tensor:
    """|u(t, x) - u_hat(t, x; theta)|."""
    if spec.solution is None:
        raise MissingDerivativeError(f"{spec.name}: exact u is required")
    t, x, single = points(spec.dim, t, x)
    with torch.no_grad():
        gap = (spec.solution(t, x) - net(t, x)).abs()
    return gap[0] if single else gap


def evaluation_cloud(
    spec: ProblemSpec, n_points: int = 10_000, x_low: float = 0.5, x_high: float = 2.0, seed: int = 0
) -> Tuple[Tensor, Tensor]:
    """Scrambled Halton points covering [0, T] x [x_low, x_high]^d."""
    if x_high <= x_low:
        raise DomainError(f"empty state box [{x_low}, {x_high}]")
    sample = qmc.Halton(d=spec.dim + 1, scramble=True, seed=seed).random(n_points)
    t = torch.as_tensor(spec.horizon * sample[:, 0], dtype=DTYPE)
    x = torch.as_tensor(x_low + (x_high - x_low) * sample[:, 1:], dtype=DTYPE)
    return t, x


def epsilon_theta_estimate(spec: ProblemSpec, net: MlpSurrogate, cloud: Tuple[Tensor, Tensor]) -> float:
    """Operational sup |u - u_hat| over a sampled (t, x) cloud."""
    t, x = cloud
    return float(surrogate_residual(spec, net, t, x).max())


class SolutionSource(Protocol):
    """Value and derivatives of u or u_hat along batched states."""

    def value(self, t: Tensor, x: Tensor) -> Tensor: ...

    def derivatives(self, t: Tensor, x: Tensor) -> Tuple[Tensor, Tensor]: ...

    def hessian(self, t: Tensor, x: Tensor) -> Tensor: ...


class ExactSolution:
    def __init__(self, spec: ProblemSpec):
        if spec.solution is None or spec.solution_dx is None:
            raise MissingDerivativeError(f"{spec.name}: exact u and grad u are required")
        self.spec = spec

    def value(self, t: Tensor, x: Tensor) -> Tensor:
        return self.spec.solution(t, x)

    def derivatives(self, t: Tensor, x: Tensor) -> Tuple[Tensor, Tensor]:
        if self.spec.solution_dt is None:
            raise MissingDerivativeError(f"{self.spec.name}: du/dt is not available")
        return self.spec.solution_dt(t, x), self.spec.solution_dx(t, x)

    def space_gradient(self, t: Tensor, x: Tensor) -> Tensor:
        return self.spec.solution_dx(t, x)

    def hessian(self, t: Tensor, x: Tensor) -> Tensor:
        if self.spec.solution_dxx is None:
            raise MissingDerivativeError(f"{self.spec.name}: the Hessian of u is not available")
        return self.spec.solution_dxx(t, x)


class SurrogateSolution:
    """u_hat; with record=True every evaluation stays on the autograd tape."""

    def __init__(self, net: MlpSurrogate, record: bool = False):
        self.net = net
        self.record = record

    def value(self, t: Tensor, x: Tensor) -> Tensor:
        if self.record:
            return self.net(t, x)
        with torch.no_grad():
            return self.net(t, x)

    def derivatives(self, t: Tensor, x: Tensor) -> Tuple[Tensor, Tensor]:
        return input_gradient(self.net, t, x, create_graph=self.record)

    def space_gradient(self, t: Tensor, x: Tensor) -> Tensor:
        return self.derivatives(t, x)[1]

    def hessian(self, t: Tensor, x: Tensor) -> Tensor:
        return input_hessian(self.net, t, x, create_graph=self.record)
