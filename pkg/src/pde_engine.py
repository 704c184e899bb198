"""
Module: pde_engine
Description: Finite-difference solvers for backward parabolic PDEs

    v_t + a(t,x) v_x + b(t,x) v_xx - c(t,x) v + G(t,x) = 0,  v(T,x) given,

on a nonuniform space grid: a theta-scheme (Crank-Nicolson after a short
implicit-Euler start), the nonlinear forward-agreement PDE with a
default-state dependent discount, and the Four Step cascade that turns a
1-d perturbed model into a sequence of linear PDEs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
import structlog

from src.cva_forward import CvaParams
from src.models import ModelSpec, OrderResult, fd_step, uniform_mesh
from src.numerics import (
    ConvergenceError,
    NonFiniteStateError,
    TridiagonalSystem,
    solve_tridiagonal,
)

logger = structlog.get_logger(__name__)

CRANK_NICOLSON = 0.5
RANNACHER_STEPS = 2
PICARD_TOL = 1e-10
PICARD_MAX_ITER = 5
PER_ORDER = "per_order"
MASTER = "master"

BoundaryFn = Optional[Callable[[float], float]]


@dataclass
class PdeGrid:
    """
    Space-time mesh with boundary descriptors.

    A boundary given as a callable of t is a Dirichlet condition. ``None``
    means the linearity condition: the PDE itself with v_xx = 0 and a
    one-sided first derivative.
    """

    x: np.ndarray
    t: np.ndarray
    lower: BoundaryFn = None
    upper: BoundaryFn = None
    terminal: Optional[np.ndarray] = None
    d1_weights: tuple = field(init=False, repr=False)
    d2_weights: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.x.ndim != 1 or self.x.size < 3:
            raise ValueError("space grid needs at least 3 nodes")
        if self.t.ndim != 1 or self.t.size < 2:
            raise ValueError("time grid needs at least 2 nodes")
        if np.any(np.diff(self.x) <= 0.0) or np.any(np.diff(self.t) <= 0.0):
            raise ValueError("grid nodes must be strictly increasing")
        if self.terminal is not None:
            self.terminal = np.asarray(self.terminal, dtype=float)
            if self.terminal.shape != self.x.shape:
                raise ValueError(f"terminal slice must have shape {self.x.shape}")
        h_lo = np.diff(self.x)[:-1]
        h_up = np.diff(self.x)[1:]
        span = h_lo + h_up
        self.d1_weights = (-h_up / (h_lo * span), (h_up - h_lo) / (h_lo * h_up), h_lo / (h_up * span))
        self.d2_weights = (2.0 / (h_lo * span), -2.0 / (h_lo * h_up), 2.0 / (h_up * span))

    @property
    def shape(self):
        return self.t.size, self.x.size

    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    @classmethod
    def uniform(cls, x_min: float, x_max: float, n_x: int, T: float, n_t: int, **kwargs) -> "PdeGrid":
        return cls(np.linspace(x_min, x_max, n_x + 1), uniform_mesh(0.0, T, n_t), **kwargs)

    @classmethod
    def log_spaced(cls, centre: float, width: float, n_x: int, T: float, n_t: int, **kwargs) -> "PdeGrid":
        """Geometric grid on [centre/width, centre*width]; ``centre`` is a node when n_x is even."""
        if not width > 1.0:
            raise ValueError(f"log grid width must exceed 1, got {width}")
        x = centre * np.exp(np.linspace(-np.log(width), np.log(width), n_x + 1))
        return cls(x, uniform_mesh(0.0, T, n_t), **kwargs)

    def with_terminal(self, terminal) -> "PdeGrid":
        return replace(self, terminal=np.asarray(terminal, dtype=float))

    def refined(self) -> "PdeGrid":
        """Halves both steps (inserts midpoints)."""
        x = np.sort(np.concatenate([self.x, 0.5 * (self.x[1:] + self.x[:-1])]))
        t = np.sort(np.concatenate([self.t, 0.5 * (self.t[1:] + self.t[:-1])]))
        terminal = None
        if self.terminal is not None:
            terminal = np.interp(x, self.x, self.terminal)
        return PdeGrid(x, t, self.lower, self.upper, terminal)


@dataclass(frozen=True)
class ParabolicOperator:
    """
    Coefficients of a v_x + b v_xx - c v + G as callables of (t, x_grid).
    """

    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    discount: Callable[[float, np.ndarray], np.ndarray]
    source: Optional[Callable[[float, np.ndarray], np.ndarray]] = None

    def coefficients(self, t: float, x: np.ndarray):
        a = np.broadcast_to(np.asarray(self.drift(t, x), dtype=float), x.shape)
        b = np.broadcast_to(np.asarray(self.diffusion(t, x), dtype=float), x.shape)
        c = np.broadcast_to(np.asarray(self.discount(t, x), dtype=float), x.shape)
        if np.any(b < -1e-14):
            raise ValueError(f"diffusion coefficient negative at t={t}: min b={b.min():.3e}")
        return a, b, c

    def source_at(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.source is None:
            return np.zeros_like(x)
        return np.broadcast_to(np.asarray(self.source(t, x), dtype=float), x.shape).copy()


def time_table(t_grid: np.ndarray, table: np.ndarray) -> Callable[[float, np.ndarray], np.ndarray]:
    """Wraps a (M+1, N+1) table as a coefficient callable, linear in t."""
    t_grid = np.asarray(t_grid, dtype=float)
    table = np.asarray(table, dtype=float)

    def lookup(t, x):
        k = int(np.clip(np.searchsorted(t_grid, t, side="right") - 1, 0, t_grid.size - 2))
        w = (t - t_grid[k]) / (t_grid[k + 1] - t_grid[k])
        return (1.0 - w) * table[k] + w * table[k + 1]

    return lookup


def _assemble(grid: PdeGrid, a, b, c):
    """Tridiagonal rows of the spatial operator a D1 + b D2 - c."""
    d1_lo, d1_mid, d1_up = grid.d1_weights
    d2_lo, d2_mid, d2_up = grid.d2_weights
    n = grid.x.size
    sub = np.empty(n - 1)
    diag = np.empty(n)
    sup = np.empty(n - 1)
    ai, bi = a[1:-1], b[1:-1]
    sub[:-1] = ai * d1_lo + bi * d2_lo
    diag[1:-1] = ai * d1_mid + bi * d2_mid - c[1:-1]
    sup[1:] = ai * d1_up + bi * d2_up
    h0 = grid.x[1] - grid.x[0]
    hn = grid.x[-1] - grid.x[-2]
    diag[0] = -a[0] / h0 - c[0]
    sup[0] = a[0] / h0
    sub[-1] = -a[-1] / hn
    diag[-1] = a[-1] / hn - c[-1]
    return sub, diag, sup


def _apply(rows, v):
    sub, diag, sup = rows
    out = diag * v
    out[1:] += sub * v[:-1]
    out[:-1] += sup * v[1:]
    return out


def _theta_step(v_next, dt, theta, rows_cur, rows_next, source_cur, source_next, lower, upper):
    sub, diag, sup = rows_cur
    rhs = v_next + dt * (theta * source_cur + (1.0 - theta) * source_next)
    if theta < 1.0:
        rhs = rhs + (1.0 - theta) * dt * _apply(rows_next, v_next)
    m_sub = -theta * dt * sub
    m_diag = 1.0 - theta * dt * diag
    m_sup = -theta * dt * sup
    if lower is not None:
        m_diag[0], m_sup[0], rhs[0] = 1.0, 0.0, lower
    if upper is not None:
        m_diag[-1], m_sub[-1], rhs[-1] = 1.0, 0.0, upper
    return solve_tridiagonal(TridiagonalSystem(m_sub, m_diag, m_sup, rhs))


def _schedule(t_grid: np.ndarray, rannacher_steps: int):
    """Yields (k, [(t_from, t_to, theta), ...]) from maturity backwards."""
    n_steps = t_grid.size - 1
    for j in range(n_steps):
        k = n_steps - 1 - j
        t_hi, t_lo = t_grid[k + 1], t_grid[k]
        if j < rannacher_steps:
            mid = 0.5 * (t_hi + t_lo)
            yield k, [(t_hi, mid, 1.0), (mid, t_lo, 1.0)]
        else:
            yield k, [(t_hi, t_lo, None)]


def _boundary(fn: BoundaryFn, t: float):
    return None if fn is None else float(fn(t))


def _check_finite(values, what: str):
    if not np.all(np.isfinite(values)):
        logger.error("[PDE] non-finite solution", solve=what)
        raise NonFiniteStateError(f"{what}: non-finite values in the PDE solution")


def solve_linear_parabolic(op: ParabolicOperator, grid: PdeGrid, theta: float = CRANK_NICOLSON,
                           rannacher_steps: int = RANNACHER_STEPS) -> np.ndarray:
    """
    Solves the linear backward PDE from the grid's terminal slice.

    Args:
        op (ParabolicOperator): Coefficients and source.
        grid (PdeGrid): Mesh, boundary descriptors and terminal slice.
        theta (float): Time-stepping weight after the start-up steps.
        rannacher_steps (int): Leading steps replaced by two implicit half-steps.

    Returns:
        np.ndarray: Surface of shape (len(t), len(x)); row k is the solution at t[k].

    Raises:
        ValueError: If the terminal slice is missing or the operator is not parabolic.
        SingularPivotError: If a step matrix is singular.
        NonFiniteStateError: If the solution blows up.
    """
    if grid.terminal is None:
        raise ValueError("grid carries no terminal slice")
    start = time.perf_counter()
    x = grid.x
    surface = np.empty(grid.shape)
    surface[-1] = grid.terminal
    v = grid.terminal.copy()
    for k, substeps in _schedule(grid.t, rannacher_steps):
        for t_from, t_to, step_theta in substeps:
            step_theta = theta if step_theta is None else step_theta
            rows_cur = _assemble(grid, *op.coefficients(t_to, x))
            rows_next = _assemble(grid, *op.coefficients(t_from, x)) if step_theta < 1.0 else None
            v = _theta_step(v, t_from - t_to, step_theta, rows_cur, rows_next,
                            op.source_at(t_to, x), op.source_at(t_from, x),
                            _boundary(grid.lower, t_to), _boundary(grid.upper, t_to))
        surface[k] = v
    _check_finite(surface, "linear parabolic")
    logger.debug("[PDE] linear solve finished", n_x=x.size, n_t=grid.t.size,
                 elapsed=round(time.perf_counter() - start, 4))
    return surface


# ---------------------------------------------------------------------------
# Nonlinear forward-agreement benchmark
# ---------------------------------------------------------------------------

def cva_grid(p: CvaParams, n_x: int = 400, n_t: int = 2000, width: float = 8.0) -> PdeGrid:
    """Log-spaced grid on [S0/width, S0*width] with S0 on a node."""
    if n_x % 2:
        n_x += 1
    return PdeGrid.log_spaced(p.S0, width, n_x, p.T, n_t)


def solve_nonlinear_cva(p: CvaParams, grid: PdeGrid, max_picard: int = PICARD_MAX_ITER,
                        tol: float = PICARD_TOL) -> np.ndarray:
    """
    Solves V_t + r S V_S + sigma^2 S^2 V_SS / 2 - (mu_bar + h 1{V >= 0}) V = 0, V(T,S) = S - K.

    Dirichlet rows use the far-field values e^{-(mu_bar+h) tau}(M e^{r tau} - K)
    at the top and e^{-mu_bar tau}(m e^{r tau} - K) at the bottom. In each step
    the implicit discount starts from the indicator of the later time level
    and is refreshed by Picard iteration until the default-state pattern is
    stable or successive iterates agree to ``tol``.

    Raises:
        ConvergenceError: If the refresh does not settle within ``max_picard`` solves.
    """
    start = time.perf_counter()
    x = grid.x
    m_low, m_high = x[0], x[-1]
    a = p.r * x
    b = 0.5 * p.sigma ** 2 * x ** 2

    def lower(t):
        tau = p.T - t
        return np.exp(-p.mu_bar * tau) * (m_low * np.exp(p.r * tau) - p.K)

    def upper(t):
        tau = p.T - t
        return np.exp(-(p.mu_bar + p.h) * tau) * (m_high * np.exp(p.r * tau) - p.K)

    def rows_for(v):
        return _assemble(grid, a, b, p.mu_bar + p.h * (v >= 0.0))

    zero = np.zeros_like(x)
    surface = np.empty(grid.shape)
    v = x - p.K
    surface[-1] = v
    total_refresh = 0
    for k, substeps in _schedule(grid.t, RANNACHER_STEPS):
        for t_from, t_to, step_theta in substeps:
            step_theta = CRANK_NICOLSON if step_theta is None else step_theta
            rows_next = rows_for(v) if step_theta < 1.0 else None
            pattern = v >= 0.0
            previous = v
            for iteration in range(max_picard):
                rows_cur = _assemble(grid, a, b, p.mu_bar + p.h * pattern)
                candidate = _theta_step(v, t_from - t_to, step_theta, rows_cur, rows_next,
                                        zero, zero, lower(t_to), upper(t_to))
                new_pattern = candidate >= 0.0
                settled = np.array_equal(new_pattern, pattern) or np.max(np.abs(candidate - previous)) < tol
                pattern, previous = new_pattern, candidate
                if settled:
                    total_refresh += iteration
                    break
            else:
                logger.error("[PDE] indicator refresh did not settle", t=t_to, iterations=max_picard)
                raise ConvergenceError(f"indicator refresh did not settle at t={t_to:.6g}")
            v = candidate
        surface[k] = v
    _check_finite(surface, "nonlinear cva")
    logger.info("[PDE] nonlinear cva solve finished", n_x=x.size, n_t=grid.t.size, refreshes=total_refresh,
                elapsed=round(time.perf_counter() - start, 4))
    return surface


def cva_pde_value(p: CvaParams, n_x: int = 400, n_t: int = 2000) -> float:
    """Nonlinear benchmark value at (0, S0)."""
    grid = cva_grid(p, n_x, n_t)
    surface = solve_nonlinear_cva(p, grid)
    return float(np.interp(p.S0, grid.x, surface[0]))


# ---------------------------------------------------------------------------
# Four Step cascade
# ---------------------------------------------------------------------------

def space_derivative(values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    First derivative along the last axis: fourth-order central differences on
    a uniform grid, second-order (three-point) otherwise; edges one-sided.
    """
    values = np.asarray(values, dtype=float)
    steps = np.diff(x)
    if x.size >= 5 and np.allclose(steps, steps[0], rtol=1e-10, atol=0.0):
        h = steps[0]
        out = np.gradient(values, h, axis=-1, edge_order=2)
        out[..., 2:-2] = (-values[..., 4:] + 8.0 * values[..., 3:-1]
                          - 8.0 * values[..., 1:-3] + values[..., :-4]) / (12.0 * h)
        return out
    return np.gradient(values, x, axis=-1, edge_order=2)


def second_derivative(values: np.ndarray, grid: PdeGrid) -> np.ndarray:
    """Three-point second derivative (the solver's own stencil); edges copy their neighbour."""
    d2_lo, d2_mid, d2_up = grid.d2_weights
    out = np.empty_like(values)
    out[..., 1:-1] = d2_lo * values[..., :-2] + d2_mid * values[..., 1:-1] + d2_up * values[..., 2:]
    out[..., 0] = out[..., 1]
    out[..., -1] = out[..., -2]
    return out


def _require_scalar_model(model: ModelSpec):
    if model.dim != 1 or model.n_brownian != 1:
        raise ValueError(f"the PDE cascade handles 1-d models only, got d={model.dim}, m={model.n_brownian}")


def _state(x):
    return x.reshape(-1, 1)


def _directional(fn, t, xb, v, z, dv, dz):
    """Central difference of fn(t, x, v, z) along the direction (dv, dz)."""
    h = fd_step(np.abs(v) + np.abs(z[:, 0])) / (1.0 + np.abs(dv) + np.abs(dz[:, 0]))
    hz = h[:, None]
    up = np.asarray(fn(t, xb, v + h * dv, z + hz * dz), dtype=float)
    dn = np.asarray(fn(t, xb, v - h * dv, z - hz * dz), dtype=float)
    return (up - dn) / (2.0 * h.reshape((-1,) + (1,) * (up.ndim - 1)))


def _linear_coefficients(model: ModelSpec, t: float, x: np.ndarray, v=None, z=None, feedback: bool = False):
    """(a, b, c, gamma) of the model at a time slice, optionally with feedback frozen at (v, z)."""
    xb = _state(x)
    if feedback:
        drift = model.gamma0(t, xb, v, z[:, None])[:, 0]
        gam = model.gamma(t, xb, v, z[:, None])[:, 0, 0]
    else:
        drift = np.asarray(model.drift(t, xb), dtype=float)[:, 0]
        gam = np.asarray(model.sigma(t, xb), dtype=float)[:, 0, 0]
    if model.theta is not None:
        drift = drift - gam * np.asarray(model.theta(t, xb), dtype=float)[:, 0]
    c = np.asarray(model.discount(t, xb), dtype=float)
    return drift, 0.5 * gam ** 2, c, gam


def _slices(model: ModelSpec, grid: PdeGrid, v_prev=None, z_prev=None, feedback=False):
    rows = [_linear_coefficients(model, t, grid.x,
                                 None if v_prev is None else v_prev[k],
                                 None if z_prev is None else z_prev[k], feedback)
            for k, t in enumerate(grid.t)]
    return tuple(np.vstack(part) for part in zip(*rows))


def _solve_tabulated(grid: PdeGrid, drift, diffusion, discount, source, terminal):
    op = ParabolicOperator(
        drift=time_table(grid.t, drift),
        diffusion=time_table(grid.t, diffusion),
        discount=time_table(grid.t, discount),
        source=None if source is None else time_table(grid.t, source),
    )
    return solve_linear_parabolic(op, grid.with_terminal(terminal))


def _per_order(model: ModelSpec, grid: PdeGrid, order: int) -> List[OrderResult]:
    x, t_grid = grid.x, grid.t
    xb = _state(x)
    drift, diffusion, discount, sigma = _slices(model, grid)
    terminal = np.asarray(model.payoff(xb), dtype=float)
    v0 = _solve_tabulated(grid, drift, diffusion, discount, None, terminal)
    dv0 = space_derivative(v0, x)
    z0 = dv0 * sigma
    results = [OrderResult(0, t_grid, x, v0, z0)]
    if order == 0:
        return results

    theta = np.zeros_like(v0)
    if model.theta is not None:
        theta = np.vstack([np.asarray(model.theta(t, xb), dtype=float)[:, 0] for t in t_grid])
    mu0 = np.vstack([model.feedback_drift(t, xb, v0[k], z0[k][:, None])[:, 0] for k, t in enumerate(t_grid)])
    eta0 = np.vstack([model.feedback_vol(t, xb, v0[k], z0[k][:, None])[:, 0, 0] for k, t in enumerate(t_grid)])
    g0 = np.vstack([model.g(t, xb, v0[k], z0[k][:, None]) for k, t in enumerate(t_grid)])
    d2v0 = second_derivative(v0, grid)
    source1 = dv0 * mu0 + d2v0 * sigma * eta0 + g0 - theta * eta0 * dv0
    zero = np.zeros_like(terminal)
    v1 = _solve_tabulated(grid, drift, diffusion, discount, source1, zero)
    dv1 = space_derivative(v1, x)
    z1 = dv1 * sigma + dv0 * eta0
    results.append(OrderResult(1, t_grid, x, v1, z1))
    if order == 1:
        return results

    # (v1 d/dv + z1 d/dz) applied to mu, eta and g at order-0 arguments
    dmu = np.empty_like(v0)
    deta = np.empty_like(v0)
    dg = np.empty_like(v0)
    for k, t in enumerate(t_grid):
        zk, z1k = z0[k][:, None], z1[k][:, None]
        if model.mu is not None:
            dmu[k] = _directional(model.mu, t, xb, v0[k], zk, v1[k], z1k)[:, 0]
        else:
            dmu[k] = 0.0
        if model.eta is not None:
            deta[k] = _directional(model.eta, t, xb, v0[k], zk, v1[k], z1k)[:, 0, 0]
        else:
            deta[k] = 0.0
        dg[k] = (model.g_dv(t, xb, v0[k], zk) * v1[k]
                 + np.sum(model.g_dz(t, xb, v0[k], zk) * z1k, axis=1))
    d2v1 = second_derivative(v1, grid)
    source2 = (dv1 * mu0 + dv0 * dmu + d2v1 * sigma * eta0 + 0.5 * d2v0 * eta0 ** 2
               + d2v0 * sigma * deta + dg - theta * (dv1 * eta0 + dv0 * deta))
    v2 = _solve_tabulated(grid, drift, diffusion, discount, source2, zero)
    z2 = space_derivative(v2, x) * sigma + dv1 * eta0 + dv0 * deta
    results.append(OrderResult(2, t_grid, x, v2, z2))
    return results


def cascade_step(model: ModelSpec, prev: Sequence[OrderResult], grid: PdeGrid) -> OrderResult:
    """
    One master-recursion step: solves

        (d/dt + L[i-1]) v[i] - c v[i] + eps g(v[i-1], z[i-1]) = 0,  v[i](T) = payoff,

    where L[i-1] carries the drift gamma0 and diffusion gamma.gamma/2 frozen at
    the previous iterate. The linear discount and theta terms act on the
    current iterate. Returns v[i] with z[i] = v[i]_x gamma(v[i-1], z[i-1]).
    """
    _require_scalar_model(model)
    if not prev:
        raise ValueError("cascade_step needs the previous iterate")
    last = prev[-1]
    if not (np.array_equal(last.t_grid, grid.t) and np.array_equal(last.x_grid, grid.x)):
        raise ValueError("previous iterate lives on a different grid")
    x, t_grid = grid.x, grid.t
    xb = _state(x)
    drift, diffusion, discount, gam = _slices(model, grid, last.values, last.vols, feedback=True)
    source = None
    if model.generator is not None and model.epsilon != 0.0:
        source = model.epsilon * np.vstack(
            [model.g(t, xb, last.values[k], last.vols[k][:, None]) for k, t in enumerate(t_grid)])
    values = _solve_tabulated(grid, drift, diffusion, discount, source, np.asarray(model.payoff(xb), dtype=float))
    vols = space_derivative(values, x) * gam
    return OrderResult(last.order + 1, t_grid, x, values, vols)


def cascade_orders(model: ModelSpec, grid: PdeGrid, order: int, route: str = PER_ORDER) -> List[OrderResult]:
    """
    Per-order surfaces v(0..order), z(0..order), or master iterates v[0..order].

    Args:
        model (ModelSpec): A 1-d model with one Brownian factor.
        grid (PdeGrid): Mesh and boundary descriptors (terminal slice is set here).
        order (int): Highest order (per-order route: at most 2) or iterate.
        route (str): ``"per_order"`` for the explicit order sources,
            ``"master"`` for the consolidated recursion.

    Returns:
        list: OrderResult per order or iterate, index 0 first.
    """
    _require_scalar_model(model)
    if order < 0:
        raise ValueError(f"order must be nonnegative, got {order}")
    start = time.perf_counter()
    if route == PER_ORDER:
        if order > 2:
            raise ValueError("the per-order route provides orders 0, 1 and 2")
        results = _per_order(model, grid, order)
    elif route == MASTER:
        results = _per_order(model, grid, 0)
        for _ in range(order):
            results.append(cascade_step(model, results, grid))
    else:
        raise ValueError(f"unknown cascade route {route!r}")
    logger.info("[PDE] cascade finished", route=route, order=order, model=model.name,
                elapsed=round(time.perf_counter() - start, 4))
    return results


def combine_orders(results: Sequence[OrderResult], epsilon: float, upto: Optional[int] = None) -> np.ndarray:
    """Sum over k <= upto of epsilon^k v(k) on the shared grid."""
    upto = len(results) - 1 if upto is None else upto
    return sum(epsilon ** k * results[k].values for k in range(upto + 1))


def surface_rows(result: OrderResult):
    """Rows (t, x, value), row-major in t then x."""
    for k, t in enumerate(result.t_grid):
        for j, x in enumerate(result.x_grid):
            yield t, x, result.values[k, j]
