"""
Module: asymptotic
Description: Small-volatility expansion engine. Builds the deterministic
             expansion tables of a forward SDE whose diffusion vanishes at
             delta = 0 and assembles value and volatility coefficients of
             E[int e^{-int c} G du] to second order in delta.

A forward process dX = gamma_0(X, delta) dt + gamma_a(X, delta) dW^a with
gamma_a(x, 0) = 0 collapses to an ODE at delta = 0. Every coefficient below
is a deterministic functional of that ODE path X0, its flow Y and the delta
derivatives of the coefficients evaluated along it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Mapping, Optional, Sequence

import numpy as np
import structlog

from src.models import (
    ModelSpec,
    OrderResult,
    fd_step,
    gradient_fd,
    jacobian_fd,
)
from src.numerics import NumericalError, cumulative_trapezoid, rk4_solve, trapezoid

logger = structlog.get_logger(__name__)

DEFAULT_NODES = 200
NESTED_REL_STEP = 1e-4
DELTA2_STEP = 1e-3
IDENTITY_TOL = 1e-8
BRIDGE_NODES = 50

DERIVATIVE_NAMES = (
    "jacobian",
    "hessian",
    "drift_delta",
    "drift_delta2",
    "jacobian_delta",
    "diffusion_delta",
    "diffusion_delta2",
)


def _delta_diff(f: Callable[[float], np.ndarray], delta: float) -> np.ndarray:
    h = float(fd_step(delta))
    return (np.asarray(f(delta + h)) - np.asarray(f(delta - h))) / (2.0 * h)


def _delta_diff2(f: Callable[[float], np.ndarray], delta: float) -> np.ndarray:
    h = float(fd_step(delta, DELTA2_STEP))
    return (np.asarray(f(delta + h)) - 2.0 * np.asarray(f(delta)) + np.asarray(f(delta - h))) / (h * h)


@dataclass(frozen=True)
class DeltaSde:
    """
    Forward SDE indexed by a volatility-counting parameter delta.

    ``drift(x, delta)`` maps a batch (n, d) to (n, d); ``diffusion(x, delta)``
    maps it to (n, d, m). ``derivatives`` may hold analytic callbacks under
    the names in DERIVATIVE_NAMES, each with the (x, delta) signature; any
    missing one is replaced by central differences.
    """

    dim: int
    n_brownian: int
    drift: Callable
    diffusion: Callable
    x0: np.ndarray
    t0: float
    T: float
    derivatives: Mapping[str, Callable] = field(default_factory=dict)
    name: str = "delta-sde"

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if self.x0.shape != (self.dim,):
            raise ValueError(f"x0 must have shape ({self.dim},), got {self.x0.shape}")
        if not self.T > self.t0:
            raise ValueError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        unknown = set(self.derivatives) - set(DERIVATIVE_NAMES)
        if unknown:
            raise ValueError(f"unknown derivative callbacks: {sorted(unknown)}")
        sample_points = np.concatenate([
            self.x0[None, :] * (1.0 + np.linspace(-0.5, 0.5, 5))[:, None],
            self.x0[None, :] + np.linspace(-1.0, 1.0, 5)[:, None],
        ])
        residual = np.abs(np.asarray(self.diffusion(sample_points, 0.0), dtype=float))
        scale = 1.0 + np.abs(sample_points)[:, :, None]
        if np.any(residual > 1e-12 * scale):
            raise ValueError(f"{self.name}: diffusion must vanish at delta=0, max |gamma_a(x, 0)| = {residual.max():.3g}")

    def anchored(self, t: float, x) -> "DeltaSde":
        """The same SDE started from state ``x`` at time ``t``."""
        return replace(self, t0=float(t), x0=np.atleast_1d(np.asarray(x, dtype=float)))

    def _analytic(self, name: str) -> Optional[Callable]:
        return self.derivatives.get(name)

    def drift_jacobian(self, x, delta: float) -> np.ndarray:
        """d gamma_0^k / d x^l, shape (n, d, d)."""
        fn = self._analytic("jacobian")
        if fn is not None:
            return np.asarray(fn(x, delta), dtype=float)
        return jacobian_fd(lambda y: self.drift(y, delta), x)

    def drift_hessian(self, x, delta: float) -> np.ndarray:
        """Second derivatives of the drift, shape (n, d, d, d) indexed [k, l, m]."""
        fn = self._analytic("hessian")
        if fn is not None:
            return np.asarray(fn(x, delta), dtype=float)
        return jacobian_fd(lambda y: self.drift_jacobian(y, delta), x, NESTED_REL_STEP)

    def drift_delta(self, x, delta: float) -> np.ndarray:
        fn = self._analytic("drift_delta")
        if fn is not None:
            return np.asarray(fn(x, delta), dtype=float)
        return _delta_diff(lambda s: self.drift(x, s), delta)

    def drift_delta2(self, x, delta: float) -> np.ndarray:
        fn = self._analytic("drift_delta2")
        if fn is not None:
            return np.asarray(fn(x, delta), dtype=float)
        return _delta_diff2(lambda s: self.drift(x, s), delta)

    def drift_jacobian_delta(self, x, delta: float) -> np.ndarray:
        """Mixed derivative d/dx^l d/d delta of gamma_0^k, shape (n, d, d)."""
        fn = self._analytic("jacobian_delta")
        if fn is not None:
            return np.asarray(fn(x, delta), dtype=float)
        return jacobian_fd(lambda y: self.drift_delta(y, delta), x, NESTED_REL_STEP)

    def diffusion_delta(self, x, delta: float) -> np.ndarray:
        fn = self._analytic("diffusion_delta")
        if fn is not None:
            return np.asarray(fn(x, delta), dtype=float)
        return _delta_diff(lambda s: self.diffusion(x, s), delta)

    def diffusion_delta2(self, x, delta: float) -> np.ndarray:
        fn = self._analytic("diffusion_delta2")
        if fn is not None:
            return np.asarray(fn(x, delta), dtype=float)
        return _delta_diff2(lambda s: self.diffusion(x, s), delta)


@dataclass(frozen=True)
class ExpansionTables:
    """
    Expansion objects on a time mesh starting at the anchor (t0, x0).

    Shapes with K + 1 mesh nodes, state dimension d and m Brownian columns:
    X0, D_bar, E_bar are (K+1, d); Y, Yinv, K_cum, H_bar are (K+1, d, d);
    X1, X2 are (K+1, d, m). ``K_cum[u]`` is the running Ito-isometry integral
    whose sandwich Y_u K(u ^ s) Y_s^T is the covariance of the first delta
    derivative of X.
    """

    mesh: np.ndarray
    X0: np.ndarray
    Y: np.ndarray
    Yinv: np.ndarray
    D_bar: np.ndarray
    K_cum: np.ndarray
    E_bar: np.ndarray
    H_bar: np.ndarray
    X1: np.ndarray
    X2: np.ndarray

    @property
    def anchor(self) -> np.ndarray:
        return self.X0[0]

    @property
    def size(self) -> int:
        return self.mesh.size

    def cov(self, i: int, j: int) -> np.ndarray:
        return self.Y[i] @ self.K_cum[min(i, j)] @ self.Y[j].T

    def dd(self, i: int, j: int) -> np.ndarray:
        return np.outer(self.D_bar[i], self.D_bar[j]) + self.cov(i, j)

    def dd_diagonal(self) -> np.ndarray:
        """Second moments of the first delta derivative at equal times, (K+1, d, d)."""
        cov = np.einsum("uik,ukl,ujl->uij", self.Y, self.K_cum, self.Y)
        return np.einsum("ui,uj->uij", self.D_bar, self.D_bar) + cov

    def dd_matrix(self) -> np.ndarray:
        """All pairwise second moments, (K+1, K+1, d, d)."""
        idx = np.arange(self.size)
        k_min = self.K_cum[np.minimum.outer(idx, idx)]
        cov = np.einsum("uik,uvkl,vjl->uvij", self.Y, k_min, self.Y)
        return np.einsum("ui,vj->uvij", self.D_bar, self.D_bar) + cov


def build_tables(sde: DeltaSde, mesh=None, n_nodes: int = DEFAULT_NODES) -> ExpansionTables:
    """
    Solves the delta = 0 path and its flow, then integrates every barred
    expansion quantity on the mesh.

    Args:
        sde (DeltaSde): Anchored SDE.
        mesh: Optional strictly increasing mesh from sde.t0 to sde.T.
        n_nodes (int): Number of uniform nodes when no mesh is given.

    Returns:
        ExpansionTables: Tables on the mesh.

    Raises:
        NonFiniteStateError: If the ODE solve blows up.
        NumericalError: If Y Y^{-1} drifts away from the identity.
    """
    if mesh is None:
        if n_nodes < 2:
            raise ValueError("expansion mesh needs at least two nodes")
        mesh = np.linspace(sde.t0, sde.T, n_nodes)
    mesh = np.asarray(mesh, dtype=float)
    if not (np.isclose(mesh[0], sde.t0) and np.isclose(mesh[-1], sde.T)):
        raise ValueError(f"mesh must run from {sde.t0} to {sde.T}")
    d = sde.dim
    eye = np.eye(d)

    def flow(t, state):
        x = state[:d]
        Y = state[d:d + d * d].reshape(d, d)
        Yi = state[d + d * d:].reshape(d, d)
        J = sde.drift_jacobian(x[None, :], 0.0)[0]
        return np.concatenate([np.asarray(sde.drift(x[None, :], 0.0), dtype=float)[0],
                               (J @ Y).ravel(), (-Yi @ J).ravel()])

    traj = rk4_solve(flow, np.concatenate([sde.x0, eye.ravel(), eye.ravel()]), mesh)
    X0 = traj[:, :d]
    Y = traj[:, d:d + d * d].reshape(-1, d, d)
    Yinv = traj[:, d + d * d:].reshape(-1, d, d)
    deviation = float(np.max(np.abs(Y @ Yinv - eye)))
    if deviation > IDENTITY_TOL:
        raise NumericalError(f"flow inverse drifted from identity by {deviation:.3g}")

    J2 = sde.drift_hessian(X0, 0.0)
    drift_d = sde.drift_delta(X0, 0.0)
    drift_d2 = sde.drift_delta2(X0, 0.0)
    drift_xd = sde.drift_jacobian_delta(X0, 0.0)
    vol_d = sde.diffusion_delta(X0, 0.0)

    D_bar = np.einsum("uij,uj->ui", Y, cumulative_trapezoid(np.einsum("uij,uj->ui", Yinv, drift_d), mesh))
    pulled = np.einsum("uij,uja->uia", Yinv, vol_d)
    K_cum = cumulative_trapezoid(np.einsum("uia,uja->uij", pulled, pulled), mesh)
    dd = np.einsum("ui,uj->uij", D_bar, D_bar) + np.einsum("uik,ukl,ujl->uij", Y, K_cum, Y)

    e_source = (np.einsum("uklm,ulm->uk", J2, dd) + 2.0 * np.einsum("ukl,ul->uk", drift_xd, D_bar) + drift_d2)
    E_bar = np.einsum("uij,uj->ui", Y, cumulative_trapezoid(np.einsum("uij,uj->ui", Yinv, e_source), mesh))
    h_source = np.einsum("ukmn,un->ukm", J2, D_bar) + drift_xd
    H_bar = np.einsum("uij,ujk->uik", Y,
                      cumulative_trapezoid(np.einsum("uij,ujk,ukl->uil", Yinv, h_source, Y), mesh))

    anchor = sde.x0[None, :]
    vol_d_x = sde.diffusion_delta(anchor, 0.0)[0]
    vol_d2_x = sde.diffusion_delta2(anchor, 0.0)[0]
    X1 = np.einsum("uij,ja->uia", Y, vol_d_x)
    X2 = np.einsum("uij,ja->uia", Y, vol_d2_x) + 2.0 * np.einsum("uij,ja->uia", H_bar, vol_d_x)

    logger.debug("[ASYMPTOTIC] tables built", sde=sde.name, t0=sde.t0, nodes=mesh.size, deviation=deviation)
    return ExpansionTables(mesh, X0, Y, Yinv, D_bar, K_cum, E_bar, H_bar, X1, X2)


@dataclass(frozen=True)
class ScalarField:
    """
    Scalar function G(u, x, delta) on a batch: u (n,), x (n, d) -> (n,).

    Analytic derivative callbacks share the signature; the ones left as None
    fall back to central differences.
    """

    fn: Callable
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None
    delta: Optional[Callable] = None
    grad_delta: Optional[Callable] = None
    delta2: Optional[Callable] = None

    @classmethod
    def constant(cls, value: float) -> "ScalarField":
        return cls(
            fn=lambda u, x, d: np.full(x.shape[0], float(value)),
            grad=lambda u, x, d: np.zeros_like(x),
            hess=lambda u, x, d: np.zeros(x.shape + (x.shape[1],)),
            delta=lambda u, x, d: np.zeros(x.shape[0]),
            grad_delta=lambda u, x, d: np.zeros_like(x),
            delta2=lambda u, x, d: np.zeros(x.shape[0]),
        )

    @classmethod
    def state_only(cls, fn: Callable, grad: Optional[Callable] = None,
                   hess: Optional[Callable] = None) -> "ScalarField":
        """Lifts f(u, x) without delta dependence."""
        return cls(
            fn=lambda u, x, d: fn(u, x),
            grad=None if grad is None else (lambda u, x, d: grad(u, x)),
            hess=None if hess is None else (lambda u, x, d: hess(u, x)),
            delta=lambda u, x, d: np.zeros(x.shape[0]),
            grad_delta=lambda u, x, d: np.zeros_like(x),
            delta2=lambda u, x, d: np.zeros(x.shape[0]),
        )

    def value(self, u, x, delta: float) -> np.ndarray:
        return np.asarray(self.fn(u, x, delta), dtype=float)

    def gradient(self, u, x, delta: float) -> np.ndarray:
        if self.grad is not None:
            return np.asarray(self.grad(u, x, delta), dtype=float)
        return gradient_fd(lambda y: self.fn(u, y, delta), x)

    def hessian(self, u, x, delta: float) -> np.ndarray:
        if self.hess is not None:
            return np.asarray(self.hess(u, x, delta), dtype=float)
        return jacobian_fd(lambda y: self.gradient(u, y, delta), x, NESTED_REL_STEP)

    def d_delta(self, u, x, delta: float) -> np.ndarray:
        if self.delta is not None:
            return np.asarray(self.delta(u, x, delta), dtype=float)
        return _delta_diff(lambda s: self.fn(u, x, s), delta)

    def grad_d_delta(self, u, x, delta: float) -> np.ndarray:
        if self.grad_delta is not None:
            return np.asarray(self.grad_delta(u, x, delta), dtype=float)
        return gradient_fd(lambda y: self.d_delta(u, y, delta), x, NESTED_REL_STEP)

    def d_delta2(self, u, x, delta: float) -> np.ndarray:
        if self.delta2 is not None:
            return np.asarray(self.delta2(u, x, delta), dtype=float)
        return _delta_diff2(lambda s: self.fn(u, x, s), delta)


@dataclass(frozen=True)
class Expansion:
    """Coefficients of f0 + delta f1 + delta^2 f2 / 2."""

    f0: np.ndarray
    f1: np.ndarray
    f2: np.ndarray

    def at(self, delta: float):
        return self.f0 + delta * self.f1 + 0.5 * delta * delta * self.f2


@dataclass(frozen=True)
class _Along:
    """A scalar field and its derivatives evaluated along the delta = 0 path."""

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    d: np.ndarray
    grad_d: np.ndarray
    d2: np.ndarray

    @classmethod
    def of(cls, f: ScalarField, tables: ExpansionTables, with_delta: bool = True) -> "_Along":
        u, x = tables.mesh, tables.X0
        n = u.size
        if with_delta:
            d, grad_d, d2 = f.d_delta(u, x, 0.0), f.grad_d_delta(u, x, 0.0), f.d_delta2(u, x, 0.0)
        else:
            d, grad_d, d2 = np.zeros(n), np.zeros_like(x), np.zeros(n)
        return cls(f.value(u, x, 0.0), f.gradient(u, x, 0.0), f.hessian(u, x, 0.0), d, grad_d, d2)


def _collapse(integrand: np.ndarray, mesh: np.ndarray, terminal: bool) -> np.ndarray:
    if terminal:
        return integrand[-1]
    return trapezoid(integrand, mesh, axis=0)


def _discounting(tables: ExpansionTables, c: _Along):
    mesh = tables.mesh
    rho = np.exp(-cumulative_trapezoid(c.value, mesh))
    A_bar = cumulative_trapezoid(np.einsum("ui,ui->u", c.grad, tables.D_bar), mesh)
    return rho, A_bar


def v_expand(tables: ExpansionTables, c: ScalarField, G: ScalarField, terminal: bool = False) -> Expansion:
    """
    Value coefficients of E[int_t^T e^{-int_t^u c} G(u, X_u, delta) du].

    With ``terminal`` the time integral is dropped and G is read at u = T,
    which gives E[e^{-int_t^T c} G(T, X_T, delta)].

    Args:
        tables (ExpansionTables): Tables anchored at the evaluation point.
        c (ScalarField): Discount rate; its delta dependence is ignored.
        G (ScalarField): Running (or terminal) density.
        terminal (bool): Terminal mode.

    Returns:
        Expansion: Scalar coefficients (f0, f1, f2).
    """
    mesh = tables.mesh
    cf = _Along.of(c, tables, with_delta=False)
    gf = _Along.of(G, tables)
    rho, A_bar = _discounting(tables, cf)
    D, E = tables.D_bar, tables.E_bar
    dd = tables.dd_diagonal()

    r0 = rho * gf.value
    r1 = rho * (np.einsum("ui,ui->u", gf.grad, D) + gf.d - gf.value * A_bar)

    c_curv = cumulative_trapezoid(np.einsum("uij,uij->u", cf.hess, dd) + np.einsum("ui,ui->u", cf.grad, E), mesh)
    if np.any(cf.grad != 0.0):
        full = tables.dd_matrix()
        idx = np.arange(mesh.size)
        # cross[u, j] = int_t^u dc_i(s) DD^{ij}(s, u) ds
        cross = cumulative_trapezoid(np.einsum("si,suij->suj", cf.grad, full), mesh, axis=0)[idx, idx]
        pair = np.einsum("si,svij,vj->sv", cf.grad, full, cf.grad)
        square = cumulative_trapezoid(cumulative_trapezoid(pair, mesh, axis=0), mesh, axis=1)[idx, idx]
    else:
        cross = np.zeros_like(D)
        square = np.zeros(mesh.size)

    r2 = rho * (
        np.einsum("uij,uij->u", gf.hess, dd)
        + 2.0 * np.einsum("ui,ui->u", gf.grad_d, D)
        + np.einsum("ui,ui->u", gf.grad, E)
        + gf.d2
        + gf.value * square
        - 2.0 * np.einsum("uj,uj->u", gf.grad, cross)
        - 2.0 * gf.d * A_bar
        - gf.value * c_curv
    )
    return Expansion(*(float(_collapse(r, mesh, terminal)) for r in (r0, r1, r2)))


def z_expand(tables: ExpansionTables, c: ScalarField, G: ScalarField, terminal: bool = False) -> Expansion:
    """
    Volatility coefficients per Brownian column, the Malliavin counterpart of
    ``v_expand``. The delta^0 coefficient is identically zero.
    """
    mesh = tables.mesh
    cf = _Along.of(c, tables, with_delta=False)
    gf = _Along.of(G, tables)
    rho, A_bar = _discounting(tables, cf)
    D, X1, X2 = tables.D_bar, tables.X1, tables.X2

    B1 = cumulative_trapezoid(np.einsum("ui,uia->ua", cf.grad, X1), mesh)
    first = rho[:, None] * (np.einsum("ui,uia->ua", gf.grad, X1) - gf.value[:, None] * B1)
    c_second = cumulative_trapezoid(
        np.einsum("ui,uia->ua", cf.grad, X2) + 2.0 * np.einsum("uij,uj,uia->ua", cf.hess, D, X1), mesh)
    slope = gf.d + np.einsum("ui,ui->u", gf.grad, D)
    second = -2.0 * A_bar[:, None] * first + rho[:, None] * (
        np.einsum("ui,uia->ua", gf.grad, X2)
        + 2.0 * np.einsum("uij,uj,uia->ua", gf.hess, D, X1)
        + 2.0 * np.einsum("ui,uia->ua", gf.grad_d, X1)
        - 2.0 * slope[:, None] * B1
        - gf.value[:, None] * c_second
    )
    m = X1.shape[2]
    return Expansion(np.zeros(m), _collapse(first, mesh, terminal), _collapse(second, mesh, terminal))


# ---------------------------------------------------------------------------
# Order recursion on delta-polynomial surfaces
# ---------------------------------------------------------------------------

@dataclass
class DeltaSurface:
    """
    Order-i value and volatility surfaces as second-order polynomials in
    delta: ``coefficients[k]`` carries the k-th value and volatility
    coefficient tables, combined as c0 + delta c1 + delta^2 c2 / 2.
    """

    order: int
    coefficients: Sequence[OrderResult]

    def __post_init__(self):
        if len(self.coefficients) != 3:
            raise ValueError("a delta surface needs exactly three coefficient tables")

    @property
    def t_grid(self) -> np.ndarray:
        return self.coefficients[0].t_grid

    @property
    def x_grid(self) -> np.ndarray:
        return self.coefficients[0].x_grid

    def _combine(self, u, x, delta: float, vols: bool) -> np.ndarray:
        c0, c1, c2 = (c.sample(u, x, vols=vols) for c in self.coefficients)
        return c0 + delta * c1 + 0.5 * delta * delta * c2

    def value(self, u, x, delta: float) -> np.ndarray:
        return self._combine(u, x, delta, vols=False)

    def vol(self, u, x, delta: float) -> np.ndarray:
        return self._combine(u, x, delta, vols=True)

    def at(self, delta: float) -> OrderResult:
        c0, c1, c2 = self.coefficients
        scale = (1.0, delta, 0.5 * delta * delta)
        values = sum(s * c.values for s, c in zip(scale, (c0, c1, c2)))
        vols = sum(s * c.vols for s, c in zip(scale, (c0, c1, c2)))
        return OrderResult(self.order, c0.t_grid, c0.x_grid, values, vols)


def _source_field(model: ModelSpec, order: int, prev: Sequence[DeltaSurface]) -> ScalarField:
    if order == 1:
        base = prev[0]

        def fn(u, x, d):
            v = base.value(u, x[:, 0], d)
            z = base.vol(u, x[:, 0], d)[:, None]
            return model.g(u, x, v, z)
    else:
        base, first = prev[0], prev[1]

        def fn(u, x, d):
            y = x[:, 0]
            v0, z0 = base.value(u, y, d), base.vol(u, y, d)[:, None]
            v1, z1 = first.value(u, y, d), first.vol(u, y, d)[:, None]
            return (model.g_dv(u, x, v0, z0) * v1
                    + np.einsum("nm,nm->n", model.g_dz(u, x, v0, z0), z1))
    return ScalarField(fn=fn)


def recursion_bridge(model: ModelSpec, sde: DeltaSde, order: int, prev: Sequence[DeltaSurface],
                     t_grid, x_grid, n_nodes: int = BRIDGE_NODES) -> DeltaSurface:
    """
    Order-``order`` surfaces of a decoupled scalar model whose forward law is
    only known through its delta expansion.

    Order 0 expands the discounted terminal payoff; order 1 integrates
    g(V0, Z0) and order 2 integrates g_v V1 + g_z Z1, each previous surface
    entering as its delta polynomial. Products are truncated at delta^2 by
    differentiating at delta = 0.

    Args:
        model (ModelSpec): Supplies c, g and the payoff; its forward
            coefficients are replaced by ``sde``.
        sde (DeltaSde): Forward SDE; only its coefficients and horizon are used.
        order (int): 0, 1 or 2.
        prev (list): Surfaces for orders 0 .. order-1.
        t_grid: Increasing times ending at the horizon.
        x_grid: Increasing states.
        n_nodes (int): Mesh nodes per anchor.

    Returns:
        DeltaSurface: Coefficient tables on (t_grid, x_grid).

    Raises:
        ValueError: On an unsupported model or inconsistent inputs.
    """
    if not 0 <= order <= 2:
        raise ValueError(f"orders 0 to 2 are supported, got {order}")
    if len(prev) < order:
        raise ValueError(f"order {order} needs {order} previous surfaces, got {len(prev)}")
    if model.dim != 1 or model.n_brownian != 1 or sde.dim != 1 or sde.n_brownian != 1:
        raise ValueError("the delta recursion handles scalar state and a single Brownian factor")
    if not model.is_decoupled or model.theta is not None:
        raise ValueError("the delta recursion needs a decoupled model without a linear Z term")
    t_grid = np.asarray(t_grid, dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    if not np.isclose(t_grid[-1], sde.T) or not np.isclose(sde.T, model.horizon):
        raise ValueError("time grid, SDE and model must share the horizon")

    discount = ScalarField.state_only(lambda u, x: model.discount(u, x))
    if order == 0:
        G = ScalarField(fn=lambda u, x, d: model.payoff(x),
                        grad=lambda u, x, d: model.phi_grad(x),
                        delta=lambda u, x, d: np.zeros(x.shape[0]),
                        grad_delta=lambda u, x, d: np.zeros_like(x),
                        delta2=lambda u, x, d: np.zeros(x.shape[0]))
    else:
        G = _source_field(model, order, prev)

    shape = (t_grid.size, x_grid.size)
    values = [np.zeros(shape) for _ in range(3)]
    vols = [np.zeros(shape) for _ in range(3)]
    if order == 0:
        states = x_grid[:, None]
        slope = model.phi_grad(states)[:, 0]
        values[0][-1] = model.payoff(states)
        vols[1][-1] = slope * sde.diffusion_delta(states, 0.0)[:, 0, 0]
        vols[2][-1] = slope * sde.diffusion_delta2(states, 0.0)[:, 0, 0]

    for j, t in enumerate(t_grid[:-1]):
        for k, x in enumerate(x_grid):
            tables = build_tables(sde.anchored(t, [x]), n_nodes=n_nodes)
            v = v_expand(tables, discount, G, terminal=(order == 0))
            z = z_expand(tables, discount, G, terminal=(order == 0))
            for n, (fv, fz) in enumerate(zip((v.f0, v.f1, v.f2), (z.f0, z.f1, z.f2))):
                values[n][j, k] = fv
                vols[n][j, k] = np.asarray(fz).reshape(-1)[0]

    logger.info("[ASYMPTOTIC] order surface expanded", order=order, model=model.name,
                n_t=t_grid.size, n_x=x_grid.size, nodes=n_nodes)
    return DeltaSurface(order, [OrderResult(order, t_grid, x_grid, values[n], vols[n]) for n in range(3)])


def recursion_orders(model: ModelSpec, sde: DeltaSde, order: int, t_grid, x_grid,
                     n_nodes: int = BRIDGE_NODES) -> List[DeltaSurface]:
    """Runs ``recursion_bridge`` for orders 0 .. order."""
    surfaces: List[DeltaSurface] = []
    for i in range(order + 1):
        surfaces.append(recursion_bridge(model, sde, i, surfaces, t_grid, x_grid, n_nodes))
    return surfaces


# ---------------------------------------------------------------------------
# Scalar linear test model
# ---------------------------------------------------------------------------

def scaling_sde(kappa: float, beta: float, nu: float, x0: float, t0: float, T: float) -> DeltaSde:
    """dX = (kappa + delta beta) X dt + delta nu X dW with analytic derivatives."""

    def zeros2(x, d):
        return np.zeros(x.shape + (x.shape[1],))

    derivatives = {
        "jacobian": lambda x, d: np.full(x.shape + (1,), kappa + d * beta),
        "hessian": lambda x, d: np.zeros(x.shape + (1, 1)),
        "drift_delta": lambda x, d: beta * x,
        "drift_delta2": lambda x, d: np.zeros_like(x),
        "jacobian_delta": lambda x, d: np.full(x.shape + (1,), beta),
        "diffusion_delta": lambda x, d: nu * x[:, :, None],
        "diffusion_delta2": lambda x, d: zeros2(x, d),
    }
    return DeltaSde(
        dim=1,
        n_brownian=1,
        drift=lambda x, d: (kappa + d * beta) * x,
        diffusion=lambda x, d: d * nu * x[:, :, None],
        x0=[x0],
        t0=t0,
        T=T,
        derivatives=derivatives,
        name="scaling-linear",
    )


def lognormal_second_moment(kappa: float, beta: float, nu: float, c: float, x0: float,
                            tau: float, delta: float) -> float:
    """Exact e^{-c tau} E[X_T^2] for the scaling model."""
    return float(np.exp(-c * tau) * x0 ** 2 * np.exp((2.0 * (kappa + delta * beta) + (delta * nu) ** 2) * tau))


def delta_scaling_study(kappa: float, beta: float, nu: float, c: float, x0: float, T: float,
                        deltas: Sequence[float], n_nodes: int = DEFAULT_NODES) -> List[dict]:
    """
    Residuals of the second-order assembly of e^{-cT} E[X_T^2] against the
    exact lognormal moment over a ladder of delta values.

    Returns:
        list: Rows with keys delta, exact, expansion, residual, ratio (the
        previous residual over this one; NaN on the first row) and z0, the
        delta^0 volatility coefficient.
    """
    deltas = [float(d) for d in deltas]
    if len(deltas) < 2 or any(b >= a for a, b in zip(deltas, deltas[1:])) or deltas[-1] <= 0.0:
        raise ValueError(f"delta ladder must be positive and strictly decreasing, got {deltas}")
    tables = build_tables(scaling_sde(kappa, beta, nu, x0, 0.0, T), n_nodes=n_nodes)
    discount = ScalarField.constant(c)
    square = ScalarField(fn=lambda u, x, d: x[:, 0] ** 2,
                         grad=lambda u, x, d: 2.0 * x,
                         hess=lambda u, x, d: np.full(x.shape + (1,), 2.0),
                         delta=lambda u, x, d: np.zeros(x.shape[0]),
                         grad_delta=lambda u, x, d: np.zeros_like(x),
                         delta2=lambda u, x, d: np.zeros(x.shape[0]))
    value = v_expand(tables, discount, square, terminal=True)
    vol = z_expand(tables, discount, square, terminal=True)
    rows = []
    previous = None
    for delta in deltas:
        exact = lognormal_second_moment(kappa, beta, nu, c, x0, T, delta)
        approx = float(value.at(delta))
        residual = abs(exact - approx)
        ratio = previous / residual if previous is not None and residual > 0.0 else float("nan")
        rows.append({"delta": delta, "exact": exact, "expansion": approx, "residual": residual,
                     "ratio": ratio, "z0": float(np.max(np.abs(vol.f0)))})
        previous = residual
    logger.info("[ASYMPTOTIC] delta scaling study", rows=len(rows),
                ratios=[r["ratio"] for r in rows[1:]])
    return rows
