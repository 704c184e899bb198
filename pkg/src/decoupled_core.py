"""
Module: decoupled_core
Description: Probabilistic evaluation of the order-by-order recursion for
             decoupled FBSDEs. Paths of the forward state and its first
             variation process are simulated jointly; values are discounted
             path averages and volatilities use the Malliavin chain rule
             D_t X_u = Y_{t,u} gamma(X_t). Also hosts the stochastic discount
             factor for drivers linear in Z and a regression-based backward
             Monte Carlo oracle for the full nonlinear problem.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import structlog

from src.models import (
    ModelSpec,
    OrderResult,
    gradient_fd,
    jacobian_fd,
    scalar_states,
    surface_value,
    surface_vol,
    uniform_mesh,
)
from src.numerics import NonFiniteStateError, RngStream, cumulative_trapezoid, trapezoid

logger = structlog.get_logger(__name__)

STEPS_PER_UNIT_TIME = 100
MIN_STEPS = 20
REGRESSION_BATCHES = 20
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class PathEnsemble:
    """
    Euler paths started at (mesh[0], x0).

    Shapes: X (K+1, n, d), Y (K+1, n, d, d) with Y[0] = identity, dW (K, n, m).
    ``Y`` is None when the first variation was not requested.
    """

    mesh: np.ndarray
    X: np.ndarray
    Y: Optional[np.ndarray]
    dW: np.ndarray
    seed: int
    stream_id: int = 0

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    @property
    def start(self) -> Tuple[float, np.ndarray]:
        return float(self.mesh[0]), self.X[0, 0]

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.mesh - t)))
        if not math.isclose(self.mesh[k], t, rel_tol=0.0, abs_tol=1e-12):
            raise ValueError(f"t={t} is not a mesh point")
        return k


@dataclass(frozen=True)
class MalliavinWeight:
    """D_t X_u = Y_{t,u} gamma(X_t) per path, shape (K+1, n, d, m)."""

    values: np.ndarray

    @classmethod
    def from_ensemble(cls, ensemble: PathEnsemble, vol: Callable) -> "MalliavinWeight":
        if ensemble.Y is None:
            raise ValueError("ensemble was simulated without the first variation process")
        t0 = float(ensemble.mesh[0])
        gamma_start = np.asarray(vol(t0, ensemble.X[0]), dtype=float)
        return cls(np.einsum("knij,njm->knim", ensemble.Y, gamma_start))


@dataclass(frozen=True)
class OrderEstimate:
    """Monte Carlo estimate of (V, Z) at the ensemble start with standard errors."""

    value: float
    vol: np.ndarray
    value_stderr: float
    vol_stderr: np.ndarray


def time_mesh(t: float, T: float, steps_per_unit: int = STEPS_PER_UNIT_TIME, min_steps: int = MIN_STEPS) -> np.ndarray:
    n_steps = max(int(math.ceil(steps_per_unit * (T - t))), min_steps)
    return uniform_mesh(t, T, n_steps)


def simulate(model: ModelSpec, mesh, n_paths: int, seed: int, x0, stream_id: int = 0,
             drift: Optional[Callable] = None, vol: Optional[Callable] = None,
             first_variation: bool = True) -> PathEnsemble:
    """
    Joint Euler-Maruyama scheme for X and its first variation Y.

    Args:
        model (ModelSpec): Supplies dimensions and, by default, the linear
            coefficients r and sigma.
        mesh: Strictly increasing time mesh.
        n_paths (int): Number of paths.
        seed (int): RNG seed.
        x0: Start state, shape (d,).
        stream_id (int): RNG stream key.
        drift, vol: Coefficient overrides (t, x) -> (n, d) and (n, d, m).
        first_variation (bool): Also propagate Y with finite-difference Jacobians.

    Returns:
        PathEnsemble: Reproducible from (seed, stream_id, mesh, n_paths).

    Raises:
        NonFiniteStateError: If a path leaves the finite range.
    """
    mesh = np.asarray(mesh, dtype=float)
    if mesh.ndim != 1 or mesh.size < 2 or np.any(np.diff(mesh) <= 0.0):
        raise ValueError("mesh must be strictly increasing with at least two points")
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    drift = drift or model.drift
    vol = vol or model.sigma
    d, m = model.dim, model.n_brownian
    dt = np.diff(mesh)
    dW = RngStream(seed, stream_id).normals((dt.size, n_paths, m)) * np.sqrt(dt)[:, None, None]
    X = np.empty((mesh.size, n_paths, d))
    X[0] = np.broadcast_to(np.asarray(x0, dtype=float).reshape(1, d), (n_paths, d))
    Y = None
    if first_variation:
        Y = np.empty((mesh.size, n_paths, d, d))
        Y[0] = np.eye(d)
    for k, t in enumerate(mesh[:-1]):
        x = X[k]
        a = np.asarray(drift(t, x), dtype=float)
        s = np.asarray(vol(t, x), dtype=float)
        X[k + 1] = x + a * dt[k] + np.einsum("nim,nm->ni", s, dW[k])
        if first_variation:
            ja = jacobian_fd(lambda y: drift(t, y), x)
            js = jacobian_fd(lambda y: vol(t, y), x)
            Y[k + 1] = (Y[k] + np.einsum("nij,njk->nik", ja, Y[k]) * dt[k]
                        + np.einsum("nimj,nm,njk->nik", js, dW[k], Y[k]))
        if not np.all(np.isfinite(X[k + 1])):
            logger.error("[MC] non-finite state", step=k + 1, t=float(mesh[k + 1]))
            raise NonFiniteStateError(f"non-finite state at step {k + 1} (t={mesh[k + 1]:.6g})")
    return PathEnsemble(mesh, X, Y, dW, seed, stream_id)


def _discount_paths(model: ModelSpec, ensemble: PathEnsemble) -> np.ndarray:
    """E(t0, t_k) per path, shape (K+1, n)."""
    mesh, X = ensemble.mesh, ensemble.X
    rates = np.stack([np.asarray(model.discount(t, X[k]), dtype=float) for k, t in enumerate(mesh)])
    exponent = cumulative_trapezoid(rates, mesh, axis=0)
    if model.theta is not None:
        theta = np.stack([np.asarray(model.theta(t, X[k]), dtype=float) for k, t in enumerate(mesh)])
        exponent = exponent + cumulative_trapezoid(0.5 * np.sum(theta ** 2, axis=-1), mesh, axis=0)
        ito = np.einsum("knm,knm->kn", theta[:-1], ensemble.dW)
        exponent[1:] += np.cumsum(ito, axis=0)
    return np.exp(-exponent)


def stochastic_discount(model: ModelSpec, ensemble: PathEnsemble, t: float, s: float) -> np.ndarray:
    """
    E(t, s) = exp(-int_t^s (c + |theta|^2/2) du - int_t^s theta . dW) per path;
    reduces to exp(-int c) without theta.
    """
    i, j = ensemble.index_of(t), ensemble.index_of(s)
    if j < i:
        raise ValueError(f"need t <= s, got t={t}, s={s}")
    factors = _discount_paths(model, ensemble)
    return factors[j] / factors[i]


def _discount_sensitivity(model: ModelSpec, ensemble: PathEnsemble, weight: MalliavinWeight) -> np.ndarray:
    """
    A_u = int_t^u grad(c + |theta|^2/2) . D X ds + sum_a int_t^u grad(theta_a) . D X dW^a,
    so that D_t E(t, u) = -E(t, u) A_u. Shape (K+1, n, m).
    """
    mesh, X, DX = ensemble.mesh, ensemble.X, weight.values

    def rate(t):
        if model.theta is None:
            return lambda y: model.discount(t, y)
        return lambda y: model.discount(t, y) + 0.5 * np.sum(np.asarray(model.theta(t, y)) ** 2, axis=-1)

    slopes = np.stack([np.einsum("ni,nim->nm", gradient_fd(rate(t), X[k]), DX[k]) for k, t in enumerate(mesh)])
    out = cumulative_trapezoid(slopes, mesh, axis=0)
    if model.theta is not None:
        ito = np.stack([
            np.einsum("nai,nim,na->nm", jacobian_fd(lambda y: model.theta(t, y), X[k]), DX[k], ensemble.dW[k])
            for k, t in enumerate(mesh[:-1])
        ])
        out[1:] += np.cumsum(ito, axis=0)
    return out


def _estimate(value_samples: np.ndarray, vol_samples: np.ndarray) -> OrderEstimate:
    n = value_samples.shape[0]
    return OrderEstimate(
        value=float(np.mean(value_samples)),
        vol=np.mean(vol_samples, axis=0),
        value_stderr=float(np.std(value_samples, ddof=1) / np.sqrt(n)) if n > 1 else float("nan"),
        vol_stderr=np.std(vol_samples, axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(vol_samples.shape[1:], np.nan),
    )


def _terminal_samples(model: ModelSpec, ensemble: PathEnsemble):
    weight = MalliavinWeight.from_ensemble(ensemble, model.sigma)
    discount = _discount_paths(model, ensemble)[-1]
    x_T = ensemble.X[-1]
    phi = np.asarray(model.payoff(x_T), dtype=float)
    grad = model.phi_grad(x_T)
    sensitivity = _discount_sensitivity(model, ensemble, weight)[-1]
    vol_samples = discount[:, None] * (np.einsum("ni,nim->nm", grad, weight.values[-1]) - phi[:, None] * sensitivity)
    return discount * phi, vol_samples


def _running_samples(model: ModelSpec, ensemble: PathEnsemble, source: Callable):
    weight = MalliavinWeight.from_ensemble(ensemble, model.sigma)
    discount = _discount_paths(model, ensemble)
    sensitivity = _discount_sensitivity(model, ensemble, weight)
    mesh, X = ensemble.mesh, ensemble.X
    values = np.empty((mesh.size, ensemble.n_paths))
    vols = np.empty((mesh.size, ensemble.n_paths, model.n_brownian))
    for k, u in enumerate(mesh):
        g = np.asarray(source(u, X[k]), dtype=float)
        grad = gradient_fd(lambda y: source(u, y), X[k])
        values[k] = discount[k] * g
        vols[k] = discount[k][:, None] * (np.einsum("ni,nim->nm", grad, weight.values[k]) - g[:, None] * sensitivity[k])
    return trapezoid(values, mesh, axis=0), trapezoid(vols, mesh, axis=0)


def order0(model: ModelSpec, ensemble: PathEnsemble) -> OrderEstimate:
    """
    V0 = E[E(t,T) Phi(X_T)] and
    Z0 = E[E(t,T) (grad Phi(X_T) . D_t X_T - Phi(X_T) A_T)] at the ensemble start.
    """
    return _estimate(*_terminal_samples(model, ensemble))


def linear_estimate(model: ModelSpec, ensemble: PathEnsemble, source: Optional[Callable] = None) -> OrderEstimate:
    """
    Value and volatility of the linear problem with terminal payoff and a
    running state source G(u, x):

        V = E[E(t,T) Phi(X_T) + int_t^T E(t,u) G(u, X_u) du]

    with Z the Malliavin counterpart. Both parts share the paths, so the
    standard error accounts for their correlation.
    """
    value, vol = _terminal_samples(model, ensemble)
    if source is not None:
        run_value, run_vol = _running_samples(model, ensemble, source)
        value, vol = value + run_value, vol + run_vol
    return _estimate(value, vol)


def _order_source(model: ModelSpec, prev: Sequence, order: int) -> Callable[[float, np.ndarray], np.ndarray]:
    """Composite source x -> G_order(u, x) built from the previous order surfaces."""
    if len(prev) < order:
        raise ValueError(f"order {order} needs surfaces for orders 0..{order - 1}, got {len(prev)}")

    def source(u, x):
        v0, z0 = surface_value(prev[0], u, x), surface_vol(prev[0], u, x)
        if order == 1:
            return model.g(u, x, v0, z0)
        v1, z1 = surface_value(prev[1], u, x), surface_vol(prev[1], u, x)
        return model.g_dv(u, x, v0, z0) * v1 + np.sum(model.g_dz(u, x, v0, z0) * z1, axis=1)

    return source


def order_estimate(model: ModelSpec, ensemble: PathEnsemble, prev: Sequence, order: int) -> OrderEstimate:
    """
    Order 1 or 2 at the ensemble start:

        V = E[int_t^T E(t,u) G(u, X_u) du]
        Z = E[int_t^T E(t,u) (grad G . D_t X_u - G A_u) du]

    with G_1 = g(V0, Z0) and G_2 = g_v V1 + g_z . Z1 evaluated on the paths.
    """
    if order == 0:
        return order0(model, ensemble)
    if order not in (1, 2):
        raise ValueError(f"orders 0, 1 and 2 are available, got {order}")
    if len(prev) < order:
        raise ValueError(f"order {order} needs {order} previous surfaces, got {len(prev)}")
    if not model.is_decoupled:
        raise ValueError("order_estimate handles decoupled models; use the coupled recursion for feedbacks")
    if model.dim != 1:
        raise ValueError("order surfaces are scalar in the state")
    return _estimate(*_running_samples(model, ensemble, _order_source(model, prev, order)))


def order_i(model: ModelSpec, prev: Sequence, order: int, t_grid, x_grid, n_paths: int, seed: int,
            steps_per_unit: int = STEPS_PER_UNIT_TIME) -> OrderResult:
    """
    Tabulates order ``order`` on a (t, x) grid by restarting an ensemble at
    every grid node before maturity. Node (j, k) uses RNG stream j * len(x_grid) + k.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    if model.dim != 1:
        raise ValueError("order surfaces are scalar in the state")
    T = model.horizon
    start = time.perf_counter()
    values = np.zeros((t_grid.size, x_grid.size))
    vols = np.zeros((t_grid.size, x_grid.size))
    for j, t in enumerate(t_grid):
        if t >= T:
            if order == 0:
                xb = scalar_states(x_grid)
                values[j] = model.payoff(xb)
                vols[j] = model.phi_grad(xb)[:, 0] * np.asarray(model.sigma(T, xb))[:, 0, 0]
            continue
        mesh = time_mesh(t, T, steps_per_unit)
        for k, x in enumerate(x_grid):
            ensemble = simulate(model, mesh, n_paths, seed, [x], stream_id=j * x_grid.size + k)
            estimate = order_estimate(model, ensemble, prev, order)
            values[j, k] = estimate.value
            vols[j, k] = estimate.vol[0]
    logger.info("[MC] order surface tabulated", order=order, nodes=t_grid.size * x_grid.size, paths=n_paths,
                elapsed=round(time.perf_counter() - start, 3))
    return OrderResult(order, t_grid, x_grid, values, vols)


# ---------------------------------------------------------------------------
# Regression-based backward Monte Carlo
# ---------------------------------------------------------------------------

def _design(x: np.ndarray, degree: int) -> np.ndarray:
    spread = np.std(x)
    if spread == 0.0:
        return np.ones((x.size, 1))
    return np.polynomial.hermite_e.hermevander((x - np.mean(x)) / spread, degree)


class _Projector:
    """Least-squares projection on a Hermite basis; lowers the degree when ill-conditioned."""

    def __init__(self, x: np.ndarray, degree: int):
        basis = _design(x, degree)
        while basis.shape[1] > 1 and np.linalg.cond(basis.T @ basis) > CONDITION_LIMIT:
            degree -= 1
            logger.warning("[MC] ill-conditioned regression, lowering degree", degree=degree)
            basis = _design(x, degree)
        self.basis = basis
        self.degree = degree

    def __call__(self, y: np.ndarray) -> np.ndarray:
        coef, *_ = np.linalg.lstsq(self.basis, y, rcond=None)
        return self.basis @ coef


def _backward_induction(model: ModelSpec, ensemble: PathEnsemble, degree: int) -> float:
    mesh, X, dW = ensemble.mesh, ensemble.X, ensemble.dW
    value = np.asarray(model.payoff(X[-1]), dtype=float)
    for k in range(mesh.size - 2, -1, -1):
        t, dt = mesh[k], mesh[k + 1] - mesh[k]
        project = _Projector(X[k][:, 0], degree)
        z = np.stack([project(value * dW[k][:, a] / dt) for a in range(model.n_brownian)], axis=1)
        guess = project(value)
        value = project(value + model.driver(t, X[k], guess, z) * dt)
    return float(np.mean(value))


def regression_mc(model: ModelSpec, n_paths: int, n_steps: int, basis_degree: int, seed: int = 0,
                  x0=None, batches: int = REGRESSION_BATCHES,
                  control_value: Optional[float] = None) -> Tuple[float, float]:
    """
    Backward regression estimate of V at (0, x0) for the full nonlinear driver.

    Each of ``batches`` independent batches runs V_K = Phi(X_K), then for each
    step regresses V_{k+1} dW_k / dt for Z_k, V_{k+1} for a first guess, and
    V_{k+1} + f(t_k, X_k, guess, Z_k) dt for V_k. When ``control_value`` (the
    exact order-0 value) is given, the same induction is run with the
    perturbation switched off on the same paths and used as a control variate.

    Returns:
        tuple: (estimate, batch standard error).
    """
    if basis_degree < 1:
        raise ValueError(f"basis_degree must be >= 1, got {basis_degree}")
    if model.dim != 1 or not model.is_decoupled:
        raise ValueError("regression_mc handles decoupled scalar models")
    if batches < 2:
        raise ValueError("at least two batches are needed for a standard error")
    x0 = np.zeros(1) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    start = time.perf_counter()
    mesh = uniform_mesh(0.0, model.horizon, n_steps)
    per_batch = max(n_paths // batches, 2)
    linear = model.with_epsilon(0.0)
    results = []
    for b in range(batches):
        ensemble = simulate(model, mesh, per_batch, seed, x0, stream_id=b, first_variation=False)
        estimate = _backward_induction(model, ensemble, basis_degree)
        if control_value is not None:
            estimate = estimate - _backward_induction(linear, ensemble, basis_degree) + control_value
        results.append(estimate)
    results = np.asarray(results)
    value = float(np.mean(results))
    stderr = float(np.std(results, ddof=1) / np.sqrt(batches))
    logger.info("[MC] regression estimate", model=model.name, value=value, stderr=stderr, paths=per_batch * batches,
                steps=n_steps, elapsed=round(time.perf_counter() - start, 3))
    return value, stderr
