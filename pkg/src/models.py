"""
Module: models
Description: Model-specification types shared by all engines (ModelSpec,
             OrderResult, OrderFunction) and the geometric Brownian motion
             closed-form primitives used by both worked examples.

State arrays follow one convention throughout: a batch of states has shape
(n, d), values have shape (n,), volatilities have shape (n, m) and diffusion
matrices have shape (n, d, m).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import structlog
from scipy.interpolate import CubicSpline

from src.numerics import NumericalError, norm_cdf

logger = structlog.get_logger(__name__)

FD_REL_STEP = 1e-5


class CoverageError(NumericalError):
    """Raised when a surface is evaluated outside its tabulated state range."""


def fd_step(x, rel: float = FD_REL_STEP) -> np.ndarray:
    return rel * (1.0 + np.abs(x))


def _zero_scalar(t, x, v, z):
    return np.zeros(x.shape[0])


@dataclass(frozen=True)
class ModelSpec:
    """
    Perturbed FBSDE in the decomposition used by every engine:

        dV = (c V + theta . Z) dt - eps g(t, X, V, Z) dt + Z . dW,  V_T = phi(X_T)
        dX = (r + eps mu) dt + (sigma + eps eta) . dW

    ``drift``/``sigma`` are the linear forward coefficients, ``mu``/``eta``
    the feedbacks. Callbacks are vectorised over a batch of states. Optional
    analytic derivative callbacks replace finite differences when present.
    """

    dim: int
    n_brownian: int
    discount: Callable
    drift: Callable
    sigma: Callable
    payoff: Callable
    horizon: float
    epsilon: float = 1.0
    generator: Optional[Callable] = None
    mu: Optional[Callable] = None
    eta: Optional[Callable] = None
    theta: Optional[Callable] = None
    payoff_grad: Optional[Callable] = None
    generator_dv: Optional[Callable] = None
    generator_dz: Optional[Callable] = None
    name: str = "model"

    def __post_init__(self):
        if self.dim < 1 or self.n_brownian < 1:
            raise ValueError("model dimensions must be positive")
        if not self.horizon > 0.0:
            raise ValueError(f"horizon must be positive, got T={self.horizon}")

    @property
    def is_decoupled(self) -> bool:
        return self.mu is None and self.eta is None

    @property
    def is_linear(self) -> bool:
        return self.epsilon == 0.0 or (self.generator is None and self.is_decoupled)

    def with_epsilon(self, epsilon: float) -> "ModelSpec":
        return replace(self, epsilon=float(epsilon))

    def g(self, t, x, v, z) -> np.ndarray:
        if self.generator is None:
            return np.zeros(x.shape[0])
        return np.asarray(self.generator(t, x, v, z), dtype=float)

    def feedback_drift(self, t, x, v, z) -> np.ndarray:
        if self.mu is None:
            return np.zeros_like(x)
        return np.asarray(self.mu(t, x, v, z), dtype=float)

    def feedback_vol(self, t, x, v, z) -> np.ndarray:
        if self.eta is None:
            return np.zeros(x.shape + (self.n_brownian,))
        return np.asarray(self.eta(t, x, v, z), dtype=float)

    def gamma0(self, t, x, v, z) -> np.ndarray:
        """Full forward drift r + eps mu."""
        out = np.asarray(self.drift(t, x), dtype=float)
        if self.mu is not None and self.epsilon != 0.0:
            out = out + self.epsilon * self.feedback_drift(t, x, v, z)
        return out

    def gamma(self, t, x, v, z) -> np.ndarray:
        """Full forward diffusion sigma + eps eta."""
        out = np.asarray(self.sigma(t, x), dtype=float)
        if self.eta is not None and self.epsilon != 0.0:
            out = out + self.epsilon * self.feedback_vol(t, x, v, z)
        return out

    def driver(self, t, x, v, z) -> np.ndarray:
        """f = -c v - theta . z + eps g, so that dV = -f dt + Z dW."""
        out = -np.asarray(self.discount(t, x), dtype=float) * v
        if self.theta is not None:
            out = out - np.einsum("nm,nm->n", np.asarray(self.theta(t, x), dtype=float), z)
        if self.generator is not None and self.epsilon != 0.0:
            out = out + self.epsilon * self.g(t, x, v, z)
        return out

    def phi_grad(self, x) -> np.ndarray:
        if self.payoff_grad is not None:
            return np.asarray(self.payoff_grad(x), dtype=float)
        return gradient_fd(lambda y: self.payoff(y), x)

    def g_dv(self, t, x, v, z) -> np.ndarray:
        if self.generator is None:
            return np.zeros(x.shape[0])
        if self.generator_dv is not None:
            return np.asarray(self.generator_dv(t, x, v, z), dtype=float)
        h = fd_step(v)
        return (self.g(t, x, v + h, z) - self.g(t, x, v - h, z)) / (2.0 * h)

    def g_dz(self, t, x, v, z) -> np.ndarray:
        if self.generator is None:
            return np.zeros_like(z)
        if self.generator_dz is not None:
            return np.asarray(self.generator_dz(t, x, v, z), dtype=float)
        out = np.empty_like(z)
        for a in range(z.shape[1]):
            h = fd_step(z[:, a])
            up, dn = z.copy(), z.copy()
            up[:, a] += h
            dn[:, a] -= h
            out[:, a] = (self.g(t, x, v, up) - self.g(t, x, v, dn)) / (2.0 * h)
        return out


def gradient_fd(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel: float = FD_REL_STEP) -> np.ndarray:
    """Central-difference gradient of a batch scalar function, shape (n, d)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for k in range(x.shape[1]):
        h = fd_step(x[:, k], rel)
        up, dn = x.copy(), x.copy()
        up[:, k] += h
        dn[:, k] -= h
        out[:, k] = (np.asarray(f(up)) - np.asarray(f(dn))) / (2.0 * h)
    return out


def jacobian_fd(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel: float = FD_REL_STEP) -> np.ndarray:
    """
    Central-difference Jacobian of a batch array function.

    ``f`` maps (n, d) to (n,) + S; the result has shape (n,) + S + (d,).
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.shape[1]):
        h = fd_step(x[:, k], rel)
        up, dn = x.copy(), x.copy()
        up[:, k] += h
        dn[:, k] -= h
        diff = np.asarray(f(up)) - np.asarray(f(dn))
        cols.append(diff / (2.0 * h).reshape((-1,) + (1,) * (diff.ndim - 1)))
    return np.stack(cols, axis=-1)


def uniform_mesh(t0: float, t1: float, n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("a mesh needs at least one step")
    return np.linspace(t0, t1, n_steps + 1)


class OrderFunction:
    """
    An order result given by callables instead of a table, used when a
    closed form is available. ``value_fn(t, x)`` and ``vol_fn(t, x)`` take a
    scalar time and a 1-d array of scalar states.
    """

    def __init__(self, order: int, value_fn: Callable, vol_fn: Optional[Callable] = None):
        self.order = order
        self._value_fn = value_fn
        self._vol_fn = vol_fn

    def value_at(self, t: float, x) -> np.ndarray:
        return np.asarray(self._value_fn(t, np.asarray(x, dtype=float)), dtype=float)

    def vol_at(self, t: float, x) -> np.ndarray:
        if self._vol_fn is None:
            raise ValueError(f"order {self.order} carries no volatility function")
        return np.asarray(self._vol_fn(t, np.asarray(x, dtype=float)), dtype=float)


@dataclass
class OrderResult:
    """
    Tabulated order-i value and volatility surfaces on a (t, x) grid for a
    scalar state and a single Brownian factor.

    Interpolation is cubic in x (per time slice) and linear in t. Look-ups
    outside [x_grid[0], x_grid[-1]] are clamped, or rejected when ``strict``.
    """

    order: int
    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray
    vols: np.ndarray
    interpolation: str = "cubic-x/linear-t"
    _splines: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.x_grid = np.asarray(self.x_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.vols = np.asarray(self.vols, dtype=float)
        shape = (self.t_grid.size, self.x_grid.size)
        if self.values.shape != shape or self.vols.shape != shape:
            raise ValueError(f"surface shape must be {shape}, got {self.values.shape}/{self.vols.shape}")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.vols))):
            raise NumericalError(f"order {self.order} surface contains non-finite entries")

    @classmethod
    def tabulate(cls, order: int, t_grid, x_grid, value_fn: Callable, vol_fn: Callable) -> "OrderResult":
        """Samples callables (scalar t, array x) onto a grid."""
        t_grid = np.asarray(t_grid, dtype=float)
        x_grid = np.asarray(x_grid, dtype=float)
        values = np.vstack([np.broadcast_to(value_fn(t, x_grid), x_grid.shape) for t in t_grid])
        vols = np.vstack([np.broadcast_to(vol_fn(t, x_grid), x_grid.shape) for t in t_grid])
        return cls(order, t_grid, x_grid, values, vols)

    def covers(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all((x >= self.x_grid[0]) & (x <= self.x_grid[-1])))

    def _bracket(self, t):
        """Time-slice index k and linear weight w with t between t_grid[k] and t_grid[k+1]."""
        tc = np.clip(np.asarray(t, dtype=float), self.t_grid[0], self.t_grid[-1])
        if self.t_grid.size == 1:
            return np.zeros(tc.shape, dtype=int), np.zeros(tc.shape)
        k = np.clip(np.searchsorted(self.t_grid, tc, side="right") - 1, 0, self.t_grid.size - 2)
        w = (tc - self.t_grid[k]) / (self.t_grid[k + 1] - self.t_grid[k])
        return k, w

    def _row(self, table: np.ndarray, k: int) -> np.ndarray:
        return table[min(k, self.t_grid.size - 1)]

    def _spline(self, vols: bool, k: int) -> CubicSpline:
        k = min(int(k), self.t_grid.size - 1)
        key = (vols, k)
        if key not in self._splines:
            self._splines[key] = CubicSpline(self.x_grid, (self.vols if vols else self.values)[k])
        return self._splines[key]

    def _interp(self, table: np.ndarray, t: float, x, strict: bool) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if strict and not self.covers(x):
            raise CoverageError(
                f"order {self.order} surface covers x in [{self.x_grid[0]:.6g}, {self.x_grid[-1]:.6g}], "
                f"requested [{np.min(x):.6g}, {np.max(x):.6g}]"
            )
        xc = np.clip(x, self.x_grid[0], self.x_grid[-1])
        k, w = self._bracket(float(t))
        k, w = int(k), float(w)
        row = (1.0 - w) * self._row(table, k) + w * self._row(table, k + 1)
        return CubicSpline(self.x_grid, row)(xc)

    def sample(self, t, x, vols: bool = False) -> np.ndarray:
        """Pairwise look-up at points (t[n], x[n]), clamped to the grid."""
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        flat_x = np.clip(x.reshape(-1), self.x_grid[0], self.x_grid[-1])
        k, w = self._bracket(t.reshape(-1))
        out = np.empty(flat_x.shape)
        for slot in np.unique(k):
            mask = k == slot
            lo = self._spline(vols, slot)(flat_x[mask])
            hi = self._spline(vols, slot + 1)(flat_x[mask])
            out[mask] = (1.0 - w[mask]) * lo + w[mask] * hi
        return out.reshape(x.shape)

    def value_at(self, t: float, x, strict: bool = False) -> np.ndarray:
        return self._interp(self.values, t, x, strict)

    def vol_at(self, t: float, x, strict: bool = False) -> np.ndarray:
        return self._interp(self.vols, t, x, strict)

    def terminal_slice(self) -> np.ndarray:
        return self.values[-1]


def surface_value(order, t: float, x: np.ndarray) -> np.ndarray:
    """Evaluates an order surface on a batch of (n, 1) states."""
    return order.value_at(t, x[:, 0])


def surface_vol(order, t: float, x: np.ndarray) -> np.ndarray:
    """Evaluates an order volatility on a batch of (n, 1) states as (n, 1)."""
    return order.vol_at(t, x[:, 0])[:, None]


# ---------------------------------------------------------------------------
# Geometric Brownian motion primitives
# ---------------------------------------------------------------------------

def d12(forward, strike, total_vol):
    """
    Black d1/d2 for a forward, a strike and a total volatility sigma*sqrt(tau).

    Args:
        forward: Forward price(s), strictly positive.
        strike: Strike(s), strictly positive.
        total_vol: Total volatility, strictly positive.

    Returns:
        tuple: (d1, d2) with d1 - d2 = total_vol.

    Raises:
        ValueError: On nonpositive inputs.
    """
    forward = np.asarray(forward, dtype=float)
    strike = np.asarray(strike, dtype=float)
    total_vol = np.asarray(total_vol, dtype=float)
    if np.any(forward <= 0.0) or np.any(strike <= 0.0) or np.any(total_vol <= 0.0):
        raise ValueError("d12 needs positive forward, strike and total volatility")
    d1 = (np.log(forward / strike) + 0.5 * total_vol ** 2) / total_vol
    return d1, d1 - total_vol


def black_call(forward, strike, total_vol):
    """Undiscounted Black call; returns the intrinsic value at zero volatility."""
    forward = np.asarray(forward, dtype=float)
    strike = np.asarray(strike, dtype=float)
    total_vol = np.asarray(total_vol, dtype=float)
    forward, strike, total_vol = np.broadcast_arrays(forward, strike, total_vol)
    live = total_vol > 0.0
    safe_vol = np.where(live, total_vol, 1.0)
    d1 = (np.log(forward / strike) + 0.5 * safe_vol ** 2) / safe_vol
    d2 = d1 - safe_vol
    price = forward * norm_cdf(d1) - strike * norm_cdf(d2)
    return np.where(live, price, np.maximum(forward - strike, 0.0))


def call_like(u, t, S, K, r, sigma, T):
    """
    C(u; t, S) = S e^{r(T-t)} N(d1) - K N(d2) with variance sigma^2 (u - t).

    The forward is always S e^{r(T-t)}; only the variance horizon runs to u.
    As u -> t (or sigma -> 0) the intrinsic value max(S e^{r(T-t)} - K, 0) is
    returned.

    Raises:
        ValueError: If u < t anywhere.
    """
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(u < t):
        raise ValueError("call_like needs u >= t")
    forward = np.asarray(S, dtype=float) * np.exp(r * (T - t))
    return black_call(forward, K, sigma * np.sqrt(u - t))


def gbm_push(S, drift, sigma, dt, z):
    """S exp((drift - sigma^2/2) dt + sigma sqrt(dt) z)."""
    dt = np.asarray(dt, dtype=float)
    if np.any(dt < 0.0):
        raise ValueError("gbm_push needs dt >= 0")
    return np.asarray(S, dtype=float) * np.exp((drift - 0.5 * sigma ** 2) * dt + sigma * np.sqrt(dt) * z)


def gbm_model(r: float, sigma: float, horizon: float, payoff: Callable, discount_rate: Optional[float] = None,
              payoff_grad: Optional[Callable] = None, name: str = "gbm") -> ModelSpec:
    """Linear GBM model dX = rX dt + sigma X dW with flat discounting."""
    c = r if discount_rate is None else discount_rate
    return ModelSpec(
        dim=1,
        n_brownian=1,
        discount=lambda t, x: np.full(x.shape[0], c),
        drift=lambda t, x: r * x,
        sigma=lambda t, x: sigma * x[:, :, None],
        payoff=payoff,
        payoff_grad=payoff_grad,
        horizon=horizon,
        epsilon=0.0,
        name=name,
    )


def scalar_states(x: Sequence[float] | np.ndarray) -> np.ndarray:
    """Packs a 1-d array of scalar states into the (n, 1) batch layout."""
    return np.asarray(x, dtype=float).reshape(-1, 1)
