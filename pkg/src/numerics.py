"""
Module: numerics
Description: Shared deterministic numerical kernels used by every engine:
             normal distribution helpers, Gauss quadrature rules, RK4 time
             stepping, tridiagonal elimination, root bracketing and keyed
             counter-based random streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import structlog
from scipy import integrate, optimize, special

logger = structlog.get_logger(__name__)

LEGENDRE = "legendre"
HERMITE = "hermite"

PIVOT_FLOOR = 1e-300
_UINT64_MASK = (1 << 64) - 1


class NumericalError(RuntimeError):
    """Base class for failures of a numerical kernel or engine."""


class SingularPivotError(NumericalError):
    """Raised when tridiagonal elimination meets a vanishing pivot."""


class NonFiniteStateError(NumericalError):
    """Raised when an integrator or solver produces NaN or infinity."""


class ConvergenceError(NumericalError):
    """Raised when a fixed-point or Picard iteration fails to settle."""


class BracketError(ValueError):
    """Raised when a root search is given an interval without a sign change."""


def norm_cdf(x):
    """
    Standard normal cumulative distribution function.

    Args:
        x: Scalar or array of finite reals.

    Returns:
        N(x) with the same shape as ``x``.
    """
    return special.ndtr(x)


def norm_pdf(x):
    """Standard normal density."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def log_norm_cdf(x):
    """log N(x), accurate deep in the lower tail."""
    return special.log_ndtr(x)


@dataclass(frozen=True)
class QuadratureRule:
    """
    Immutable quadrature rule.

    For ``kind == LEGENDRE`` the weights integrate over [a, b] with unit weight
    function. For ``kind == HERMITE`` they integrate against the standard
    normal density, so ``sum(w * f(nodes))`` approximates E[f(Z)].
    """

    kind: str
    nodes: np.ndarray
    weights: np.ndarray
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.nodes.ndim != 1 or self.nodes.shape != self.weights.shape:
            raise ValueError("nodes and weights must be 1-d arrays of equal length")
        if self.nodes.size < 1:
            raise ValueError("a quadrature rule needs at least one node")
        if self.nodes.size > 1 and np.any(np.diff(self.nodes) <= 0.0):
            raise ValueError("quadrature nodes must be strictly increasing")
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def size(self) -> int:
        return int(self.nodes.size)

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, f(self.nodes)))

    def mapped(self, a, b):
        """
        Affinely maps a Legendre rule from [self.a, self.b] onto [a, b].

        ``a`` and ``b`` may be arrays; the result is then a pair of arrays
        ``(nodes, weights)`` with a trailing node axis, one row per interval.

        Args:
            a: Lower interval bound(s).
            b: Upper interval bound(s).

        Returns:
            tuple: (nodes, weights) broadcast to ``shape(a) + (n,)``.
        """
        if self.kind != LEGENDRE:
            raise ValueError("only Gauss-Legendre rules can be remapped")
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
        scale = (b - a) / (self.b - self.a)
        nodes = a + (self.nodes - self.a) * scale
        weights = self.weights * scale
        return nodes, weights


def gauss_rules(n: int, kind: str = LEGENDRE, a: float = 0.0, b: float = 1.0) -> QuadratureRule:
    """
    Builds a Gauss-Legendre rule on [a, b] or a Gauss-Hermite rule weighted
    by the standard normal density.

    Args:
        n (int): Number of nodes, at least 1.
        kind (str): ``"legendre"`` or ``"hermite"``.
        a (float): Lower bound (Legendre only).
        b (float): Upper bound (Legendre only).

    Returns:
        QuadratureRule: The rule, exact for polynomials of degree 2n-1.

    Raises:
        ValueError: If n < 1, a >= b or the kind is unknown.
    """
    if n < 1:
        raise ValueError(f"node count must be >= 1, got n={n}")
    if kind == LEGENDRE:
        if not a < b:
            raise ValueError(f"Gauss-Legendre needs a < b, got a={a}, b={b}")
        knots, weights = np.polynomial.legendre.leggauss(n)
        nodes = 0.5 * (b - a) * knots + 0.5 * (b + a)
        return QuadratureRule(LEGENDRE, nodes, 0.5 * (b - a) * weights, float(a), float(b))
    if kind == HERMITE:
        knots, weights = np.polynomial.hermite.hermgauss(n)
        return QuadratureRule(HERMITE, knots * np.sqrt(2.0), weights / np.sqrt(np.pi),
                              -np.inf, np.inf)
    raise ValueError(f"unknown quadrature kind: {kind!r}")


def rk4_solve(field: Callable[[float, np.ndarray], np.ndarray], y0, mesh: Sequence[float]) -> np.ndarray:
    """
    Classical fourth-order Runge-Kutta over a given time mesh.

    The state may be any array shape (vectors and matrices are both used by
    the asymptotic engine); ``field(t, y)`` must return the same shape.

    Args:
        field: Right-hand side dy/dt = field(t, y).
        y0: Initial state at mesh[0].
        mesh: Strictly increasing time nodes.

    Returns:
        np.ndarray: Trajectory of shape ``(len(mesh),) + shape(y0)``.

    Raises:
        ValueError: If the mesh is not strictly increasing.
        NonFiniteStateError: If the field produces NaN or infinity.
    """
    mesh = np.asarray(mesh, dtype=float)
    if mesh.ndim != 1 or mesh.size < 1 or np.any(np.diff(mesh) <= 0.0):
        raise ValueError("rk4 mesh must be strictly increasing")
    y = np.array(y0, dtype=float)
    out = np.empty((mesh.size,) + y.shape)
    out[0] = y
    for k in range(mesh.size - 1):
        t, h = mesh[k], mesh[k + 1] - mesh[k]
        k1 = field(t, y)
        k2 = field(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = field(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = field(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            logger.error("[RK4] non-finite state", step=k, t=float(mesh[k + 1]))
            raise NonFiniteStateError(f"RK4 state became non-finite at t={mesh[k + 1]:.6g}")
        out[k + 1] = y
    return out


@dataclass(frozen=True)
class TridiagonalSystem:
    """A x = rhs with sub/super diagonals of length n-1 and diagonal of length n."""

    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        n = np.size(self.diag)
        if n < 1 or np.size(self.rhs) != n or np.size(self.sub) != n - 1 or np.size(self.sup) != n - 1:
            raise ValueError(
                f"inconsistent tridiagonal lengths: sub={np.size(self.sub)}, diag={n}, "
                f"sup={np.size(self.sup)}, rhs={np.size(self.rhs)}"
            )

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(self.diag, dtype=float) * x
        y[1:] += np.asarray(self.sub, dtype=float) * x[:-1]
        y[:-1] += np.asarray(self.sup, dtype=float) * x[1:]
        return y


def solve_tridiagonal(system: TridiagonalSystem) -> np.ndarray:
    """
    Thomas elimination for a tridiagonal system.

    Args:
        system (TridiagonalSystem): The banded system.

    Returns:
        np.ndarray: Solution vector.

    Raises:
        SingularPivotError: If a pivot falls below 1e-300 in magnitude.
    """
    sub = np.asarray(system.sub, dtype=float).tolist()
    diag = np.asarray(system.diag, dtype=float).tolist()
    sup = np.asarray(system.sup, dtype=float).tolist()
    rhs = np.asarray(system.rhs, dtype=float).tolist()
    n = len(diag)

    c_prime = [0.0] * n
    d_prime = [0.0] * n
    pivot = diag[0]
    if abs(pivot) < PIVOT_FLOOR:
        raise SingularPivotError("singular pivot at row 0")
    c_prime[0] = sup[0] / pivot if n > 1 else 0.0
    d_prime[0] = rhs[0] / pivot
    for i in range(1, n):
        pivot = diag[i] - sub[i - 1] * c_prime[i - 1]
        if abs(pivot) < PIVOT_FLOOR:
            raise SingularPivotError(f"singular pivot at row {i}")
        if i < n - 1:
            c_prime[i] = sup[i] / pivot
        d_prime[i] = (rhs[i] - sub[i - 1] * d_prime[i - 1]) / pivot

    x = [0.0] * n
    x[-1] = d_prime[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d_prime[i] - c_prime[i] * x[i + 1]
    return np.asarray(x)


def bisect_root(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12) -> float:
    """
    Bisection on a bracketing interval.

    Args:
        f: Scalar function.
        lo (float): Left end.
        hi (float): Right end.
        tol (float): Absolute width of the final bracket.

    Returns:
        float: Location of the sign change.

    Raises:
        BracketError: If f(lo) and f(hi) share a strict sign.
    """
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return float(lo)
    if f_hi == 0.0:
        return float(hi)
    if f_lo * f_hi > 0.0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: f(lo)={f_lo:.3g}, f(hi)={f_hi:.3g}")
    return float(optimize.bisect(f, lo, hi, xtol=tol))


def bisect_roots(f: Callable[[np.ndarray], np.ndarray], lo, hi, tol: float = 1e-12,
                 max_iter: int = 200) -> np.ndarray:
    """
    Elementwise bisection for a batch of monotone scalar problems.

    Entries whose interval does not bracket a sign change come back as NaN.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    lo, hi = np.broadcast_arrays(lo, hi)
    lo, hi = lo.copy(), hi.copy()
    f_lo = f(lo)
    f_hi = f(hi)
    bracketed = f_lo * f_hi <= 0.0
    for _ in range(max_iter):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        left = np.sign(f_mid) == np.sign(f_lo)
        lo = np.where(left, mid, lo)
        f_lo = np.where(left, f_mid, f_lo)
        hi = np.where(left, hi, mid)
    return np.where(bracketed, 0.5 * (lo + hi), np.nan)


def trapezoid(values, mesh, axis: int = 0):
    return integrate.trapezoid(values, mesh, axis=axis)


def cumulative_trapezoid(values, mesh, axis: int = 0) -> np.ndarray:
    """Running trapezoid integral starting at zero on mesh[0]."""
    return integrate.cumulative_trapezoid(values, mesh, axis=axis, initial=0.0)


@dataclass(frozen=True)
class RngStream:
    """
    Counter-based normal variate stream keyed by (seed, stream_id).

    The output is a pure function of the key and the requested shape, so
    independent batches keyed by distinct stream ids can be generated in any
    order or in parallel and always reproduce the same numbers.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _UINT64_MASK, self.stream_id & _UINT64_MASK], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def normals(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)
