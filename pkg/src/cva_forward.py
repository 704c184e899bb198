"""
Module: cva_forward
Description: Orders 0 to 2 of the value adjustment of a forward agreement
             under bilateral default risk, evaluated in closed form and by
             Gauss-Legendre quadrature.

The contract value solves dV = mu_bar V dt + h max(V, 0) dt + Z dW with
V_T = S_T - K and dS = S (r dt + sigma dW), mu_bar = r + lambda.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, List, Optional

import numpy as np
import structlog

from src.models import ModelSpec, call_like, d12, gbm_push
from src.numerics import LEGENDRE, QuadratureRule, gauss_rules, norm_cdf, norm_pdf

logger = structlog.get_logger(__name__)

DEFAULT_TIME_NODES = 64
DEFAULT_Z_NODES = 64
Z_FLOOR = 8.0
Z_WINDOW = 10.0


@dataclass(frozen=True)
class CvaParams:
    """Forward agreement with bilateral default intensities lambda and lambda + h."""

    r: float
    lam: float
    h: float
    sigma: float
    S0: float
    K: float
    T: float

    def __post_init__(self):
        for name in ("r", "sigma", "S0", "K", "T"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"CvaParams.{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0.0 or self.h < 0.0:
            raise ValueError(f"intensities must be nonnegative, got lam={self.lam}, h={self.h}")

    @property
    def mu_bar(self) -> float:
        return self.r + self.lam

    @classmethod
    def at_the_money(cls, r: float, lam: float, h: float, sigma: float, S0: float, T: float) -> "CvaParams":
        """Strike chosen so that the order-0 value vanishes at t=0."""
        return cls(r=r, lam=lam, h=h, sigma=sigma, S0=S0, K=S0 * np.exp(r * T), T=T)


def _check_time(t: float, p: CvaParams):
    if not 0.0 <= t <= p.T:
        raise ValueError(f"t must lie in [0, T={p.T}], got t={t}")


def v0_z0(t: float, S, p: CvaParams):
    """
    Risk-free-like order 0: V0 = e^{-mu_bar tau}(S e^{r tau} - K), Z0 = e^{-lam tau} sigma S.
    """
    _check_time(t, p)
    tau = p.T - t
    S = np.asarray(S, dtype=float)
    value = np.exp(-p.mu_bar * tau) * (S * np.exp(p.r * tau) - p.K)
    vol = np.exp(-p.lam * tau) * p.sigma * S
    return value, vol


def v1_z1(t: float, S, p: CvaParams, rule: Optional[QuadratureRule] = None):
    """
    First-order adjustment and its volatility.

    V1 = -e^{-mu_bar tau} h int_t^T C(u; t, S) du
    Z1 = -e^{-lam tau} h sigma S int_t^T N(d1(u; t, S)) du

    Args:
        t (float): Valuation time.
        S: Spot price(s).
        p (CvaParams): Contract parameters.
        rule (QuadratureRule): Legendre rule on any interval; remapped onto [t, T].

    Returns:
        tuple: (V1, Z1) with the shape of ``S``.
    """
    _check_time(t, p)
    S = np.asarray(S, dtype=float)
    if p.h == 0.0 or t == p.T:
        return np.zeros_like(S), np.zeros_like(S)
    rule = rule or gauss_rules(DEFAULT_TIME_NODES, LEGENDRE)
    u, w = rule.mapped(t, p.T)
    tau = p.T - t
    S_b = S[..., None]
    calls = call_like(u, t, S_b, p.K, p.r, p.sigma, p.T)
    forward = S_b * np.exp(p.r * tau)
    d1, _ = d12(forward, p.K, p.sigma * np.sqrt(u - t))
    value = -np.exp(-p.mu_bar * tau) * p.h * np.sum(w * calls, axis=-1)
    vol = -np.exp(-p.lam * tau) * p.h * p.sigma * S * np.sum(w * norm_cdf(d1), axis=-1)
    return value, vol


def v2(t: float, S, p: CvaParams, time_rule: Optional[QuadratureRule] = None,
       z_rule: Optional[QuadratureRule] = None):
    """
    Second-order adjustment

        V2 = e^{-mu_bar tau} h^2 int_t^T du int_u^T ds int_{-d2(u;t,S)}^inf phi(z) C(s; u, S_u(z, S)) dz

    The z-integral runs on [lo, hi] with lo = max(-d2, -8) and hi = max(lo + 10, 8)
    under a Legendre rule. The part beyond hi is bounded by z_tail_bound and logged.
    """
    _check_time(t, p)
    S = np.asarray(S, dtype=float)
    if p.h == 0.0 or t == p.T:
        return np.zeros_like(S)
    time_rule = time_rule or gauss_rules(DEFAULT_TIME_NODES, LEGENDRE)
    z_rule = z_rule or gauss_rules(DEFAULT_Z_NODES, LEGENDRE)
    tau = p.T - t
    spots = S.reshape(-1)
    u_nodes, u_weights = time_rule.mapped(t, p.T)
    total = np.zeros(spots.shape)
    tail = np.zeros(spots.shape)
    for u, wu in zip(u_nodes, u_weights):
        s_nodes, s_weights = time_rule.mapped(u, p.T)
        _, d2 = d12(spots * np.exp(p.r * tau), p.K, p.sigma * np.sqrt(u - t))
        lo = np.maximum(-d2, -Z_FLOOR)
        hi = np.maximum(lo + Z_WINDOW, Z_FLOOR)
        z, wz = z_rule.mapped(lo, hi)
        S_u = gbm_push(spots[:, None], p.r, p.sigma, u - t, z)
        # calls[n, z, s] = C(s; u, S_u)
        calls = call_like(s_nodes, u, S_u[..., None], p.K, p.r, p.sigma, p.T)
        inner = np.sum(calls * s_weights, axis=-1)
        total = total + wu * np.sum(wz * norm_pdf(z) * inner, axis=-1)
        tail = tail + wu * z_tail_bound(u, t, spots, hi, p)
    scale = np.exp(-p.mu_bar * tau) * p.h ** 2
    logger.debug("[CVA] second-order z tail bound", t=t, bound=float(np.max(scale * tail)))
    return (scale * total).reshape(S.shape)


def z_tail_bound(u: float, t: float, S, hi, p: CvaParams) -> np.ndarray:
    """
    Upper bound on int_u^T ds int_hi^inf phi(z) C(s; u, S_u(z, S)) dz, from
    C(s; u, x) <= x e^{r(T - u)}:

        (T - u) S e^{r(T - t)} N(sigma sqrt(u - t) - hi)
    """
    S = np.asarray(S, dtype=float)
    return (p.T - u) * S * np.exp(p.r * (p.T - t)) * norm_cdf(p.sigma * np.sqrt(u - t) - np.asarray(hi, dtype=float))


def cva_model(p: CvaParams, epsilon: float = 1.0) -> ModelSpec:
    """
    The forward agreement as a generic perturbed model: c = mu_bar, drift r S,
    volatility sigma S, g(v) = -h v 1{v >= 0}, payoff S - K.
    """

    def generator(t, x, v, z):
        return -p.h * np.maximum(v, 0.0)

    def generator_dv(t, x, v, z):
        return -p.h * (v >= 0.0).astype(float)

    return ModelSpec(
        dim=1,
        n_brownian=1,
        discount=lambda t, x: np.full(x.shape[0], p.mu_bar),
        drift=lambda t, x: p.r * x,
        sigma=lambda t, x: p.sigma * x[:, :, None],
        payoff=lambda x: x[:, 0] - p.K,
        payoff_grad=lambda x: np.ones_like(x),
        generator=generator,
        generator_dv=generator_dv,
        generator_dz=lambda t, x, v, z: np.zeros_like(z),
        horizon=p.T,
        epsilon=epsilon,
        name="cva-forward",
    )


def term_structure(p: CvaParams, maturities: Iterable[float], pde_solver=None,
                   time_nodes: int = DEFAULT_TIME_NODES, z_nodes: int = DEFAULT_Z_NODES) -> List[dict]:
    """
    Orders 1 and 2 at t=0 for each maturity with the at-the-money-forward strike.

    Args:
        p (CvaParams): Base parameters; T and K are replaced per maturity.
        maturities: Positive, strictly increasing maturities.
        pde_solver: Optional callable ``CvaParams -> float`` giving the full
            nonlinear value at (0, S0); fills the ``Vpde`` column.
        time_nodes (int): Legendre nodes per time dimension.
        z_nodes (int): Legendre nodes in z.

    Returns:
        list: One dict per maturity with keys T, K, V0, V1, V2, V1plusV2, Vpde.
    """
    maturities = [float(T) for T in maturities]
    if not maturities or any(T <= 0.0 for T in maturities) or any(
            b <= a for a, b in zip(maturities, maturities[1:])):
        raise ValueError(f"maturities must be positive and strictly increasing, got {maturities}")
    time_rule = gauss_rules(time_nodes, LEGENDRE)
    z_rule = gauss_rules(z_nodes, LEGENDRE)
    rows = []
    for T in maturities:
        q = replace(p, T=T, K=p.S0 * np.exp(p.r * T))
        val0, _ = v0_z0(0.0, q.S0, q)
        val1, _ = v1_z1(0.0, q.S0, q, time_rule)
        val2 = v2(0.0, q.S0, q, time_rule, z_rule)
        row = {
            "T": T,
            "K": q.K,
            "V0": float(val0),
            "V1": float(val1),
            "V2": float(val2),
            "V1plusV2": float(val1 + val2),
            "Vpde": float(pde_solver(q)) if pde_solver is not None else float("nan"),
        }
        logger.info("[CVA] maturity evaluated", T=T, V1=row["V1"], V2=row["V2"], Vpde=row["Vpde"])
        rows.append(row)
    return rows
