"""
Module: diff_rates
Description: Orders 0 to 2 of a self-financing call-spread portfolio when
             borrowing (R) and lending (r) rates differ, under the physical
             measure with stock drift mu.

The wealth solves dV = rV dt - {(R - r) max(Z/sigma - V, 0) - theta Z} dt + Z dW
with V_T = (S_T - K1)^+ - 2 (S_T - K2)^+ and theta = (mu - r)/sigma.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import structlog

from src.models import ModelSpec, black_call
from src.numerics import (
    LEGENDRE,
    QuadratureRule,
    bisect_roots,
    gauss_rules,
    log_norm_cdf,
    norm_cdf,
    norm_pdf,
)

logger = structlog.get_logger(__name__)

Z_HALF_WIDTH = 10.0
DEFAULT_TIME_NODES = 64
DEFAULT_Z_NODES = 64
V2_NODES = 24

# log-moneyness window searched for the lending/borrowing switch level
_KINK_SEARCH = 12.0


@dataclass(frozen=True)
class DiffRatesParams:
    mu: float
    sigma: float
    r: float
    R: float
    T: float
    S0: float
    K1: float
    K2: float

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.R < self.r:
            raise ValueError(f"borrowing rate R={self.R} below lending rate r={self.r}")
        if not 0.0 < self.K1 < self.K2:
            raise ValueError(f"strikes must satisfy 0 < K1 < K2, got K1={self.K1}, K2={self.K2}")
        if not (self.T > 0.0 and self.S0 > 0.0):
            raise ValueError("T and S0 must be positive")

    @property
    def theta(self) -> float:
        return (self.mu - self.r) / self.sigma

    @property
    def spread(self) -> float:
        return self.R - self.r


@dataclass(frozen=True)
class DiffRatesRules:
    """Legendre rules for the time and z integrals, and whether to split z at kinks."""

    time_rule: QuadratureRule
    z_rule: QuadratureRule
    split: bool = True

    @classmethod
    def build(cls, time_nodes: int = DEFAULT_TIME_NODES, z_nodes: int = DEFAULT_Z_NODES,
              split: bool = True) -> "DiffRatesRules":
        return cls(gauss_rules(time_nodes, LEGENDRE), gauss_rules(z_nodes, LEGENDRE), split)


def _d12(x, K, tau, p: DiffRatesParams):
    vol = p.sigma * np.sqrt(tau)
    d1 = (np.log(x * np.exp(p.mu * tau) / K) + 0.5 * vol ** 2) / vol
    return d1, d1 - vol


def payoff(x, p: DiffRatesParams):
    x = np.asarray(x, dtype=float)
    return np.maximum(x - p.K1, 0.0) - 2.0 * np.maximum(x - p.K2, 0.0)


def dr_v0_z0(t: float, S, p: DiffRatesParams):
    """
    V0 = e^{-r tau}(C(K1, S) - 2 C(K2, S)) with C the Black call on the
    physical forward S e^{mu tau}; Z0 = e^{(mu - r) tau} sigma S (N(d1(K1)) - 2 N(d1(K2))).
    """
    if not 0.0 <= t <= p.T:
        raise ValueError(f"t must lie in [0, T={p.T}], got t={t}")
    S = np.asarray(S, dtype=float)
    tau = p.T - t
    forward = S * np.exp(p.mu * tau)
    total_vol = p.sigma * np.sqrt(tau)
    value = np.exp(-p.r * tau) * (black_call(forward, p.K1, total_vol) - 2.0 * black_call(forward, p.K2, total_vol))
    if tau == 0.0:
        delta = (S > p.K1).astype(float) - 2.0 * (S > p.K2).astype(float)
        return value, p.sigma * S * delta
    positive = S > 0.0
    safe = np.where(positive, S, 1.0)
    d1_1, _ = _d12(safe, p.K1, tau, p)
    d1_2, _ = _d12(safe, p.K2, tau, p)
    vol = np.exp((p.mu - p.r) * tau) * p.sigma * S * (norm_cdf(d1_1) - 2.0 * norm_cdf(d1_2))
    return value, np.where(positive, vol, 0.0)


def dr_driver(v, z, p: DiffRatesParams):
    """g(v, z) = (R - r) max(z/sigma - v, 0) - theta z."""
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    return p.spread * np.maximum(z / p.sigma - v, 0.0) - p.theta * z


def _borrowing_gap(x, tau, p: DiffRatesParams):
    """A(x) = K1 N(d2(K1, x)) - 2 K2 N(d2(K2, x)); equals e^{r tau}(Z0/sigma - V0)."""
    _, d2_1 = _d12(x, p.K1, tau, p)
    _, d2_2 = _d12(x, p.K2, tau, p)
    return p.K1 * norm_cdf(d2_1) - 2.0 * p.K2 * norm_cdf(d2_2), d2_1, d2_2


def kink_levels(tau, p: DiffRatesParams) -> np.ndarray:
    """
    Stock levels where the integrand loses smoothness, per remaining time tau.

    Returns an array of shape tau.shape + (3,): the root of A (borrowing for
    x below it, lending above) and the two strike levels where d2 = 0.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    log_k1, log_k2 = np.log(p.K1), np.log(2.0 * p.K2)

    def log_ratio(y):
        x = np.exp(y)
        _, d2_1 = _d12(x, p.K1, tau, p)
        _, d2_2 = _d12(x, p.K2, tau, p)
        # strictly decreasing in y
        return log_k1 + log_norm_cdf(d2_1) - log_k2 - log_norm_cdf(d2_2)

    centre = np.log(p.K1)
    root = bisect_roots(log_ratio, np.full(tau.shape, centre - _KINK_SEARCH),
                        np.full(tau.shape, centre + _KINK_SEARCH))
    drift = -p.mu * tau + 0.5 * p.sigma ** 2 * tau
    return np.stack([np.exp(root), p.K1 * np.exp(drift), p.K2 * np.exp(drift)], axis=-1)


def _z_nodes(S, t: float, u, p: DiffRatesParams, z_rule: QuadratureRule, split: bool):
    """
    z nodes/weights for E[f(S_u(S, z))], shape (n, nu, nz_total).

    With ``split`` the window [-L, L] is cut at the z-images of the kink
    levels, one Legendre panel per piece.
    """
    n, nu = S.shape[0], u.shape[0]
    lo = np.full((n, nu), -Z_HALF_WIDTH)
    hi = np.full((n, nu), Z_HALF_WIDTH)
    if not split:
        return z_rule.mapped(lo, hi)
    levels = kink_levels(p.T - u, p)
    dt = (u - t)[None, :, None]
    images = (np.log(levels[None, :, :] / S[:, None, None]) - (p.mu - 0.5 * p.sigma ** 2) * dt) / (
        p.sigma * np.sqrt(dt))
    images = np.nan_to_num(images, nan=Z_HALF_WIDTH)
    edges = np.sort(np.clip(images, -Z_HALF_WIDTH, Z_HALF_WIDTH), axis=-1)
    edges = np.concatenate([lo[..., None], edges, hi[..., None]], axis=-1)
    nodes, weights = [], []
    for k in range(edges.shape[-1] - 1):
        z, w = z_rule.mapped(edges[..., k], edges[..., k + 1])
        nodes.append(z)
        weights.append(w)
    return np.concatenate(nodes, axis=-1), np.concatenate(weights, axis=-1)


def _first_order_integrands(x, tau, p: DiffRatesParams):
    """
    Returns (F, sigma x dF/dx, chi) for the first-order source at stock x with
    remaining time tau, all undiscounted (factor e^{r tau} removed).
    """
    gap, d2_1, d2_2 = _borrowing_gap(x, tau, p)
    d1_1 = d2_1 + p.sigma * np.sqrt(tau)
    d1_2 = d2_2 + p.sigma * np.sqrt(tau)
    chi = (gap >= 0.0).astype(float)
    carry = x * np.exp(p.mu * tau)
    delta_n1 = norm_cdf(d1_1) - 2.0 * norm_cdf(d1_2)
    source = p.spread * np.maximum(gap, 0.0) - (p.mu - p.r) * carry * delta_n1
    root_tau = np.sqrt(tau)
    gap_vega = (p.K1 * norm_pdf(d2_1) - 2.0 * p.K2 * norm_pdf(d2_2)) / root_tau
    delta_phi1 = (norm_pdf(d1_1) - 2.0 * norm_pdf(d1_2)) / root_tau
    source_vol = p.spread * chi * gap_vega - (p.mu - p.r) * carry * (p.sigma * delta_n1 + delta_phi1)
    return source, source_vol, chi


def dr_v1_z1(t: float, S, p: DiffRatesParams, rules: Optional[DiffRatesRules] = None):
    """
    First-order correction and its volatility.

    V1 = e^{-r tau} int_t^T du int phi(z) F(u, S_u(S, z)) dz
    Z1 = e^{-r tau} int_t^T du int phi(z) sigma S_u dF/dx(u, S_u(S, z)) dz

    where F is the closed-form g(V0, Z0) with its e^{-r(T-u)} factor removed.
    The (R - r) factor on the indicator term of Z1 is kept.

    Args:
        t (float): Valuation time.
        S: Spot price(s).
        p (DiffRatesParams): Market and contract parameters.
        rules (DiffRatesRules): Quadrature rules and split flag.

    Returns:
        tuple: (V1, Z1) with the shape of ``S``.
    """
    if not 0.0 <= t <= p.T:
        raise ValueError(f"t must lie in [0, T={p.T}], got t={t}")
    S = np.asarray(S, dtype=float)
    if t == p.T or (p.R == p.r and p.mu == p.r):
        return np.zeros_like(S), np.zeros_like(S)
    rules = rules or DiffRatesRules.build()
    spots = S.reshape(-1)
    u, wu = rules.time_rule.mapped(t, p.T)
    z, wz = _z_nodes(spots, t, u, p, rules.z_rule, rules.split)
    dt = (u - t)[None, :, None]
    S_u = spots[:, None, None] * np.exp((p.mu - 0.5 * p.sigma ** 2) * dt + p.sigma * np.sqrt(dt) * z)
    source, source_vol, _ = _first_order_integrands(S_u, (p.T - u)[None, :, None], p)
    kernel = wz * norm_pdf(z)
    value = np.sum(np.sum(kernel * source, axis=-1) * wu, axis=-1)
    vol = np.sum(np.sum(kernel * source_vol, axis=-1) * wu, axis=-1)
    discount = np.exp(-p.r * (p.T - t))
    return (discount * value).reshape(S.shape), (discount * vol).reshape(S.shape)


def dr_v2(t: float, S, p: DiffRatesParams, rules: Optional[DiffRatesRules] = None):
    """
    Second-order correction

        V2 = e^{-r tau} int_t^T du E[ e^{r(T-u)} (g_v V1(u, S_u) + g_z Z1(u, S_u)) ]

    with g_v = -(R - r) chi_u and g_z = (R - r) chi_u / sigma - theta. The
    inner (s, z2) integrals are those of V1 and Z1 restarted at (u, S_u), so
    the whole evaluation is a quadruple quadrature over (u, s, z1, z2).
    Indicator derivatives are taken almost everywhere.
    """
    if not 0.0 <= t <= p.T:
        raise ValueError(f"t must lie in [0, T={p.T}], got t={t}")
    S = np.asarray(S, dtype=float)
    if t == p.T or (p.R == p.r and p.mu == p.r):
        return np.zeros_like(S)
    rules = rules or DiffRatesRules.build(V2_NODES, V2_NODES)
    spots = S.reshape(-1)
    u_nodes, u_weights = rules.time_rule.mapped(t, p.T)
    total = np.zeros(spots.shape)
    for u, wu in zip(u_nodes, u_weights):
        u_arr = np.array([u])
        z, wz = _z_nodes(spots, t, u_arr, p, rules.z_rule, rules.split)
        z, wz = z[:, 0, :], wz[:, 0, :]
        S_u = spots[:, None] * np.exp((p.mu - 0.5 * p.sigma ** 2) * (u - t) + p.sigma * np.sqrt(u - t) * z)
        v1, z1 = dr_v1_z1(u, S_u, p, rules)
        chi = (_borrowing_gap(S_u, p.T - u, p)[0] >= 0.0).astype(float)
        growth = np.exp(p.r * (p.T - u))
        bracket = growth * (-p.spread * chi * v1 + (p.spread * chi / p.sigma - p.theta) * z1)
        total = total + wu * np.sum(wz * norm_pdf(z) * bracket, axis=-1)
    value = np.exp(-p.r * (p.T - t)) * total
    logger.debug("[DIFF_RATES] second order evaluated", t=t, nodes=rules.time_rule.size)
    return value.reshape(S.shape)


def benchmark_orders(p: DiffRatesParams, rules_v1: Optional[DiffRatesRules] = None,
                     rules_v2: Optional[DiffRatesRules] = None) -> Tuple[float, float, float]:
    """(V0, V1, V2) at (0, S0)."""
    v0, _ = dr_v0_z0(0.0, p.S0, p)
    v1, _ = dr_v1_z1(0.0, p.S0, p, rules_v1)
    v2 = dr_v2(0.0, p.S0, p, rules_v2)
    logger.info("[DIFF_RATES] orders at anchor", V0=float(v0), V1=float(v1), V2=float(v2))
    return float(v0), float(v1), float(v2)


def diff_rates_model(p: DiffRatesParams, epsilon: float = 1.0, absorb_premium: bool = False) -> ModelSpec:
    """
    The portfolio as a generic perturbed model under the physical measure.

    By default the premium term -theta z is part of the perturbation g. With
    ``absorb_premium`` it moves into the linear driver coefficient theta, so
    order 0 becomes the risk-neutral price.
    """
    theta = p.theta
    premium = 0.0 if absorb_premium else theta

    def generator(t, x, v, z):
        return p.spread * np.maximum(z[:, 0] / p.sigma - v, 0.0) - premium * z[:, 0]

    def generator_dv(t, x, v, z):
        return -p.spread * (z[:, 0] / p.sigma - v >= 0.0).astype(float)

    def generator_dz(t, x, v, z):
        borrowing = (z[:, 0] / p.sigma - v >= 0.0).astype(float)
        return (p.spread / p.sigma * borrowing - premium)[:, None]

    return ModelSpec(
        dim=1,
        n_brownian=1,
        discount=lambda t, x: np.full(x.shape[0], p.r),
        drift=lambda t, x: p.mu * x,
        sigma=lambda t, x: p.sigma * x[:, :, None],
        payoff=lambda x: payoff(x[:, 0], p),
        payoff_grad=lambda x: ((x > p.K1).astype(float) - 2.0 * (x > p.K2).astype(float)),
        generator=generator,
        generator_dv=generator_dv,
        generator_dz=generator_dz,
        theta=(lambda t, x: np.full((x.shape[0], 1), theta)) if absorb_premium else None,
        horizon=p.T,
        epsilon=epsilon,
        name="diff-rates",
    )
