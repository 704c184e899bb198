#!/usr/bin/env python3
"""
Tests for the small-volatility expansion engine.
"""

import logging

import numpy as np
import pytest

from src.asymptotic import (DeltaSde, ScalarField, build_tables, delta_scaling_study, lognormal_second_moment,
                            recursion_bridge, recursion_orders, scaling_sde, v_expand, z_expand)
from src.diff_rates import DiffRatesParams, diff_rates_model
from src.models import gbm_model

logger = logging.getLogger(__name__)

KAPPA, BETA, NU, C = 0.05, 0.5, 1.0, 0.02


def _identity_field() -> ScalarField:
    return ScalarField(fn=lambda u, x, d: x[:, 0],
                       grad=lambda u, x, d: np.ones_like(x),
                       hess=lambda u, x, d: np.zeros(x.shape + (1,)),
                       delta=lambda u, x, d: np.zeros(x.shape[0]),
                       grad_delta=lambda u, x, d: np.zeros_like(x),
                       delta2=lambda u, x, d: np.zeros(x.shape[0]))


def test_delta_sde_validation():
    with pytest.raises(ValueError):
        DeltaSde(dim=1, n_brownian=1, drift=lambda x, d: x, diffusion=lambda x, d: 0.1 * x[:, :, None],
                 x0=[1.0], t0=0.0, T=1.0)
    with pytest.raises(ValueError):
        scaling_sde(KAPPA, BETA, NU, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        DeltaSde(dim=2, n_brownian=1, drift=lambda x, d: x, diffusion=lambda x, d: d * x[:, :, None],
                 x0=[1.0], t0=0.0, T=1.0)
    with pytest.raises(ValueError):
        DeltaSde(dim=1, n_brownian=1, drift=lambda x, d: x, diffusion=lambda x, d: d * x[:, :, None],
                 x0=[1.0], t0=0.0, T=1.0, derivatives={"vega": lambda x, d: x})


def test_tables_for_the_linear_model():
    tables = build_tables(scaling_sde(KAPPA, BETA, NU, 1.0, 0.0, 1.0), n_nodes=101)
    growth = np.exp(KAPPA * tables.mesh)
    assert tables.X0[:, 0] == pytest.approx(growth, rel=1e-9)
    assert tables.Y[:, 0, 0] == pytest.approx(growth, rel=1e-9)
    assert tables.anchor == pytest.approx([1.0])
    # first delta derivative of the mean path: beta t e^{kappa t}
    assert tables.D_bar[-1, 0] == pytest.approx(BETA * np.exp(KAPPA), rel=1e-4)
    with pytest.raises(ValueError):
        build_tables(scaling_sde(KAPPA, BETA, NU, 1.0, 0.0, 1.0), mesh=[0.0, 0.5])


def test_analytic_and_difference_derivatives_agree():
    analytic = scaling_sde(KAPPA, BETA, NU, 1.0, 0.0, 1.0)
    numeric = DeltaSde(dim=1, n_brownian=1, drift=analytic.drift, diffusion=analytic.diffusion,
                       x0=[1.0], t0=0.0, T=1.0)
    a = build_tables(analytic, n_nodes=101)
    b = build_tables(numeric, n_nodes=101)
    assert np.allclose(a.D_bar, b.D_bar, rtol=1e-5, atol=1e-9)
    assert np.allclose(a.E_bar, b.E_bar, rtol=1e-3, atol=1e-6)
    assert np.allclose(a.X2, b.X2, rtol=1e-4, atol=1e-8)


def test_terminal_mean_coefficients():
    tables = build_tables(scaling_sde(KAPPA, BETA, NU, 1.0, 0.0, 1.0), n_nodes=201)
    undiscounted = ScalarField.constant(0.0)
    value = v_expand(tables, undiscounted, _identity_field(), terminal=True)
    base = np.exp(KAPPA)
    assert value.f0 == pytest.approx(base, rel=1e-9)
    assert value.f1 == pytest.approx(BETA * base, rel=1e-4)
    assert value.f2 == pytest.approx(BETA ** 2 * base, rel=1e-3)
    vol = z_expand(tables, undiscounted, _identity_field(), terminal=True)
    assert np.all(vol.f0 == 0.0)
    assert vol.f1[0] == pytest.approx(NU * base, rel=1e-9)
    assert vol.f2[0] == pytest.approx(2.0 * BETA * NU * base, rel=1e-3)


def test_running_integral_of_a_constant():
    tables = build_tables(scaling_sde(KAPPA, BETA, NU, 1.0, 0.0, 1.0), n_nodes=201)
    value = v_expand(tables, ScalarField.constant(C), ScalarField.constant(1.0))
    assert value.f0 == pytest.approx((1.0 - np.exp(-C)) / C, rel=1e-6)
    assert value.f1 == pytest.approx(0.0, abs=1e-12)
    assert value.f2 == pytest.approx(0.0, abs=1e-12)


def test_delta_scaling_study():
    deltas = [0.2 / 2 ** k for k in range(3)]
    rows = delta_scaling_study(KAPPA, BETA, NU, C, 1.0, 1.0, deltas)
    assert [r["delta"] for r in rows] == deltas
    assert np.isnan(rows[0]["ratio"])
    for row in rows:
        assert row["exact"] == pytest.approx(lognormal_second_moment(KAPPA, BETA, NU, C, 1.0, 1.0, row["delta"]))
        assert row["z0"] == 0.0
    logger.info("delta ratios %s", [r["ratio"] for r in rows[1:]])
    for row in rows[1:]:
        assert 6.0 <= row["ratio"] <= 10.0
    with pytest.raises(ValueError):
        delta_scaling_study(KAPPA, BETA, NU, C, 1.0, 1.0, [0.2])
    with pytest.raises(ValueError):
        delta_scaling_study(KAPPA, BETA, NU, C, 1.0, 1.0, [0.1, 0.2])


def test_second_moment_closed_form():
    assert lognormal_second_moment(KAPPA, BETA, NU, C, 2.0, 1.0, 0.0) == pytest.approx(4.0 * np.exp(2 * KAPPA - C))


def test_recursion_order_zero_for_a_forward():
    r, sigma, c = 0.03, 0.2, 0.01
    model = gbm_model(r, sigma, 1.0, payoff=lambda x: x[:, 0], discount_rate=c,
                      payoff_grad=lambda x: np.ones_like(x))
    sde = scaling_sde(r, 0.0, sigma, 100.0, 0.0, 1.0)
    t_grid, x_grid = np.array([0.0, 0.5, 1.0]), np.array([90.0, 100.0, 110.0])
    surface = recursion_bridge(model, sde, 0, [], t_grid, x_grid)
    resolved = surface.at(1.0)
    tau = 1.0 - t_grid[:, None]
    growth = np.exp((r - c) * tau)
    assert resolved.values == pytest.approx(x_grid[None, :] * growth, rel=1e-6)
    assert resolved.vols == pytest.approx(sigma * x_grid[None, :] * growth, rel=1e-6)
    assert surface.value(0.0, np.array([100.0]), 1.0)[0] == pytest.approx(100.0 * np.exp(r - c), rel=1e-6)


def test_recursion_orders_vanish_without_generator():
    model = gbm_model(0.03, 0.2, 1.0, payoff=lambda x: x[:, 0], payoff_grad=lambda x: np.ones_like(x))
    sde = scaling_sde(0.03, 0.0, 0.2, 100.0, 0.0, 1.0)
    surfaces = recursion_orders(model, sde, 1, [0.0, 1.0], [95.0, 105.0], n_nodes=20)
    assert [s.order for s in surfaces] == [0, 1]
    assert np.allclose(surfaces[1].at(1.0).values, 0.0)


def test_recursion_rejects_unsupported_models():
    p = DiffRatesParams(mu=0.05, sigma=0.2, r=0.01, R=0.06, T=0.25, S0=100.0, K1=95.0, K2=105.0)
    sde = scaling_sde(0.01, 0.0, 0.2, 100.0, 0.0, 0.25)
    with pytest.raises(ValueError):
        recursion_bridge(diff_rates_model(p, absorb_premium=True), sde, 0, [], [0.0, 0.25], [100.0])
    with pytest.raises(ValueError):
        recursion_bridge(diff_rates_model(p), sde, 3, [], [0.0, 0.25], [100.0])
    with pytest.raises(ValueError):
        recursion_bridge(diff_rates_model(p), sde, 1, [], [0.0, 0.25], [100.0])
    with pytest.raises(ValueError):
        recursion_bridge(diff_rates_model(p), sde, 0, [], [0.0, 0.5], [100.0])
