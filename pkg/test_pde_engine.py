#!/usr/bin/env python3
"""
Tests for the finite-difference engine: the linear theta scheme, the
nonlinear CVA benchmark and the order cascade.
"""

import logging

import numpy as np
import pytest

from src.cva_forward import CvaParams, cva_model, v0_z0, v1_z1, v2
from src.models import gbm_model
from src.pde_engine import (MASTER, PER_ORDER, ParabolicOperator, PdeGrid, cascade_orders, cascade_step, cva_grid,
                            cva_pde_value, combine_orders, second_derivative, solve_linear_parabolic,
                            solve_nonlinear_cva, space_derivative, surface_rows)

logger = logging.getLogger(__name__)


def _black_scholes_operator(r: float = 0.02, sigma: float = 0.2) -> ParabolicOperator:
    return ParabolicOperator(
        drift=lambda t, x: r * x,
        diffusion=lambda t, x: 0.5 * sigma ** 2 * x ** 2,
        discount=lambda t, x: np.full_like(x, r),
    )


def _cva_params(T: float = 1.0, h: float = 0.03) -> CvaParams:
    return CvaParams.at_the_money(r=0.02, lam=0.01, h=h, sigma=0.2, S0=100.0, T=T)


def test_grid_construction():
    grid = PdeGrid.log_spaced(100.0, 4.0, 200, 1.0, 50)
    assert grid.shape == (51, 201)
    assert grid.x[100] == pytest.approx(100.0)
    assert grid.horizon == 1.0
    finer = grid.refined()
    assert finer.shape == (101, 401)
    with pytest.raises(ValueError):
        PdeGrid(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        PdeGrid.log_spaced(100.0, 1.0, 10, 1.0, 10)
    with pytest.raises(ValueError):
        PdeGrid(np.linspace(0, 1, 5), np.linspace(0, 1, 3), terminal=np.zeros(4))
    with pytest.raises(ValueError):
        PdeGrid.log_spaced(100.0, 4.0, 10, 1.0, 0)
    with pytest.raises(ValueError):
        PdeGrid.uniform(0.0, 1.0, 10, 1.0, 0)
    assert PdeGrid.uniform(0.0, 1.0, 10, 2.0, 4).t == pytest.approx([0.0, 0.5, 1.0, 1.5, 2.0])


def test_black_scholes_call():
    grid = PdeGrid.log_spaced(100.0, 5.0, 400, 1.0, 400)
    grid = grid.with_terminal(np.maximum(grid.x - 100.0, 0.0))
    surface = solve_linear_parabolic(_black_scholes_operator(), grid)
    price = surface[0, 200]
    logger.info("Black-Scholes call on the grid: %.6f", price)
    assert price == pytest.approx(8.9160, abs=5e-3)


def test_pure_discounting_and_zero_payoff():
    grid = PdeGrid.uniform(0.0, 2.0, 40, 1.0, 50)
    op = ParabolicOperator(drift=lambda t, x: 0.0 * x, diffusion=lambda t, x: 0.1 + 0.0 * x,
                           discount=lambda t, x: np.full_like(x, 0.05))
    ones = solve_linear_parabolic(op, grid.with_terminal(np.ones(41)))
    assert np.allclose(ones[0], np.exp(-0.05), rtol=1e-5)
    zeros = solve_linear_parabolic(op, grid.with_terminal(np.zeros(41)))
    assert np.all(zeros == 0.0)
    with pytest.raises(ValueError):
        solve_linear_parabolic(op, grid)


def test_source_term_accumulates():
    grid = PdeGrid.uniform(0.0, 1.0, 20, 2.0, 100)
    op = ParabolicOperator(drift=lambda t, x: 0.0 * x, diffusion=lambda t, x: 0.0 * x,
                           discount=lambda t, x: 0.0 * x, source=lambda t, x: np.ones_like(x))
    surface = solve_linear_parabolic(op, grid.with_terminal(np.zeros(21)))
    assert np.allclose(surface[0], 2.0)


def test_nonlinear_cva_linear_case():
    p = _cva_params(h=0.0)
    grid = cva_grid(p, 200, 200)
    surface = solve_nonlinear_cva(p, grid)
    tau = p.T - grid.t[:, None]
    exact = np.exp(-p.mu_bar * tau) * (grid.x[None, :] * np.exp(p.r * tau) - p.K)
    assert np.max(np.abs(surface - exact)) <= 1e-3 * np.max(np.abs(exact))


def test_nonlinear_cva_boundary_pins():
    p = _cva_params()
    grid = cva_grid(p, 200, 100)
    surface = solve_nonlinear_cva(p, grid)
    tau = p.T - grid.t
    top = np.exp(-(p.mu_bar + p.h) * tau) * (grid.x[-1] * np.exp(p.r * tau) - p.K)
    assert surface[:-1, -1] == pytest.approx(top[:-1], rel=1e-12)
    # the adjustment lowers the value below the default-free forward
    assert surface[0, 100] < float(v0_z0(0.0, p.S0, p)[0])


def test_derivative_stencils():
    x = np.linspace(0.0, 2.0, 41)
    values = x ** 3
    assert np.allclose(space_derivative(values, x)[2:-2], 3.0 * x[2:-2] ** 2, atol=1e-10)
    geometric = 100.0 * np.exp(np.linspace(-0.5, 0.5, 41))
    assert np.allclose(space_derivative(geometric ** 2, geometric), 2.0 * geometric, rtol=1e-8)
    grid = PdeGrid(geometric, np.array([0.0, 1.0]))
    assert np.allclose(second_derivative(geometric ** 2, grid), 2.0, rtol=1e-8)


def test_per_order_cascade_matches_closed_forms():
    p = _cva_params()
    grid = PdeGrid.log_spaced(p.S0, 8.0, 400, p.T, 400)
    orders = cascade_orders(cva_model(p), grid, 2, route=PER_ORDER)
    centre = [p.S0]
    v1_closed, _ = v1_z1(0.0, p.S0, p)
    v2_closed = v2(0.0, p.S0, p)
    logger.info("cascade orders at S0: %s", [float(r.value_at(0.0, centre)[0]) for r in orders])
    assert orders[0].value_at(0.0, centre)[0] == pytest.approx(0.0, abs=2e-3)
    assert orders[1].value_at(0.0, centre)[0] == pytest.approx(float(v1_closed), abs=2e-3)
    assert orders[2].value_at(0.0, centre)[0] == pytest.approx(float(v2_closed), abs=2e-3)
    assert orders[0].vol_at(0.0, centre)[0] == pytest.approx(float(v0_z0(0.0, p.S0, p)[1]), rel=1e-3)


def test_linear_model_has_no_higher_orders():
    model = gbm_model(0.02, 0.2, 1.0, payoff=lambda x: np.maximum(x[:, 0] - 100.0, 0.0))
    grid = PdeGrid.log_spaced(100.0, 4.0, 100, 1.0, 50)
    orders = cascade_orders(model, grid, 2, route=PER_ORDER)
    assert np.all(orders[1].values == 0.0)
    assert np.all(orders[2].values == 0.0)


def test_master_cascade_is_fixed_at_zero_epsilon():
    p = _cva_params()
    grid = PdeGrid.log_spaced(p.S0, 6.0, 120, p.T, 60)
    iterates = cascade_orders(cva_model(p, epsilon=0.0), grid, 2, route=MASTER)
    assert [r.order for r in iterates] == [0, 1, 2]
    for later in iterates[1:]:
        assert np.allclose(later.values, iterates[0].values, atol=1e-12)


def test_master_cascade_epsilon_scaling():
    p = _cva_params()
    grid = PdeGrid.log_spaced(p.S0, 6.0, 200, p.T, 200)
    per_order = cascade_orders(cva_model(p), grid, 1, route=PER_ORDER)
    residuals = []
    for eps in (1.0, 0.5):
        iterates = cascade_orders(cva_model(p, epsilon=eps), grid, 2, route=MASTER)
        expansion = combine_orders(per_order, eps)
        # the first iterate of a decoupled model is the first-order sum itself
        assert np.allclose(iterates[1].values, expansion, atol=1e-10)
        residuals.append(abs(iterates[2].values[0, 100] - expansion[0, 100]))
    ratio = residuals[0] / residuals[1]
    logger.info("epsilon halving ratio %.3f", ratio)
    assert 3.0 <= ratio <= 5.5


def test_cascade_validation():
    p = _cva_params()
    grid = PdeGrid.log_spaced(p.S0, 4.0, 40, p.T, 20)
    other = PdeGrid.log_spaced(p.S0, 4.0, 60, p.T, 20)
    with pytest.raises(ValueError):
        cascade_orders(cva_model(p), grid, 3, route=PER_ORDER)
    with pytest.raises(ValueError):
        cascade_orders(cva_model(p), grid, 1, route="sideways")
    with pytest.raises(ValueError):
        cascade_step(cva_model(p), [], grid)
    first = cascade_orders(cva_model(p), other, 0)
    with pytest.raises(ValueError):
        cascade_step(cva_model(p), first, grid)


def test_surface_rows_order():
    p = _cva_params()
    grid = PdeGrid.log_spaced(p.S0, 4.0, 4, p.T, 2)
    result = cascade_orders(cva_model(p), grid, 0)[0]
    rows = list(surface_rows(result))
    assert len(rows) == 3 * 5
    assert rows[0][0] == 0.0 and rows[0][1] == pytest.approx(grid.x[0])
    assert rows[-1][2] == pytest.approx(grid.x[-1] - p.K)


@pytest.mark.slow
def test_nonlinear_cva_grid_convergence():
    p = _cva_params()
    coarse = cva_pde_value(p, 400, 2000)
    fine = cva_pde_value(p, 800, 4000)
    logger.info("nonlinear cva at 400x2000 %.8f, at 800x4000 %.8f", coarse, fine)
    assert abs(coarse - fine) <= 5e-4 * abs(fine)
