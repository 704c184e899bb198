#!/usr/bin/env python3
"""
Tests for the bilateral CVA forward closed forms.
"""

import logging

import numpy as np
import pytest
from scipy import integrate

from src.cva_forward import CvaParams, cva_model, term_structure, v0_z0, v1_z1, v2, z_tail_bound
from src.models import call_like
from src.numerics import LEGENDRE, gauss_rules
from src.pde_engine import cva_pde_value

logger = logging.getLogger(__name__)


def _params(T: float = 1.0, h: float = 0.03) -> CvaParams:
    return CvaParams.at_the_money(r=0.02, lam=0.01, h=h, sigma=0.2, S0=100.0, T=T)


def test_order_zero_at_the_money_forward_vanishes():
    p = _params()
    value, vol = v0_z0(0.0, 100.0, p)
    assert p.K == pytest.approx(102.0201, abs=1e-4)
    assert float(value) == pytest.approx(0.0, abs=1e-12)
    assert float(vol) == pytest.approx(np.exp(-0.01) * 20.0)


def test_order_zero_terminal_and_volatility():
    p = _params(T=5.0)
    value, _ = v0_z0(5.0, 110.0, p)
    assert float(value) == pytest.approx(110.0 - p.K)
    _, vol = v0_z0(0.0, 100.0, p)
    assert float(vol) == pytest.approx(19.0246, abs=1e-4)
    with pytest.raises(ValueError):
        v0_z0(6.0, 100.0, p)


def test_first_order_trivial_cases():
    assert v1_z1(0.0, 100.0, _params(h=0.0)) == (0.0, 0.0)
    value, vol = v1_z1(1.0, np.array([90.0, 100.0]), _params())
    assert np.all(value == 0.0) and np.all(vol == 0.0)


def test_first_order_matches_adaptive_quadrature():
    p = _params()
    value, vol = v1_z1(0.0, 100.0, p, gauss_rules(64, LEGENDRE))
    integral, _ = integrate.quad(lambda u: float(call_like(u, 0.0, 100.0, p.K, p.r, p.sigma, p.T)), 0.0, p.T,
                                 epsabs=1e-12)
    assert float(value) == pytest.approx(-np.exp(-p.mu_bar * p.T) * p.h * integral, rel=1e-8)
    assert float(value) < 0.0
    assert float(vol) < 0.0


def test_second_order_sign_and_node_convergence():
    p = _params(T=5.0)
    coarse = float(v2(0.0, 100.0, p, gauss_rules(24, LEGENDRE), gauss_rules(32, LEGENDRE)))
    fine = float(v2(0.0, 100.0, p, gauss_rules(48, LEGENDRE), gauss_rules(64, LEGENDRE)))
    first, _ = v1_z1(0.0, 100.0, p)
    logger.info("second order at T=5: coarse=%.8f fine=%.8f", coarse, fine)
    assert fine > 0.0 > float(first)
    assert coarse == pytest.approx(fine, rel=1e-4)
    assert abs(fine) < abs(float(first))
    assert float(v2(0.0, 100.0, _params(h=0.0))) == 0.0
    assert float(v2(5.0, 100.0, p)) == 0.0


def test_second_order_z_window_and_tail_bound():
    p = _params(T=5.0)
    spots = np.array([60.0, 100.0, 160.0])
    hi = np.full(spots.shape, 8.0)
    for u in (0.0, 1.0, 4.99):
        bound = z_tail_bound(u, 0.0, spots, hi, p)
        assert np.all(bound >= 0.0)
        assert np.all(bound < 1e-9)
    assert z_tail_bound(p.T, 0.0, 100.0, 0.0, p) == 0.0
    # cutting the window at zero leaves most of the call mass outside
    assert float(z_tail_bound(1.0, 0.0, 100.0, 0.0, p)) > 1.0

    default = v2(0.0, spots, p)
    fine = v2(0.0, spots, p, z_rule=gauss_rules(128, LEGENDRE))
    assert default == pytest.approx(fine, rel=1e-6)
    assert default == pytest.approx([float(v2(0.0, s, p)) for s in spots], rel=1e-12)


def test_vectorised_spots_match_scalar_calls():
    p = _params()
    spots = np.array([80.0, 100.0, 125.0])
    batch, _ = v1_z1(0.0, spots, p)
    single = [float(v1_z1(0.0, s, p)[0]) for s in spots]
    assert batch == pytest.approx(single, rel=1e-12)


def test_term_structure_linear_case():
    rows = term_structure(_params(h=0.0), [1.0])
    assert len(rows) == 1
    row = rows[0]
    assert row["T"] == 1.0
    assert row["K"] == pytest.approx(102.0201, abs=1e-4)
    assert row["V1"] == 0.0 and row["V1plusV2"] == 0.0
    assert np.isnan(row["Vpde"])


def test_term_structure_signs_and_validation():
    rows = term_structure(_params(), [1.0, 2.0, 3.0], time_nodes=32, z_nodes=32)
    assert [r["T"] for r in rows] == [1.0, 2.0, 3.0]
    for row in rows:
        assert row["V1"] < 0.0 < row["V2"]
        assert row["K"] == pytest.approx(100.0 * np.exp(0.02 * row["T"]))
    assert rows[2]["V1"] < rows[0]["V1"]
    with pytest.raises(ValueError):
        term_structure(_params(), [2.0, 1.0])
    with pytest.raises(ValueError):
        term_structure(_params(), [])


def test_cva_model_generator():
    model = cva_model(_params(), epsilon=1.0)
    x = np.array([[100.0], [100.0]])
    v = np.array([2.0, -1.0])
    z = np.zeros((2, 1))
    assert model.g(0.0, x, v, z) == pytest.approx([-0.06, 0.0])
    assert model.driver(0.0, x, v, z) == pytest.approx(-0.03 * v + np.array([-0.06, 0.0]))
    assert model.is_decoupled
    with pytest.raises(ValueError):
        CvaParams(r=0.02, lam=-0.01, h=0.03, sigma=0.2, S0=100.0, K=100.0, T=1.0)


@pytest.mark.slow
def test_second_order_improves_every_maturity():
    rows = term_structure(_params(T=10.0), np.arange(1.0, 11.0), pde_solver=lambda q: cva_pde_value(q, 400, 2000))
    for row in rows:
        first = abs(row["Vpde"] - row["V0"] - row["V1"])
        second = abs(row["Vpde"] - row["V0"] - row["V1plusV2"])
        logger.info("T=%g: first-order error %.3e, second-order error %.3e", row["T"], first, second)
        assert second <= first
