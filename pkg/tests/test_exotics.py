import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import norm

from comsmile.calibration import CalibrationConfig
from comsmile.exotics import (CsoQuote, cso_coefficients, cso_metric_price, cso_quote_metric,
                              fit_mean_reversion, price_cso_closed_form, price_mco,
                              volatility_drop)
from comsmile.localvol import LocalVolSurface
from comsmile.market_data import DiscountCurve, FuturesCurve
from comsmile.pde import PdeGrid
from comsmile.pricing import price_vanilla_future_style
from comsmile.spot_model import CalibratedSpotModel, futures_from_spot, simulate_spot
from comsmile.synthetic import synthetic_cso_quotes, synthetic_market

T1 = 1.0
TE = T1 - 1 / 12
T2 = T1 + 1 / 12
CURVE = FuturesCurve([0.5, T1, T2], [100.0, 100.0, 101.0])


def cso_model(a=0.5, sigma=0.2, n_k=1500):
    grid = PdeGrid.build([0.5, TE, T1], sigma_max=0.25, n_k=n_k)
    return CalibratedSpotModel(CURVE, a, LocalVolSurface.flat(sigma, times=(TE,)), grid)


MODEL = cso_model()


def mc_cso(model, te, t1, t2, K, n=500_000, seed=0):
    s = simulate_spot(0.2, model.a, [te], n, seed=seed)[0]
    pay = np.maximum(futures_from_spot(model.a, model.curve, te, t1, s)
                     - futures_from_spot(model.a, model.curve, te, t2, s) - K, 0.0)
    half = n // 2
    pairs = 0.5 * (pay[:half] + pay[half:])
    return pay.mean(), pairs.std(ddof=1) / math.sqrt(half)


# -- mid-curve options -------------------------------------------------------------


def test_mco_degenerates_to_vanilla():
    K = np.array([90.0, 100.0, 110.0])
    np.testing.assert_array_equal(price_mco(MODEL, T1, T2, K), price_vanilla_future_style(MODEL, T1, T2, K))
    assert price_mco(MODEL, 0.5, T2, 0.0) == pytest.approx(101.0, rel=1e-12)
    disc = DiscountCurve([2.0], [0.9])
    assert price_mco(MODEL, 0.5, T2, 100.0, "equity", disc) == pytest.approx(
        price_mco(MODEL, 0.5, T2, 100.0) * float(disc(0.5)), rel=1e-15)
    with pytest.raises(ValueError):
        price_mco(MODEL, 0.5, T2, 100.0, "equity")
    with pytest.raises(ValueError):
        price_mco(MODEL, 0.5, T2, 100.0, "american")
    with pytest.raises(ValueError):
        price_mco(MODEL, T2, T1, 100.0)


def test_mco_monotone_in_expiry_without_mean_reversion():
    m = cso_model(a=0.0)
    p = [float(price_mco(m, te, T2, 100.0)) for te in np.linspace(0.1, T1, 8)]
    assert np.all(np.diff(p) >= -1e-10)


def test_mco_matches_mc_oracle():
    te = T2 - 0.5
    p = float(price_mco(MODEL, te, T2, 100.0))
    s = simulate_spot(0.2, 0.5, [te], 400_000, seed=9)[0]
    pay = np.maximum(futures_from_spot(0.5, CURVE, te, T2, s) - 100.0, 0.0)
    pairs = 0.5 * (pay[:200_000] + pay[200_000:])
    se = pairs.std(ddof=1) / math.sqrt(pairs.size)
    assert abs(p - pay.mean()) < 3 * se + 1e-3


# -- calendar spreads ----------------------------------------------------------------


def test_cso_matches_mc_oracle():
    p = price_cso_closed_form(MODEL, TE, T1, T2, -1.0)
    mc, se = mc_cso(MODEL, TE, T1, T2, -1.0)
    assert abs(p - mc) < 3 * se + 1e-4


def test_cso_case_collapses():
    A, B = cso_coefficients(MODEL, TE, T1, T2, -1.0)
    assert A > 0
    K_deep = 100.0 - 101.0 - A * 1.5  # B = -0.5
    A2, B2 = cso_coefficients(MODEL, TE, T1, T2, K_deep)
    assert B2 < 0
    assert price_cso_closed_form(MODEL, TE, T1, T2, K_deep) == pytest.approx(100.0 - 101.0 - K_deep, rel=1e-12)
    # reversed legs: A < 0, and B <= 0 gives zero
    Ar, Br = cso_coefficients(MODEL, TE, T2, T1, 5.0)
    assert Ar < 0 and Br <= 0
    assert price_cso_closed_form(MODEL, TE, T2, T1, 5.0) == 0.0


def test_cso_continuous_at_kink():
    A, _ = cso_coefficients(MODEL, TE, T1, T2, 0.0)
    K0 = 100.0 - 101.0 - A  # B = 0
    eps = 1e-9
    lo = price_cso_closed_form(MODEL, TE, T1, T2, K0 - eps)
    hi = price_cso_closed_form(MODEL, TE, T1, T2, K0 + eps)
    assert abs(lo - hi) <= 1e-10 + 2 * eps


def test_same_contract_zero_strike_is_zero():
    assert price_cso_closed_form(MODEL, TE, T1, T1, 0.0) == 0.0
    assert price_cso_closed_form(MODEL, TE, T1, T1, -2.0) == 2.0


def test_cso_errors():
    with pytest.raises(ValueError):
        price_cso_closed_form(MODEL, T2, T1, T2, 0.0)


@given(K=st.floats(-6, 6))
def test_cso_non_negative(K):
    assert price_cso_closed_form(MODEL, TE, T1, T2, K) >= 0.0
    assert price_cso_closed_form(MODEL, TE, T2, T1, K) >= 0.0


# -- quotation metric ------------------------------------------------------------------


def metric_by_quadrature(F1, F2, T, K, s1, s2):
    st_ = math.sqrt(T)

    def spread(x):
        return (F1 * np.exp(-0.5 * s1 * s1 * T - s1 * st_ * x)
                - F2 * np.exp(-0.5 * s2 * s2 * T - s2 * st_ * x) - K)

    x = np.linspace(-40, 40, 16001)
    # locate the payoff kinks independently: scan, then refine
    idx = np.flatnonzero(np.diff(np.sign(spread(x))) != 0)
    kinks = [brentq(spread, x[i], x[i + 1], xtol=1e-14) for i in idx]
    f = lambda x: max(float(spread(x)), 0.0) * norm.pdf(x)
    return quad(f, -40, 40, limit=800, epsabs=1e-13, epsrel=1e-13, points=[0.0, *kinks])[0]


@given(F2=st.floats(80, 120), K=st.floats(-5, 5), s1=st.floats(0.05, 0.6), s2=st.floats(0.05, 0.6),
       T=st.floats(0.05, 2.0))
def test_metric_matches_quadrature(F2, K, s1, s2, T):
    got = cso_metric_price(100.0, F2, T, K, s1, s2)
    assert got == pytest.approx(metric_by_quadrature(100.0, F2, T, K, s1, s2), abs=1e-7)


def test_metric_inversion_returns_lesser_root():
    price = metric_by_quadrature(100.0, 101.0, 1.0, -1.0, 0.25, 0.22)
    res = cso_quote_metric(100.0, 101.0, 1.0, -1.0, 0.25, price)
    assert res.sigma == pytest.approx(0.22, abs=1e-6)
    assert len(res.roots) == 2 and res.roots[0] == res.sigma
    # pricing at the greater root gives the same price but the lesser one is returned
    price_hi = cso_metric_price(100.0, 101.0, 1.0, -1.0, 0.25, res.roots[1])
    assert price_hi == pytest.approx(price, abs=1e-8)


def test_identical_legs_cancel():
    assert cso_metric_price(100.0, 100.0, 1.0, 0.0, 0.3, 0.3) == 0.0


def test_tiny_vol_branch():
    price = cso_metric_price(100.0, 98.0, 1.0, 1.0, 1e-4, 1e-4)
    assert price == pytest.approx(1.0, abs=1e-6)


def test_unattainable_price():
    with pytest.raises(ValueError, match="attainable"):
        cso_quote_metric(100.0, 101.0, 1.0, -1.0, 0.25, 1e-6)
    res = cso_quote_metric(100.0, 101.0, 1.0, -1.0, 0.25, 1e-6, clamp=True)
    assert res.clamped and res.sigma > 0
    with pytest.raises(ValueError):
        cso_quote_metric(100.0, 101.0, 1.0, -1.0, 0.25, -1.0)


def test_quote_invariants():
    with pytest.raises(ValueError, match="price or"):
        CsoQuote(0.5, 1.0, 2.0, 0.0)
    with pytest.raises(ValueError):
        CsoQuote(1.0, 0.5, 2.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        CsoQuote(0.5, 1.0, 2.0, 0.0, -1.0)


# -- mean-reversion fit ---------------------------------------------------------------------

FIT_CONFIG = CalibrationConfig(tol_bp=0.05, n_k=600)


def test_fit_recovers_generating_reversion(small_market):
    cso = [q for q, _, _ in synthetic_cso_quotes(small_market, n_pairs=3)]
    m = small_market
    rep = fit_mean_reversion(cso, m.quotes, m.curve, m.discount, FIT_CONFIG, a_grid=(0.0, 0.5, 1.0),
                             refine=False)
    assert rep.a == 0.5
    assert rep.objective < 1e-6
    assert set(rep.drops) == {0.0, 0.5, 1.0}
    for i in range(len(cso)):
        assert rep.drops[0.0][i] <= rep.drops[0.5][i] <= rep.drops[1.0][i]


def test_zero_drops_fit_no_reversion():
    # flat vanilla term structure: the model drop is smallest without reversion
    flat = synthetic_market(0.0, eta_fn=lambda t, k: np.full(np.shape(k), 0.25),
                            expiry_days=(60, 120, 180), n_k=600)
    quotes = [replace(q, price=None, drop=0.0) for q, _, _ in synthetic_cso_quotes(flat, n_pairs=2)]
    rep = fit_mean_reversion(quotes, flat.quotes, flat.curve, None, FIT_CONFIG,
                             a_grid=(0.0, 0.25, 0.5), refine=False)
    assert rep.market_drops == [0.0] * len(quotes)
    assert rep.a == 0.0


def test_single_quote_fit_refines_below_grid_step(small_market):
    q = synthetic_cso_quotes(small_market, n_pairs=1, offsets=(0.0,))[0][0]
    m = small_market
    rep = fit_mean_reversion([q], m.quotes, m.curve, m.discount, FIT_CONFIG, a_grid=(0.25, 0.5, 0.75))
    assert rep.a == pytest.approx(0.5, abs=0.02)
    assert rep.objective < 1e-8


def test_fit_needs_quotes(small_market):
    with pytest.raises(ValueError):
        fit_mean_reversion([], small_market.quotes, small_market.curve)


def test_model_drop_uses_closed_form(small_market):
    q = synthetic_cso_quotes(small_market, n_pairs=1, offsets=(0.0,))[0][0]
    d = volatility_drop(small_market.model, q)
    assert d == pytest.approx(volatility_drop(small_market.model, q, q.price), abs=1e-12)
