import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from comsmile.black import (ImpliedSurface, black_call, black_greeks, black_vega, implied_vol,
                            local_vol_from_implied, short_time_implied, vega_ratio)


def d1(f, x, h):
    """Five-point first derivative."""
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def d2(f, x, h):
    """Five-point second derivative."""
    return (-f(x + 2 * h) + 16 * f(x + h) - 30 * f(x) + 16 * f(x - h) - f(x - 2 * h)) / (12 * h * h)


def random_grid(n, seed=0):
    """Points with standardized moneyness inside +-2.5 so every Greek is well scaled."""
    r = np.random.default_rng(seed)
    t = r.uniform(0.05, 5.0, n)
    sigma = r.uniform(0.05, 0.8, n)
    z = r.uniform(-2.5, 2.5, n)
    k = np.exp(z * sigma * np.sqrt(t))
    return t, k, sigma


def fd_greeks(t, k, s):
    """Five-point differences of black_call.

    Strike bumps follow the natural strike scale k min(1, sigma sqrt(t)) so the
    truncation error stays uniform across the grid; second derivatives in
    sigma use a wider bump to balance rounding.
    """
    hk = 3e-3 * k * np.minimum(s * np.sqrt(t), 1.0)
    hs, ht = 1e-3 * s, 1e-3 * t
    return {
        "theta": d1(lambda x: black_call(x, k, s), t, ht),
        "vega": d1(lambda x: black_call(t, k, x), s, hs),
        "dual_delta": d1(lambda x: black_call(t, x, s), k, hk),
        "dual_gamma": d2(lambda x: black_call(t, x, s), k, hk),
        "volga": d2(lambda x: black_call(t, k, x), s, 2.5 * hs),
        "dual_vanna": d1(lambda x: d1(lambda y: black_call(t, y, x), k, hk), s, hs),
    }


def greek_scales(t, k, s, vega):
    """Natural magnitude of each Greek, used to floor relative errors at zero crossings."""
    v = np.abs(vega)
    return {"theta": v * s / (2 * t), "vega": v, "dual_delta": np.ones_like(v),
            "dual_gamma": v / (k * k * s * t), "volga": v / s, "dual_vanna": v / (k * s * np.sqrt(t))}


def greek_errors(t, k, s):
    """Worst relative error of each closed-form Greek against finite differences."""
    exact = black_greeks(t, k, s)
    scale = greek_scales(t, k, s, exact["vega"])
    return {name: float(np.max(np.abs(v - exact[name]) / np.maximum(np.abs(exact[name]), 1e-3 * scale[name])))
            for name, v in fd_greeks(t, k, s).items()}


def test_greeks_match_finite_differences():
    t, k, s = random_grid(200, seed=3)
    for name, err in greek_errors(t, k, s).items():
        assert err < 1e-5, name


def test_theta_and_gamma_identities_exact():
    t, k, s = random_grid(1000, seed=4)
    g = black_greeks(t, k, s)
    np.testing.assert_allclose(g["theta"], s / (2 * t) * g["vega"], rtol=1e-15)
    np.testing.assert_allclose(g["dual_gamma"] * k * k * s * t, g["vega"], rtol=1e-14)


def test_call_limits():
    assert black_call(1.0, 0.0, 0.2) == 1.0
    assert black_call(0.0, 0.8, 0.2) == pytest.approx(0.2)
    assert black_call(1.0, 1.3, 0.0) == 0.0
    # ATM closed form 2 Phi(sigma sqrt t / 2) - 1
    assert black_call(2.0, 1.0, 0.3) == pytest.approx(math.erf(0.3 * math.sqrt(2) / 2 / math.sqrt(2)),
                                                     rel=1e-14)


@given(t=st.floats(0.01, 10), z=st.floats(-3, 3), sigma=st.floats(0.02, 2.0))
def test_implied_vol_round_trip(t, z, sigma):
    k = math.exp(z * sigma * math.sqrt(t))
    price = float(black_call(t, k, sigma))
    if not (max(1 - k, 0) + 1e-14 < price < 1 - 1e-14):
        return
    assert implied_vol(price, t, k) == pytest.approx(sigma, rel=1e-7, abs=1e-9)


@given(t=st.floats(0.01, 5), k=st.floats(0.3, 3), s1=st.floats(0.05, 1), ds=st.floats(0.001, 0.5))
def test_call_increasing_in_vol(t, k, s1, ds):
    assert black_call(t, k, s1 + ds) >= black_call(t, k, s1)


def test_implied_vol_rejects_arbitrage():
    with pytest.raises(ValueError):
        implied_vol(0.19, 1.0, 0.8)
    with pytest.raises(ValueError):
        implied_vol(1.0, 1.0, 1.2)


def test_vectorized_implied_vol():
    t, k, s = random_grid(300, seed=5)
    np.testing.assert_allclose(implied_vol(black_call(t, k, s), t, k), s, rtol=1e-8)


def test_vega_ratio_short_time_limit():
    assert vega_ratio(1e-8, 1.0001, 0.3) == pytest.approx(0.3, rel=1e-3)


def test_flat_implied_gives_flat_local_vol():
    surf = ImpliedSurface(lambda t, k: np.full(np.shape(k), 0.25))
    k = np.linspace(0.7, 1.4, 9)
    np.testing.assert_allclose(local_vol_from_implied(surf, 0.0, 1.0, k), 0.25, rtol=1e-8)


def test_mean_reversion_term_for_flat_implied():
    # with flat sigma only the a-term survives: eta^2 = sigma^2 + 2 a sigma t Lambda
    s, t, a = 0.25, 0.5, 0.8
    surf = ImpliedSurface(lambda t, k: np.full(np.shape(k), s))
    k = np.array([0.9, 1.0, 1.1])
    expected = np.sqrt(s * s + 2 * a * s * t * vega_ratio(t, k, s))
    np.testing.assert_allclose(local_vol_from_implied(surf, a, t, k), expected, rtol=1e-8)


def test_local_vol_reports_butterfly_arbitrage():
    # strongly concave smile: the density denominator turns negative at the money
    surf = ImpliedSurface(lambda t, k: 0.3 - 5.0 * (np.asarray(k) - 1.0) ** 2)
    with pytest.raises(ValueError):
        local_vol_from_implied(surf, 0.0, 1.0, np.array([1.0]))


def eta_example(x):
    return 0.2 * (1 + 0.5 * math.log(x))


def test_short_time_harmonic_mean_oracle():
    # independent quadrature of ln k / int_1^k dx / (x eta(x))
    integral, _ = quad(lambda x: 1.0 / (x * eta_example(x)), 1.0, 1.2, epsabs=1e-14)
    oracle = math.log(1.2) / integral
    assert oracle == pytest.approx(0.2089835437, abs=1e-10)
    assert short_time_implied(eta_example, 1.2) == pytest.approx(oracle, abs=1e-10)


def test_short_time_flat_and_atm():
    assert short_time_implied(lambda x: 0.3, 1.5) == pytest.approx(0.3, rel=1e-12)
    assert short_time_implied(eta_example, 1.0) == pytest.approx(0.2)


@given(k=st.floats(0.5, 2.0))
def test_harmonic_mean_between_endpoint_vols(k):
    v = short_time_implied(eta_example, k)
    lo, hi = sorted((eta_example(1.0), eta_example(k)))
    assert lo - 1e-12 <= v <= hi + 1e-12


def test_vega_function_matches_greeks():
    t, k, s = random_grid(50, seed=6)
    np.testing.assert_allclose(black_vega(t, k, s), black_greeks(t, k, s)["vega"], rtol=1e-15)
