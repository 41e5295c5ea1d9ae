"""Vanilla futures options under future-style and equity-style margining."""

from __future__ import annotations

import datetime as dt
from typing import Iterable, Optional, Tuple, Union

import numpy as np

from .black import implied_vol
from .market_data import DiscountCurve, year_fraction
from .spot_model import CalibratedSpotModel, effective_strike

FloatOrDate = Union[float, dt.date]


def _check(model: CalibratedSpotModel, t: float, T: float) -> float:
    if t > T + 1e-12:
        raise ValueError(f"option expiry {t} after futures last date {T}")
    if t > model.horizon + 1e-10:
        raise ValueError(f"expiry {t} beyond calibrated horizon {model.horizon}")
    return float(model.curve(T))


def price_vanilla_future_style(model: CalibratedSpotModel, t: float, T: float, K):
    """Call on ``F(T)`` expiring at ``t``, premium paid at expiry:
    ``F_0(T) e^{-A(t,T)} c(t, k_F)``.

    Futures never fall below the absorbing level, so strikes at or under it
    (``k_F <= 0``) price at the forward intrinsic ``F_0(T) - K``.
    """
    F0 = _check(model, t, T)
    K = np.asarray(K, float)
    k_f = np.asarray(effective_strike(model.a, t, T, K, F0), float)
    decay = float(np.exp(-model.a.integral(t, T)))
    c = 1.0 - k_f
    inside = k_f > 0
    if t > 0:
        if np.any(inside):
            c = np.where(inside, model.normalized_call(t, np.where(inside, k_f, 1.0)), c)
    else:
        c = np.maximum(c, 0.0)
    return (F0 * decay * c)[()]


def price_vanilla_equity_style(model: CalibratedSpotModel, discount: DiscountCurve, t: float,
                               T: float, K, T_p: Optional[float] = None):
    """Premium paid upfront under collateral: the future-style price times ``P_0(T_p)``.

    ``T_p`` defaults to the expiry ``t``.
    """
    T_p = t if T_p is None else T_p
    if T_p < t - 1e-12:
        raise ValueError("payment date before option expiry")
    return (price_vanilla_future_style(model, t, T, K) * float(discount(T_p)))[()]


def implied_futures_vol(price, F0: float, t: float, K, df: float = 1.0):
    """Black vol of a futures call from its price (``df`` deflates equity-style premiums)."""
    return implied_vol(np.asarray(price, float) / (df * F0), t, np.asarray(K, float) / F0)


def cashflow_pv(discount: DiscountCurve, coupons: Iterable[Tuple[FloatOrDate, float]],
                valuation_date: Optional[dt.date] = None) -> float:
    """``sum phi_i P_0(T_i)`` for a deterministic coupon stream.

    Coupon times are year fractions or dates (dates need ``valuation_date``).
    """
    total = 0.0
    for when, amount in coupons:
        if isinstance(when, dt.date):
            if valuation_date is None:
                raise ValueError("dated coupons need a valuation date")
            if when < valuation_date:
                raise ValueError(f"coupon date {when} before valuation {valuation_date}")
            T = year_fraction(valuation_date, when)
        else:
            T = float(when)
            if T < 0:
                raise ValueError(f"coupon time {T} before valuation")
        total += float(amount) * float(discount(T))
    return total
