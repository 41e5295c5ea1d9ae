"""Synthetic markets generated from a known local-vol surface.

Quotes are produced by solving the forward PDE for a chosen ``eta*`` and mean
reversion, so a calibration run on them has an exact answer to recover.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .black import implied_vol
from .exotics import CsoQuote, price_cso_closed_form
from .localvol import LocalVolSurface
from .market_data import (FUTURE_STYLE, ContractCalendar, DiscountCurve, FuturesCurve, VolQuote,
                          VolQuoteSet, write_market)
from .meanrev import as_mean_reversion
from .pde import PdeGrid, solve_dupire
from .spot_model import CalibratedSpotModel, effective_strike

VALUATION = dt.date(2024, 1, 2)
EXPIRY_DAYS = (30, 61, 91, 122, 152, 182, 273, 365, 456, 547)
MONEYNESS_Z = (-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5)
LAST_LAG_DAYS = 5


def reference_eta(t, k):
    """Skewed, smiling local vol with a mild term structure."""
    x = np.log(np.maximum(np.asarray(k, float), 1e-12))
    level = 0.28 + 0.06 * np.exp(-2.0 * np.asarray(t, float))
    return level * (1.0 - 0.35 * x + 0.6 * x * x)


def reference_curve_price(T):
    T = np.asarray(T, float)
    return 80.0 * np.exp(0.03 * T) * (1.0 + 0.02 * np.sin(2.0 * np.pi * T))


@dataclass(frozen=True)
class SyntheticMarket:
    curve: FuturesCurve
    discount: DiscountCurve
    quotes: VolQuoteSet
    calendars: Dict[str, ContractCalendar]
    eta: LocalVolSurface
    model: CalibratedSpotModel


def _calendar(cid: str, expiry: dt.date) -> ContractCalendar:
    notice = expiry + dt.timedelta(days=LAST_LAG_DAYS)
    return ContractCalendar(
        id=cid,
        first_trade=VALUATION - dt.timedelta(days=365),
        last_trade=notice + dt.timedelta(days=2),
        first_notice=notice,
        last_notice=notice + dt.timedelta(days=1),
        first_delivery=notice + dt.timedelta(days=10),
        last_delivery=notice + dt.timedelta(days=40),
        option_expiry=expiry,
    )


def synthetic_market(a=0.5, eta_fn: Callable = reference_eta,
                     expiry_days: Sequence[int] = EXPIRY_DAYS,
                     moneyness_z: Sequence[float] = MONEYNESS_Z,
                     time_interp: str = "flat", n_k: int = 2000,
                     style: str = FUTURE_STYLE, discount: Optional[DiscountCurve] = None,
                     price_fn: Callable = reference_curve_price) -> SyntheticMarket:
    """Quotes at strikes ``F0 exp(z sigma_atm sqrt(t))`` priced off ``eta_fn``.

    The true surface has nodes at the quotes' effective strikes, so it lies in
    the calibration's parameter space.
    """
    a = as_mean_reversion(a)
    calendars = {}
    rows = []
    for i, days in enumerate(expiry_days):
        expiry = VALUATION + dt.timedelta(days=int(days))
        cid = f"C{i + 1:02d}"
        calendars[cid] = _calendar(cid, expiry)
        t = days / 365.0
        t_last = (days + LAST_LAG_DAYS) / 365.0
        rows.append((cid, t, t_last))
    t_lasts = np.array([r[2] for r in rows])
    curve = FuturesCurve(t_lasts, price_fn(t_lasts), VALUATION)
    if discount is None:
        discount = DiscountCurve(np.array([t_lasts[-1] + 1.0]),
                                 np.array([math.exp(-0.03 * (t_lasts[-1] + 1.0))]))

    times, strikes, nodes, specs = [], [], [], []
    for cid, t, t_last in rows:
        F0 = float(curve(t_last))
        atm = float(eta_fn(t, 1.0))
        K = F0 * np.exp(np.asarray(moneyness_z) * atm * math.sqrt(t))
        k = np.asarray(effective_strike(a, t, t_last, K, F0), float)
        times.append(t)
        strikes.append(k)
        nodes.append(np.asarray(eta_fn(t, k), float))
        specs.append((cid, t, t_last, F0, K, k))
    eta = LocalVolSurface(tuple(times), tuple(strikes), tuple(nodes), time_interp)
    sig_max = max(float(np.max(v)) for v in nodes)
    grid = PdeGrid.build(times, sigma_max=max(sig_max, 0.2), n_k=n_k,
                         max_strike=max(float(np.max(k)) for k in strikes))
    surface = solve_dupire(eta, a, grid)

    quotes = []
    for cid, t, t_last, F0, K, k in specs:
        c = np.asarray(surface.price(t, k)) * np.exp(-float(a.integral(t, t_last)))
        vols = np.atleast_1d(implied_vol(c, t, K / F0))
        for Kj, v in zip(K, vols):
            quotes.append(VolQuote(t, cid, t_last, float(Kj), float(v), style,
                                   t + 2.0 / 365.0))
    model = CalibratedSpotModel(curve, a, eta, grid)
    return SyntheticMarket(curve, discount, VolQuoteSet(tuple(quotes)), calendars, eta, model)


def synthetic_cso_quotes(market: SyntheticMarket, n_pairs: int = 6,
                         offsets: Sequence[float] = (-0.3, 0.0, 0.3)) -> List[Tuple[CsoQuote, str, str]]:
    """Consecutive-contract CSOs priced in closed form under the market's own model.

    Strikes sit at the forward spread plus ``offsets``.  Returns
    ``(quote, near_id, far_id)`` triples.
    """
    model = market.model
    legs = sorted({(q.expiry, q.t_last, q.contract) for q in market.quotes})
    out = []
    for (te, t1, c1), (te2, t2, c2) in list(zip(legs, legs[1:]))[:n_pairs]:
        spread = float(model.curve(t1)) - float(model.curve(t2))
        for off in offsets:
            K = spread + off
            price = price_cso_closed_form(model, te, t1, t2, K)
            out.append((CsoQuote(te, t1, t2, K, price, far_expiry=te2, label=f"{c1}/{c2}"), c1, c2))
    return out


def write_fixture(path, market: SyntheticMarket,
                  cso: Optional[Sequence[Tuple[CsoQuote, str, str]]] = None) -> Path:
    """Write the market directory, plus ``cso_quotes.csv`` when CSO quotes are given."""
    root = Path(path)
    write_market(root, market.curve, market.quotes, market.calendars, market.discount)
    if cso:
        with open(root / "cso_quotes.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("expiry,near,far,strike,price\n")
            for q, near, far in cso:
                fh.write(f"{float(q.expiry)!r},{near},{far},{float(q.strike)!r},{float(q.price)!r}\n")
    return root
