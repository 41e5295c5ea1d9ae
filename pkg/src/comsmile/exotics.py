"""Mid-curve and calendar-spread options, the CSO volatility-drop metric and the
mean-reversion fit to CSO quotes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import ndtr

from .calibration import CalibrationConfig, calibrate
from .market_data import DiscountCurve, FuturesCurve, VolQuoteSet
from .meanrev import MeanReversion
from .pricing import implied_futures_vol, price_vanilla_equity_style, price_vanilla_future_style
from .spot_model import CalibratedSpotModel

log = logging.getLogger(__name__)

A_GRID = tuple(np.round(np.arange(0.0, 1.5 + 1e-9, 0.05), 10))


def price_mco(model: CalibratedSpotModel, T_e: float, T: float, K, style: str = "future",
              discount: Optional[DiscountCurve] = None, T_p: Optional[float] = None):
    """Mid-curve option: a vanilla on ``F(T)`` expiring early at ``T_e``."""
    if T_e > T + 1e-12:
        raise ValueError("mid-curve expiry after the futures last date")
    if style == "future":
        return price_vanilla_future_style(model, T_e, T, K)
    if style == "equity":
        if discount is None:
            raise ValueError("equity-style pricing needs a discount curve")
        return price_vanilla_equity_style(model, discount, T_e, T, K, T_p)
    raise ValueError(f"unknown margining style {style!r}")


def cso_coefficients(model: CalibratedSpotModel, T_e: float, T1: float, T2: float,
                     K: float) -> Tuple[float, float]:
    """``(A, B)`` with payoff ``(A (s_{T_e} - B))^+``."""
    F1, F2 = float(model.curve(T1)), float(model.curve(T2))
    A = (F1 * math.exp(-float(model.a.integral(T_e, T1)))
         - F2 * math.exp(-float(model.a.integral(T_e, T2))))
    if abs(A) < 1e-12 * F1:
        return 0.0, math.inf
    return A, 1.0 + (K - F1 + F2) / A


def price_cso_closed_form(model: CalibratedSpotModel, T_e: float, T1: float, T2: float,
                          K: float) -> float:
    """Future-style ``E[(F_{T_e}(T1) - F_{T_e}(T2) - K)^+]`` in the one-factor model.

    Both futures are affine in the normalized spot, so the spread payoff is
    ``(A (s - B))^+``: a call (``A > 0``) or put (``A < 0``) on ``s`` at
    strike ``B``.  A vanishing ``A`` leaves the deterministic spread
    ``(F_0(T1) - F_0(T2) - K)^+``.
    """
    if T_e > min(T1, T2) + 1e-12:
        raise ValueError("CSO expiry after a leg's last date")
    F1, F2 = float(model.curve(T1)), float(model.curve(T2))
    A, B = cso_coefficients(model, T_e, T1, T2, K)
    if A == 0.0:
        return max(F1 - F2 - K, 0.0)
    if B <= 0:
        return A * (1.0 - B) if A > 0 else 0.0
    c = float(model.normalized_call(T_e, B)) if T_e > 0 else max(1.0 - B, 0.0)
    # the put from parity can dip below zero by roundoff deep out of the money
    return max(A * c if A > 0 else -A * (c + B - 1.0), 0.0)


# ---------------------------------------------------------------------------
# quotation metric


def _metric_roots(p1, a1, p2, a2, K):
    """Sorted real roots of ``p1 e^{-a1 x} - p2 e^{-a2 x} - K`` (at most two)."""

    def g(x):
        return p1 * math.exp(-a1 * x) - p2 * math.exp(-a2 * x) - K

    lim = 60.0
    pts = [-lim, lim]
    if a1 != a2 and p1 > 0 and p2 > 0 and a1 > 0 and a2 > 0:
        ratio = (a1 * p1) / (a2 * p2)
        x_star = math.log(ratio) / (a1 - a2)
        if -lim < x_star < lim:
            pts.insert(1, x_star)
    roots = []
    for lo, hi in zip(pts, pts[1:]):
        glo, ghi = g(lo), g(hi)
        if glo == 0.0:
            roots.append(lo)
        elif glo * ghi < 0:
            roots.append(brentq(g, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=200))
    return sorted(set(roots)), g


def cso_metric_price(F01: float, F02: float, T_e: float, K: float, sigma1: float,
                     sigma2: float) -> float:
    """Spread price with perfectly correlated lognormal legs.

    ``E[(F01 e^{-s1^2 T/2 - s1 sqrt(T) x} - F02 e^{-s2^2 T/2 - s2 sqrt(T) x} - K)^+]``
    with ``x`` standard normal.  The payoff kinks are located by root
    finding and each smooth piece is integrated in closed form.
    """
    st = math.sqrt(T_e)
    a1, a2 = sigma1 * st, sigma2 * st
    p1, p2 = F01 * math.exp(-0.5 * a1 * a1), F02 * math.exp(-0.5 * a2 * a2)
    roots, g = _metric_roots(p1, a1, p2, a2, K)
    edges = [-math.inf] + roots + [math.inf]
    total = 0.0
    for lo, hi in zip(edges, edges[1:]):
        mid = (0.0 if math.isinf(lo) and math.isinf(hi) else
               hi - 1.0 if math.isinf(lo) else lo + 1.0 if math.isinf(hi) else 0.5 * (lo + hi))
        if g(mid) <= 0:
            continue
        # int_lo^hi F e^{-a^2/2 - a x} phi(x) dx = F (Phi(hi + a) - Phi(lo + a))
        total += (F01 * (ndtr(hi + a1) - ndtr(lo + a1))
                  - F02 * (ndtr(hi + a2) - ndtr(lo + a2))
                  - K * (ndtr(hi) - ndtr(lo)))
    return max(float(total), 0.0)


@dataclass(frozen=True)
class MetricResult:
    sigma: float
    roots: Tuple[float, ...]
    clamped: bool = False


def cso_quote_metric(F01: float, F02: float, T_e: float, K: float, sigma11: float, price: float,
                     sigma_max: float = 3.0, n_scan: int = 600, tol: float = 1e-12,
                     clamp: bool = False) -> MetricResult:
    """Far-leg vol ``sigma^2_1`` at the CSO expiry that reproduces ``price``.

    Scans ``(0, sigma_max]`` for sign changes, refines each bracket and
    returns the lesser root; all roots are kept for diagnostics.  With
    ``clamp`` an unattainable price maps to the vol closest to attaining it.

    Raises
    ------
    ValueError
        If no positive vol reproduces the price.
    """
    if not price >= 0:
        raise ValueError("CSO price must be non-negative")

    def h(s):
        return cso_metric_price(F01, F02, T_e, K, sigma11, s) - price

    grid = np.concatenate([np.geomspace(1e-8, 1e-2, 60, endpoint=False),
                           np.linspace(1e-2, sigma_max, n_scan)])
    vals = np.array([h(s) for s in grid])
    roots = []
    if abs(vals[0]) <= tol * max(1.0, abs(price)):
        roots.append(float(grid[0]))
    for i in range(grid.size - 1):
        if vals[i] == 0.0 and i > 0:
            roots.append(float(grid[i]))
        elif vals[i] * vals[i + 1] < 0:
            roots.append(brentq(h, grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15, maxiter=200))
    if not roots:
        if not clamp:
            raise ValueError(f"CSO price {price!r} not attainable for sigma in (0, {sigma_max}]")
        i = int(np.argmin(np.abs(vals)))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = minimize_scalar(lambda s: abs(h(s)), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        return MetricResult(float(res.x), (), True)
    return MetricResult(min(roots), tuple(roots))


# ---------------------------------------------------------------------------
# mean-reversion fit


@dataclass(frozen=True)
class CsoQuote:
    """A CSO quoted by its price or directly by its implied volatility drop."""

    expiry: float
    t1: float
    t2: float
    strike: float
    price: Optional[float] = None
    near_vol: Optional[float] = None
    far_vol: Optional[float] = None
    far_expiry: Optional[float] = None
    label: str = ""
    drop: Optional[float] = None

    def __post_init__(self):
        if not (self.expiry <= self.t1 + 1e-12 and self.t1 <= self.t2 + 1e-12):
            raise ValueError("CSO quote needs expiry <= T1 <= T2")
        if self.price is None and self.drop is None:
            raise ValueError("CSO quote needs a price or a volatility drop")
        if self.price is not None and not self.price >= 0:
            raise ValueError("CSO price must be non-negative")


def _far_expiry(q: CsoQuote) -> float:
    if q.far_expiry is not None:
        return q.far_expiry
    return min(q.expiry + (q.t2 - q.t1), q.t2)


def model_cso_vols(model: CalibratedSpotModel, q: CsoQuote) -> Tuple[float, float]:
    """ATM model vols ``(sigma^1_1, sigma^2_2)`` of the near leg at the CSO expiry
    and the far leg at its own expiry."""
    F1, F2 = float(model.curve(q.t1)), float(model.curve(q.t2))
    t_far = _far_expiry(q)
    s11 = float(implied_futures_vol(price_vanilla_future_style(model, q.expiry, q.t1, F1),
                                    F1, q.expiry, F1))
    s22 = float(implied_futures_vol(price_vanilla_future_style(model, t_far, q.t2, F2),
                                    F2, t_far, F2))
    return s11, s22


def with_vanilla_vols(model: CalibratedSpotModel, q: CsoQuote) -> CsoQuote:
    """Fill missing leg vols from the model's ATM vanillas."""
    if q.near_vol is not None and q.far_vol is not None:
        return q
    s11, s22 = model_cso_vols(model, q)
    return replace(q, near_vol=s11 if q.near_vol is None else q.near_vol,
                   far_vol=s22 if q.far_vol is None else q.far_vol)


def volatility_drop(model: CalibratedSpotModel, q: CsoQuote, price: Optional[float] = None,
                    clamp: bool = False) -> float:
    """``sigma^2_2 - sigma^2_1`` for the model CSO price (or ``price`` if given)."""
    q = with_vanilla_vols(model, q)
    if price is None:
        price = price_cso_closed_form(model, q.expiry, q.t1, q.t2, q.strike)
    F1, F2 = float(model.curve(q.t1)), float(model.curve(q.t2))
    s21 = cso_quote_metric(F1, F2, q.expiry, q.strike, q.near_vol, price, clamp=clamp).sigma
    return q.far_vol - s21


@dataclass
class FitReport:
    a: float
    objective: float
    trials: Dict[float, float]
    drops: Dict[float, List[float]]
    market_drops: List[float]
    skipped: Dict[float, str] = field(default_factory=dict)


def _restrict(quotes: VolQuoteSet, horizon: float) -> VolQuoteSet:
    # pillars after the last leg expiry cannot influence the CSOs
    times = sorted({q.expiry for q in quotes})
    cut = next((t for t in times if t >= horizon - 1e-12), times[-1])
    return VolQuoteSet(tuple(q for q in quotes if q.expiry <= cut + 1e-12))


def fit_mean_reversion(cso_quotes: Sequence[CsoQuote], quotes: VolQuoteSet, curve: FuturesCurve,
                       discount: Optional[DiscountCurve] = None,
                       config: CalibrationConfig = CalibrationConfig(tol_bp=0.05),
                       a_grid: Sequence[float] = A_GRID, refine: bool = True) -> FitReport:
    """Scalar ``a`` minimizing the squared error between market and model volatility drops.

    Each trial recalibrates the local vol to ``quotes`` (warm-started from the
    previous trial), prices the CSOs in closed form and maps the prices
    through :func:`cso_quote_metric`.  Leg vols missing from the quotes are
    read once from the first calibrated trial; the vanilla fit makes them
    independent of ``a``.  Model prices below the metric's attainable floor
    are clamped to the closest attainable vol.  The best grid point is
    refined by a bounded scalar search between its neighbours.
    """
    if not cso_quotes:
        raise ValueError("need at least one CSO quote")
    horizon = max(max(q.expiry, _far_expiry(q)) for q in cso_quotes)
    vanilla = _restrict(quotes, horizon)
    cache: Dict[float, Tuple[float, List[float]]] = {}
    skipped: Dict[float, str] = {}
    state = {"eta": None, "quotes": None}
    market: List[float] = []

    def evaluate(a: float) -> float:
        a = float(a)
        if a in cache:
            return cache[a][0]
        try:
            model, _ = calibrate(vanilla, curve, discount, MeanReversion.constant(a), config,
                                 initial=state["eta"])
            state["eta"] = model.eta
            if state["quotes"] is None:
                filled = [with_vanilla_vols(model, q) for q in cso_quotes]
                market.extend(q.drop if q.drop is not None else volatility_drop(model, q, q.price)
                              for q in filled)
                state["quotes"] = filled
            drops = [volatility_drop(model, q, clamp=True) for q in state["quotes"]]
        except Exception as exc:  # a failed trial is skipped and reported
            skipped[a] = str(exc)
            log.warning("trial a=%s skipped: %s", a, exc)
            return math.inf
        obj = float(sum((d - m) ** 2 for d, m in zip(drops, market)))
        cache[a] = (obj, drops)
        return obj

    grid_obj = [evaluate(a) for a in a_grid]
    if all(math.isinf(v) for v in grid_obj):
        raise RuntimeError("no trial mean reversion could be calibrated")
    i = int(np.argmin(grid_obj))
    best_a, best_obj = float(a_grid[i]), grid_obj[i]
    if refine and len(a_grid) > 1:
        lo = float(a_grid[max(i - 1, 0)])
        hi = float(a_grid[min(i + 1, len(a_grid) - 1)])
        if hi > lo:
            res = minimize_scalar(evaluate, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-3})
            if res.fun < best_obj:
                best_a, best_obj = float(res.x), float(res.fun)
    trials = {a: v[0] for a, v in sorted(cache.items())}
    drops = {a: v[1] for a, v in sorted(cache.items())}
    return FitReport(best_a, best_obj, trials, drops, market, skipped)
