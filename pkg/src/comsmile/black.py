"""Forward-normalized Black analytics.

Prices are normalized by the forward, so a call with normalized strike ``k``
and expiry ``t`` is worth ``Phi(y + sigma*sqrt(t)) - k*Phi(y)`` with
``y = -log(k)/(sigma*sqrt(t)) - sigma*sqrt(t)/2``.  Everything here works on
numpy arrays and broadcasts over its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

SQRT_2PI = np.sqrt(2.0 * np.pi)


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / SQRT_2PI


def _d(t, k, sigma):
    """Return ``(y, y + sigma*sqrt(t), sigma*sqrt(t))`` for valid inputs."""
    st = sigma * np.sqrt(t)
    y = -np.log(k) / st - 0.5 * st
    return y, y + st, st


def black_call(t, k, sigma):
    """Normalized Black call price ``E[(X - k)^+]`` for a unit-mean lognormal ``X``.

    Boundary inputs take their limits: ``k = 0`` gives 1, and ``t = 0`` or
    ``sigma = 0`` give the intrinsic value ``(1 - k)^+``.
    """
    t, k, sigma = np.broadcast_arrays(
        np.asarray(t, float), np.asarray(k, float), np.asarray(sigma, float)
    )
    intrinsic = np.maximum(1.0 - k, 0.0)
    live = (t > 0) & (sigma > 0) & (k > 0)
    ts = np.where(live, t, 1.0)
    ks = np.where(live, k, 1.0)
    ss = np.where(live, sigma, 1.0)
    y, y1, _ = _d(ts, ks, ss)
    price = ndtr(y1) - ks * ndtr(y)
    out = np.where(live, price, intrinsic)
    out = np.where(k <= 0, 1.0 - np.minimum(k, 0.0), out)
    return out[()] if out.ndim == 0 else out


def black_vega(t, k, sigma):
    _, y1, _ = _d(t, k, sigma)
    return np.sqrt(t) * norm_pdf(y1)


def black_greeks(t, k, sigma) -> dict:
    """Closed-form sensitivities of :func:`black_call`.

    ``dual_*`` Greeks are strike derivatives.  Requires ``t, k, sigma > 0``.
    """
    t = np.asarray(t, float)
    k = np.asarray(k, float)
    sigma = np.asarray(sigma, float)
    if np.any(t <= 0) or np.any(k <= 0) or np.any(sigma <= 0):
        raise ValueError("black_greeks needs t > 0, k > 0 and sigma > 0")
    y, y1, st = _d(t, k, sigma)
    vega = np.sqrt(t) * norm_pdf(y1)
    return {
        "vega": vega,
        "theta": sigma / (2.0 * t) * vega,
        "dual_delta": -ndtr(y),
        "dual_gamma": vega / (k * k * sigma * t),
        "dual_vanna": vega * y1 / (k * st),
        "volga": vega * y * y1 / sigma,
    }


def vega_ratio(t, k, sigma):
    """``(Phi(y + sigma*sqrt(t)) - Phi(y)) / vega``; tends to sigma(0, k) as t -> 0."""
    y, y1, _ = _d(t, k, sigma)
    # Phi(b) - Phi(a) loses digits when both sit deep in one tail; use the
    # survival form on the positive side.
    diff = np.where(y > 0, ndtr(-y) - ndtr(-y1), ndtr(y1) - ndtr(y))
    return diff / (np.sqrt(t) * norm_pdf(y1))


def _initial_guess(price, k, t):
    # Corrado-Miller rational approximation on the forward-normalized price.
    half = price - 0.5 * (1.0 - k)
    disc = np.maximum(half * half - (1.0 - k) ** 2 / np.pi, 0.0)
    total = SQRT_2PI / (1.0 + k) * (half + np.sqrt(disc))
    guess = total / np.sqrt(t)
    return np.where(np.isfinite(guess) & (guess > 1e-3), guess, 0.2)


def implied_vol(price, t, k, tol: float = 1e-13, max_iter: int = 200):
    """Invert :func:`black_call` for sigma.

    Safeguarded Newton iteration with vega; whenever a Newton step leaves the
    current bracket the step falls back to bisection.

    Raises
    ------
    ValueError
        If any price lies outside the open no-arbitrage band ``((1-k)^+, 1)``.
    """
    price, t, k = np.broadcast_arrays(
        np.asarray(price, float), np.asarray(t, float), np.asarray(k, float)
    )
    scalar = price.ndim == 0
    price, t, k = (np.atleast_1d(x).astype(float).copy() for x in (price, t, k))
    if np.any(t <= 0) or np.any(k <= 0):
        raise ValueError("implied_vol needs t > 0 and k > 0")
    lower = np.maximum(1.0 - k, 0.0)
    bad = ~((price > lower) & (price < 1.0))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"price {price[i]!r} outside no-arbitrage band ({lower[i]!r}, 1) at k={k[i]!r}"
        )

    lo = np.zeros_like(price)
    hi = np.ones_like(price)
    # Grow the upper bracket until it prices above target.
    for _ in range(60):
        short = black_call(t, k, hi) < price
        if not short.any():
            break
        hi = np.where(short, hi * 2.0, hi)

    sigma = np.clip(_initial_guess(price, k, t), lo + 1e-12, hi)
    for _ in range(max_iter):
        c = black_call(t, k, sigma)
        diff = c - price
        lo = np.where(diff < 0, sigma, lo)
        hi = np.where(diff > 0, sigma, hi)
        done = (np.abs(diff) <= tol) | (hi - lo <= 1e-15 * np.maximum(hi, 1.0))
        if done.all():
            break
        vega = black_vega(t, k, sigma)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = sigma - diff / vega
        bisect = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        sigma = np.where(done, sigma, np.where(bisect, 0.5 * (lo + hi), step))
    return sigma[0] if scalar else sigma


# ---------------------------------------------------------------------------
# local volatility from an implied surface


@dataclass(frozen=True)
class ImpliedSurface:
    """Implied-vol surface ``sigma(t, k)`` plus the derivatives the
    local-vol map needs.

    Derivatives default to central finite differences with a relative step;
    pass analytic callables when the source has them.
    """

    vol: Callable
    dvol_dt_fn: Optional[Callable] = None
    dvol_dk_fn: Optional[Callable] = None
    d2vol_dk2_fn: Optional[Callable] = None
    rel_step: float = 1e-4

    def __call__(self, t, k):
        return self.vol(t, k)

    def dvol_dt(self, t, k):
        if self.dvol_dt_fn is not None:
            return self.dvol_dt_fn(t, k)
        h = self.rel_step * np.asarray(t, float)
        return (self.vol(t + h, k) - self.vol(t - h, k)) / (2.0 * h)

    def dvol_dk(self, t, k):
        if self.dvol_dk_fn is not None:
            return self.dvol_dk_fn(t, k)
        h = self.rel_step * np.asarray(k, float)
        return (self.vol(t, k + h) - self.vol(t, k - h)) / (2.0 * h)

    def d2vol_dk2(self, t, k):
        if self.d2vol_dk2_fn is not None:
            return self.d2vol_dk2_fn(t, k)
        h = self.rel_step * np.asarray(k, float)
        return (self.vol(t, k + h) - 2.0 * self.vol(t, k) + self.vol(t, k - h)) / (h * h)


def _rate_at(a, t):
    if a is None:
        return 0.0
    if callable(a):
        return a(t)
    return float(a)


def local_vol_from_implied(surface: ImpliedSurface, a, t, k):
    """Local volatility of the mean-reverting normalized spot implied by ``surface``.

    ``a`` is the mean-reversion speed: a float, a callable of time, or
    ``None`` for zero.

    Raises
    ------
    ValueError
        If the butterfly denominator is not positive (arbitrage in the inputs).
    """
    t = np.asarray(t, float)
    k = np.asarray(k, float)
    s = np.asarray(surface(t, k), float)
    s_t = surface.dvol_dt(t, k)
    s_k = surface.dvol_dk(t, k)
    s_kk = surface.d2vol_dk2(t, k)
    rate = _rate_at(a, t)
    y, y1, _ = _d(t, k, s)
    sqt = np.sqrt(t)
    lam = vega_ratio(t, k, s)
    num = s * s + 2.0 * s * t * s_t + 2.0 * rate * s * t * (lam + (1.0 - k) * s_k)
    den = 1.0 + 2.0 * k * sqt * y1 * s_k + k * k * s * t * s_kk + k * k * t * y * y1 * s_k * s_k
    if np.any(den <= 0):
        raise ValueError("non-positive density in implied surface (butterfly arbitrage)")
    ratio = num / den
    if np.any(ratio < 0):
        raise ValueError("negative local variance (calendar arbitrage in implied surface)")
    return np.sqrt(ratio)


def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10,
                     max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature of a scalar function on ``[a, b]``."""

    def simpson(fa, fm, fb, lo, hi):
        return (hi - lo) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(lo, hi, fa, fm, fb, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, lo, mid)
        right = simpson(fm, frm, fb, mid, hi)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        return (recurse(lo, mid, fa, flm, fm, left, eps / 2.0, depth - 1)
                + recurse(mid, hi, fm, frm, fb, right, eps / 2.0, depth - 1))

    if a == b:
        return 0.0
    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def short_time_implied(eta0: Callable[[float], float], k: float, tol: float = 1e-10) -> float:
    """Zero-expiry implied vol as the harmonic mean of ``eta0`` between 1 and ``k``.

    ``eta0`` is the strike section of the local vol at ``t = 0``.
    """
    if k <= 0:
        raise ValueError("strike must be positive")

    def integrand(x):
        e = eta0(x)
        if not e > 0:
            raise ValueError(f"non-positive local vol {e!r} at x={x!r}")
        return 1.0 / (x * e)

    if abs(np.log(k)) < 1e-12:
        e = eta0(1.0)
        if not e > 0:
            raise ValueError(f"non-positive local vol {e!r} at x=1")
        return float(e)
    return float(np.log(k) / adaptive_simpson(integrand, 1.0, float(k), tol))
