"""Forward PDE for normalized call prices of the mean-reverting spot.

Solves

    dc/dt = -a(t) c - a(t) (1 - k) dc/dk + 1/2 k^2 eta(t, k)^2 d2c/dk2

on ``[0, k_max]`` with ``c(t, 0) = 1``, ``c(t, k_max) = 0`` and
``c(0, k) = (1 - k)^+``.  One sweep in time yields call prices for every
maturity on the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline
from scipy.linalg import lapack

from .localvol import LocalVolSurface
from .meanrev import MeanReversion, as_mean_reversion

DT_MAX = 1.0 / 365.0


class PdeError(RuntimeError):
    """Discretization failure: bad inputs, solver breakdown or a non-convex solution."""


def _time_grid(pillars: Iterable[float], dt_max: float, grading: float = 0.01,
               t_first: float = 1e-5) -> np.ndarray:
    """Time nodes from 0 through every pillar.

    Steps grow geometrically from ``t_first`` (``dt = grading * t``) until they
    reach ``dt_max``; pillars are inserted as exact nodes.
    """
    pts = sorted({float(p) for p in pillars if p > 0})
    horizon = pts[-1]
    base = [0.0]
    if grading > 0:
        base.append(min(t_first, horizon))
    while base[-1] < horizon:
        step = dt_max if grading <= 0 else min(dt_max, grading * base[-1])
        base.append(base[-1] + step)
    base = np.array(base)
    keep = np.ones(base.size, bool)
    for p in pts:
        i = int(np.searchsorted(base, p))
        # drop base nodes too close to the pillar; the merged step stays <= dt_max
        for j in (i - 1, i):
            if 0 < j < base.size and abs(base[j] - p) < 0.5 * (base[min(j + 1, base.size - 1)] - base[j - 1]) * 0.5:
                keep[j] = False
    out = np.union1d(base[keep & (base <= horizon)], [0.0, *pts])
    # split any step longer than dt_max (can appear after dropping nodes)
    fixed = [out[0]]
    for lo, hi in zip(out, out[1:]):
        n = max(1, int(math.ceil((hi - lo) / dt_max - 1e-9)))
        fixed.extend(lo + (hi - lo) * np.arange(1, n + 1) / n)
        fixed[-1] = hi
    return np.array(fixed)


def _sinh_strikes(n: int, k_max: float, concentration: float) -> np.ndarray:
    alpha = concentration
    c_hi = math.asinh((k_max - 1.0) / alpha)
    c_lo = math.asinh(-1.0 / alpha)
    u_star = -c_lo / (c_hi - c_lo)
    j_star = min(max(int(round(u_star * n)), 1), n - 1)
    u = np.concatenate([
        np.linspace(0.0, u_star, j_star + 1),
        np.linspace(u_star, 1.0, n - j_star + 1)[1:],
    ])
    k = 1.0 + alpha * np.sinh(c_lo + u * (c_hi - c_lo))
    k[0] = 0.0
    k[j_star] = 1.0
    k[-1] = k_max
    return k


@dataclass(frozen=True)
class PdeGrid:
    """Strike nodes (``k[0] = 0``, ``1`` is a node) and time nodes (``t[0] = 0``)."""

    k: np.ndarray
    t: np.ndarray
    theta: float = 0.5
    rannacher_steps: int = 2
    dt_max: float = DT_MAX
    grading: float = 0.01

    def __post_init__(self):
        k = np.array(self.k, dtype=float)
        t = np.array(self.t, dtype=float)
        if k[0] != 0.0 or np.any(np.diff(k) <= 0) or not np.any(np.abs(k - 1.0) < 1e-14):
            raise PdeError("strike grid must start at 0, increase strictly and contain k = 1")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise PdeError("time grid must start at 0 and increase strictly")
        if np.max(np.diff(t)) > self.dt_max * (1.0 + 1e-9):
            raise PdeError("time step exceeds dt_max")
        k.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "t", t)

    @classmethod
    def build(cls, pillars: Sequence[float], sigma_max: float = 0.5, n_k: int = 2000,
              dt_max: float = DT_MAX, k_max: Optional[float] = None,
              max_strike: float = 1.0, concentration: float = 0.1,
              grading: float = 0.01, **kw) -> "PdeGrid":
        """Grid covering ``pillars`` (all become time nodes).

        ``k_max`` defaults to ``exp(8 sigma_max sqrt(T_max))``, and at least
        twice ``max_strike`` so every quoted strike is interior.
        """
        pillars = [float(p) for p in pillars]
        if not pillars or min(pillars) <= 0:
            raise PdeError("need positive pillar times")
        horizon = max(pillars)
        if k_max is None:
            k_max = max(math.exp(8.0 * sigma_max * math.sqrt(horizon)), 2.0 * max_strike, 3.0)
        if k_max <= max_strike:
            raise PdeError("k_max must exceed the largest quoted strike")
        return cls(_sinh_strikes(n_k, k_max, concentration),
                   _time_grid(pillars, dt_max, grading), dt_max=dt_max, grading=grading, **kw)

    def with_times(self, pillars: Iterable[float]) -> "PdeGrid":
        return PdeGrid(self.k, _time_grid(pillars, self.dt_max, self.grading), self.theta,
                       self.rannacher_steps, self.dt_max, self.grading)

    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    @property
    def atm_index(self) -> int:
        return int(np.argmin(np.abs(self.k - 1.0)))

    def to_dict(self) -> dict:
        return {"k": self.k.tolist(), "t": self.t.tolist(), "theta": self.theta,
                "rannacher_steps": self.rannacher_steps, "dt_max": self.dt_max,
                "grading": self.grading}

    @classmethod
    def from_dict(cls, d) -> "PdeGrid":
        return cls(np.array(d["k"]), np.array(d["t"]), d.get("theta", 0.5),
                   d.get("rannacher_steps", 2), d.get("dt_max", DT_MAX), d.get("grading", 0.01))


@dataclass(frozen=True)
class CallSurface:
    """Normalized call prices ``values[n, m] = c(t[n], k[m])``."""

    t: np.ndarray
    k: np.ndarray
    values: np.ndarray

    def slice_index(self, t: float) -> int:
        n = int(np.searchsorted(self.t, t - 1e-12))
        if n >= self.t.size or abs(self.t[n] - t) > 1e-10:
            raise KeyError(t)
        return n

    def slice(self, t: float) -> np.ndarray:
        """Prices on the strike grid at time ``t``, linear in time between nodes."""
        if t < -1e-12 or t > self.t[-1] + 1e-10:
            raise PdeError(f"t={t} outside solved horizon [0, {self.t[-1]}]")
        try:
            return self.values[self.slice_index(t)]
        except KeyError:
            pass
        n = int(np.searchsorted(self.t, t))
        w = (t - self.t[n - 1]) / (self.t[n] - self.t[n - 1])
        return (1.0 - w) * self.values[n - 1] + w * self.values[n]

    def price(self, t: float, k):
        """``c(t, k)``: cubic in strike, ``1 - k`` for ``k <= 0``, 0 beyond ``k_max``."""
        k = np.asarray(k, float)
        row = self.slice(float(t))
        inner = CubicSpline(self.k, row)(np.clip(k, 0.0, self.k[-1]))
        out = np.where(k <= 0, 1.0 - k, np.where(k >= self.k[-1], 0.0, inner))
        return out[()]

    def second_moment(self, t: float) -> float:
        """``E[s_t^2] = 2 int_0^inf c(t, k) dk`` (trapezoid on the grid)."""
        return float(2.0 * trapezoid(self.slice(t), self.k))


def _eta_squared_fn(eta, k: np.ndarray) -> Callable[[float], tuple]:
    """Return ``at(t) -> (eta^2 on k, key)``; equal keys mean identical arrays."""
    if isinstance(eta, LocalVolSurface):
        cache = [eta.pillar_curve(i, k) ** 2 for i in range(len(eta.times))]

        def at(t: float):
            i0, i1, w = eta.pillar_weights(t)
            if w == 0.0 or i0 == i1:
                return cache[i1], ("pillar", i1)
            return (1.0 - w) * cache[i0] + w * cache[i1], None
        return at
    if callable(eta):
        def at_fn(t: float):
            e = np.broadcast_to(np.asarray(eta(t, k), float), k.shape)
            if not np.all(e[1:-1] > 0):
                raise PdeError(f"non-positive local vol at t={t}")
            return e * e, None
        return at_fn
    if not float(eta) > 0:
        raise PdeError("local vol must be positive")
    const = np.full(k.shape, float(eta) ** 2)
    return lambda t: (const, ("const",))


def _operator(k, h_lo, h_hi, rate, eta2):
    """Tridiagonal coefficients of the spatial operator on interior nodes."""
    kin = k[1:-1]
    diff = 0.5 * kin * kin * eta2[1:-1]
    span = h_lo + h_hi
    lower = 2.0 * diff / (h_lo * span)
    upper = 2.0 * diff / (h_hi * span)
    diag = -(lower + upper) - rate
    if rate != 0.0:
        drift = rate * (1.0 - kin)  # coefficient of -dc/dk
        with np.errstate(divide="ignore"):
            peclet = np.abs(drift) * np.maximum(h_lo, h_hi) / diff
        upwind = peclet > 2.0
        # central first derivative
        c_lo = -h_hi / (h_lo * span)
        c_mid = (h_hi - h_lo) / (h_lo * h_hi)
        c_hi = h_lo / (h_hi * span)
        fwd = drift < 0
        d_lo = np.where(upwind, np.where(fwd, 0.0, -1.0 / h_lo), c_lo)
        d_mid = np.where(upwind, np.where(fwd, -1.0 / h_hi, 1.0 / h_lo), c_mid)
        d_hi = np.where(upwind, np.where(fwd, 1.0 / h_hi, 0.0), c_hi)
        lower = lower - drift * d_lo
        diag = diag - drift * d_mid
        upper = upper - drift * d_hi
    return lower, diag, upper


def solve_dupire(eta: Union[LocalVolSurface, Callable, float], a, grid: PdeGrid,
                 check_tol: float = 1e-7) -> CallSurface:
    """March the normalized call prices across the whole time grid.

    ``eta`` is a :class:`LocalVolSurface`, a callable ``eta(t, k_array)`` or a
    constant; ``a`` is anything :func:`as_mean_reversion` accepts.  Local vol
    and mean reversion are sampled at step midpoints.  The first step is
    taken as ``rannacher_steps`` fully implicit sub-steps.

    Raises
    ------
    PdeError
        On non-positive local vol, tridiagonal breakdown, or a slice that
        fails the monotone/convex check by more than ``check_tol``.
    """
    a = as_mean_reversion(a)
    k = grid.k
    t = grid.t
    m = k.size
    h = np.diff(k)
    h_lo, h_hi = h[:-1], h[1:]
    eta2_at = _eta_squared_fn(eta, k)

    values = np.empty((t.size, m))
    c = np.maximum(1.0 - k, 0.0)
    values[0] = c

    memo = {"key": None}

    def factorized(t0, dt, theta):
        tm = t0 + 0.5 * dt
        eta2, ekey = eta2_at(tm)
        rate = a.rate_at(tm)
        key = None if ekey is None else (ekey, rate, dt, theta)
        if key is not None and key == memo["key"]:
            return memo["ops"]
        if not np.all(eta2[1:-1] > 0) or not np.all(np.isfinite(eta2)):
            raise PdeError(f"non-positive or non-finite local vol at t={tm}")
        lower, diag, upper = _operator(k, h_lo, h_hi, rate, eta2)
        dl, d, du, du2, ipiv, info = lapack.dgttrf(
            -theta * dt * lower[1:], 1.0 - theta * dt * diag, -theta * dt * upper[:-1])
        if info != 0:
            raise PdeError(f"tridiagonal factorization failed (info={info}) at t={t0 + dt}")
        ops = (lower, diag, upper, dl, d, du, du2, ipiv)
        memo["key"], memo["ops"] = key, ops
        return ops

    def step(c_old, t0, dt, theta):
        lower, diag, upper, dl, d, du, du2, ipiv = factorized(t0, dt, theta)
        inner = c_old[1:-1]
        rhs = inner.copy()
        if theta < 1.0:
            expl = diag * inner
            expl[1:] += lower[1:] * inner[:-1]
            expl[:-1] += upper[:-1] * inner[1:]
            expl[0] += lower[0] * c_old[0]
            expl[-1] += upper[-1] * c_old[-1]
            rhs += (1.0 - theta) * dt * expl
        # boundary values are fixed in time (c(t,0) = 1, c(t,k_max) = 0)
        rhs[0] += theta * dt * lower[0] * 1.0
        x, info = lapack.dgttrs(dl, d, du, du2, ipiv, rhs)
        if info != 0 or not np.all(np.isfinite(x)):
            raise PdeError(f"tridiagonal solve failed (info={info}) at t={t0 + dt}")
        out = np.empty_like(c_old)
        out[0] = 1.0
        out[-1] = 0.0
        out[1:-1] = x
        return out

    for n in range(1, t.size):
        t0, dt = t[n - 1], t[n] - t[n - 1]
        if n == 1 and grid.rannacher_steps > 0:
            sub = dt / grid.rannacher_steps
            for j in range(grid.rannacher_steps):
                c = step(c, t0 + j * sub, sub, 1.0)
        else:
            c = step(c, t0, dt, grid.theta)
        values[n] = c

    surface = CallSurface(t, k, values)
    _check_shape(surface, check_tol)
    return surface


def _check_shape(surface: CallSurface, tol: float) -> None:
    c = surface.values
    if np.any(np.diff(c, axis=1) > tol):
        n = int(np.argmax(np.max(np.diff(c, axis=1), axis=1)))
        raise PdeError(f"call prices increase in strike at t={surface.t[n]}")
    slopes = np.diff(c, axis=1) / np.diff(surface.k)
    if np.any(np.diff(slopes, axis=1) < -tol * 1e3):
        n = int(np.argmin(np.min(np.diff(slopes, axis=1), axis=1)))
        raise PdeError(f"non-convex call prices (oscillation) at t={surface.t[n]}")


def density_slice(surface: CallSurface, t: float, tol: float = 1e-6):
    """Risk-neutral density of ``s_t`` on interior strike nodes.

    Returns ``(k, p, w)`` where ``w`` are the quadrature weights for which
    ``sum(p * w)`` telescopes to the total mass.

    Raises
    ------
    PdeError
        If the density is negative beyond ``tol`` times its peak.
    """
    c = surface.slice(t)
    k = surface.k
    h = np.diff(k)
    slopes = np.diff(c) / h
    w = 0.5 * (h[:-1] + h[1:])
    p = np.diff(slopes) / w
    if np.min(p) < -tol * max(np.max(p), 1.0):
        raise PdeError(f"negative density {np.min(p):.3g} at t={t}")
    return k[1:-1], p, w


def density_moments(surface: CallSurface, t: float):
    """``(mass, mean)`` of the discrete density at time ``t``."""
    k, p, w = density_slice(surface, t)
    return float(np.sum(p * w)), float(np.sum(k * p * w))
