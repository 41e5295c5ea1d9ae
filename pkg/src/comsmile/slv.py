"""Stochastic local volatility on top of a calibrated spot model.

Each simulated futures contract follows

    dF_t(T) = v_t eta_F(t, T, F) / sqrt(E[v_t^2 | F_t(T)]) [rho(T), sqrt(1 - rho(T)^2)] . dW^F_t

with ``log v`` a mean-reverting Gaussian process normalized so that
``E[v_t^2] = 1``.  The conditional expectation is estimated from the particle
cloud at every step, which keeps each contract's marginal law equal to the one
of the local-volatility model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .spot_model import CalibratedSpotModel

RHO_V_MAX = 1.0 / math.sqrt(2.0)


class SlvError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    dt_max: float = 1.0 / 365.0
    min_paths: int = 1000


@dataclass(frozen=True)
class SlvModel:
    """Base local-vol model plus curve loadings ``rho(T)``, vol-of-vol and spot-vol correlation.

    ``rho_times``/``rho_values`` are interpolated linearly in ``T`` and held flat
    outside their range.  The default loading of 1 everywhere is the one-factor model.
    """

    base: CalibratedSpotModel
    xi: float = 0.0
    rho_v: float = 0.0
    rho_times: tuple = (0.0,)
    rho_values: tuple = (1.0,)
    config: SimulationConfig = field(default_factory=SimulationConfig)

    def __post_init__(self):
        rt = tuple(float(t) for t in np.atleast_1d(self.rho_times))
        rv = tuple(float(r) for r in np.atleast_1d(self.rho_values))
        if len(rt) != len(rv) or not rt:
            raise SlvError("rho_times and rho_values must have the same non-zero length")
        if any(b <= a for a, b in zip(rt, rt[1:])):
            raise SlvError("rho_times must be strictly increasing")
        if any(not -1.0 <= r <= 1.0 for r in rv):
            raise SlvError("curve loadings rho(T) must lie in [-1, 1]")
        if not (self.xi >= 0.0 and math.isfinite(self.xi)):
            raise SlvError("vol-of-vol must be finite and non-negative")
        if abs(self.rho_v) > RHO_V_MAX + 1e-15:
            raise SlvError("spot-vol correlation must lie in [-1/sqrt(2), 1/sqrt(2)]")
        object.__setattr__(self, "rho_times", rt)
        object.__setattr__(self, "rho_values", rv)
        # the 3x3 driver correlation must admit a real Cholesky factor
        np.linalg.cholesky(self.driver_correlation() + 1e-15 * np.eye(3))

    def rho(self, T) -> np.ndarray:
        return np.clip(np.interp(T, self.rho_times, self.rho_values), -1.0, 1.0)

    def driver_correlation(self) -> np.ndarray:
        r = self.rho_v
        return np.array([[1.0, 0.0, r], [0.0, 1.0, r], [r, r, 1.0]])


def instantaneous_correlation(model: SlvModel, T1: float, T2: float) -> float:
    """``rho(T1) rho(T2) + sqrt((1 - rho(T1)^2)(1 - rho(T2)^2))``."""
    r1, r2 = float(model.rho(T1)), float(model.rho(T2))
    c = r1 * r2 + math.sqrt(max(1.0 - r1 * r1, 0.0) * max(1.0 - r2 * r2, 0.0))
    return min(max(c, -1.0), 1.0)


# -- conditional expectation ------------------------------------------------


def _epanechnikov_weights(offsets: np.ndarray) -> np.ndarray:
    return np.maximum(1.0 - offsets * offsets, 0.0)


@dataclass(frozen=True)
class LeverageEstimator:
    """Nadaraya-Watson estimate of ``E[y | x]`` with an Epanechnikov kernel.

    Particles are linearly binned on a uniform grid.  The bandwidth starts at
    ``scale`` times Silverman's rule and is widened per grid point until the
    Kish effective sample size reaches ``min_effective``.  Clouds smaller than
    ``small_cloud`` use equal-count bins instead.
    """

    scale: float = 1.5
    min_effective: int = 50
    n_grid: int = 401
    small_cloud: int = 2000
    widen: float = 1.5
    max_widen: int = 12

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        n = x.size
        if n < self.min_effective:
            raise SlvError(f"{n} particles cannot support {self.min_effective} per estimate")
        lo, hi = float(x.min()), float(x.max())
        if hi - lo <= 1e-12 * max(abs(lo), abs(hi), 1.0):
            return np.full(n, y.mean())
        if n < self.small_cloud:
            return self._binned(x, y)
        return self._kernel(x, y, lo, hi)

    def _binned(self, x, y):
        order = np.argsort(x, kind="stable")
        n_bins = max(x.size // self.min_effective, 1)
        groups = np.array_split(order, n_bins)
        centers = np.array([x[g].mean() for g in groups])
        means = np.array([y[g].mean() for g in groups])
        return np.interp(x, centers, means)

    def _kernel(self, x, y, lo, hi):
        m = self.n_grid
        dg = (hi - lo) / (m - 1)
        pos = (x - lo) / dg
        i = np.minimum(pos.astype(np.int64), m - 2)
        w1 = pos - i
        w0 = 1.0 - w1
        counts = np.bincount(i, w0, m) + np.bincount(i + 1, w1, m)
        sums = np.bincount(i, w0 * y, m) + np.bincount(i + 1, w1 * y, m)

        cdf = np.cumsum(counts) / x.size
        q25, q75 = np.interp([0.25, 0.75], cdf, np.arange(m))
        spread = min(x.std(), (q75 - q25) * dg / 1.349)
        if spread <= 0.0:
            spread = x.std()
        h = self.scale * 0.9 * spread * x.size ** -0.2

        est = np.full(m, np.nan)
        for _ in range(self.max_widen):
            half = int(h / dg)
            kern = _epanechnikov_weights(np.arange(-half, half + 1) * dg / h)
            window = slice(half, half + m)
            s0 = np.convolve(counts, kern)[window]
            s1 = np.convolve(sums, kern)[window]
            s2 = np.convolve(counts, kern * kern)[window]
            with np.errstate(invalid="ignore", divide="ignore"):
                ess = s0 * s0 / s2
                ok = np.isnan(est) & (ess >= self.min_effective) & (s0 > 0)
                est[ok] = s1[ok] / s0[ok]
            if not np.isnan(est).any():
                break
            h *= self.widen
        if np.isnan(est).all():
            return np.full(x.size, y.mean())
        good = ~np.isnan(est)
        grid = np.arange(m)
        est = np.interp(grid, grid[good], est[good])
        return est[i] * w0 + est[i + 1] * w1


# -- simulation ---------------------------------------------------------------


@dataclass
class PathEnsemble:
    """Simulated futures values at monitor times.

    ``futures[(i, j)]`` holds the cloud of ``F_{times[i]}(pillars[j])`` for every
    ``times[i] <= pillars[j]``; ``v2[i]`` holds ``v^2`` at ``times[i]``.
    """

    times: np.ndarray
    pillars: np.ndarray
    forwards: np.ndarray
    futures: Dict[Tuple[int, int], np.ndarray]
    v2: np.ndarray
    seed: int
    n_paths: int

    def values(self, t: float, T: float) -> np.ndarray:
        i = _locate(self.times, t, "monitor time")
        j = _locate(self.pillars, T, "pillar")
        try:
            return self.futures[(i, j)]
        except KeyError:
            raise SlvError(f"pillar {T} was not monitored at t={t}") from None


def _locate(arr: np.ndarray, x: float, what: str) -> int:
    j = int(np.argmin(np.abs(arr - x)))
    if abs(arr[j] - x) > 1e-10:
        raise SlvError(f"{what} {x} was not simulated")
    return j


def _step_grid(nodes: Sequence[float], dt_max: float) -> np.ndarray:
    nodes = np.unique(np.concatenate([[0.0], np.asarray(nodes, float)]))
    out = [0.0]
    for t0, t1 in zip(nodes[:-1], nodes[1:]):
        n = max(int(math.ceil((t1 - t0) / dt_max - 1e-9)), 1)
        out.extend(t0 + (t1 - t0) * np.arange(1, n + 1) / n)
    return np.array(out)


class _EtaTable:
    """Local vol tabulated on a fine uniform strike grid per time section.

    Linear lookup replaces the spline evaluation on every particle; the grid
    spacing keeps the interpolation error far below Monte Carlo noise.
    """

    def __init__(self, eta, n: int = 4001):
        self.eta = eta
        lo = min(float(k[0]) for k in eta.strikes)
        hi = max(float(k[-1]) for k in eta.strikes)
        pad = 1e-9 + 1e-6 * (hi - lo)
        self.lo, self.hi, self.n = lo - pad, hi + pad, n
        self.dk = (self.hi - self.lo) / (n - 1)
        self.k = self.lo + self.dk * np.arange(n)
        self.key = None

    def __call__(self, t: float, k: np.ndarray) -> np.ndarray:
        key = self.eta.pillar_weights(t)
        if key != self.key:
            self.values = np.asarray(self.eta(t, self.k), float)
            self.key = key
        pos = (np.clip(k, self.lo, self.hi) - self.lo) / self.dk
        i = np.minimum(pos.astype(np.int64), self.n - 2)
        w = pos - i
        return self.values[i] * (1.0 - w) + self.values[i + 1] * w


def _log_vol_mean(xi: float, t: float) -> float:
    return -0.5 * xi * xi * (1.0 - math.exp(-2.0 * t))


def _simulate(model: SlvModel, pillars, times, n_paths: int, seed: int, stochastic: bool,
              estimator: LeverageEstimator) -> PathEnsemble:
    base = model.base
    pillars = np.asarray(sorted(set(float(T) for T in np.atleast_1d(pillars))))
    times = np.asarray(sorted(set(float(t) for t in np.atleast_1d(times))))
    if times.size == 0 or times[0] < 0:
        raise SlvError("monitor times must be non-negative")
    horizon = float(times[-1])
    if horizon > base.horizon + 1e-10:
        raise SlvError(f"horizon {horizon} beyond calibrated horizon {base.horizon}")
    if n_paths < model.config.min_paths:
        raise SlvError(f"need at least {model.config.min_paths} paths, got {n_paths}")

    F0 = np.array([float(base.curve(T)) for T in pillars])
    rho = model.rho(pillars)
    load2 = np.sqrt(np.maximum(1.0 - rho * rho, 0.0))
    rv = model.rho_v
    rv3 = math.sqrt(max(1.0 - 2.0 * rv * rv, 0.0))
    xi = float(model.xi) if stochastic else 0.0
    a = base.a

    eta = _EtaTable(base.eta)
    grid = _step_grid(np.concatenate([times, pillars[pillars < horizon]]), model.config.dt_max)
    rng = np.random.default_rng(seed)
    F = np.repeat(F0[:, None], n_paths, axis=1)
    logv = np.zeros(n_paths)
    v2_out = np.empty((times.size, n_paths))
    out: Dict[Tuple[int, int], np.ndarray] = {}

    def record(t):
        i = int(np.searchsorted(times, t - 1e-12))
        if i < times.size and abs(times[i] - t) <= 1e-12:
            v2_out[i] = np.exp(2.0 * logv)
            for j in np.nonzero(pillars >= t - 1e-12)[0]:
                out[(i, j)] = F[j].copy()

    record(0.0)
    for t0, t1 in zip(grid[:-1], grid[1:]):
        dt = t1 - t0
        tm = 0.5 * (t0 + t1)
        z = rng.standard_normal((3, n_paths))
        v = np.exp(logv) if xi > 0.0 else None
        v2 = v * v if xi > 0.0 else None
        for j in np.nonzero(pillars > t0 + 1e-12)[0]:
            T = pillars[j]
            decay0 = math.exp(-float(a.integral(t0, T)))
            floor0 = F0[j] * (1.0 - decay0)
            excess = np.maximum(F[j] - floor0, 0.0)
            growth = math.exp(float(a.integral(tm, T)))
            k_f = 1.0 - growth * (1.0 - F[j] / F0[j])
            vol = eta(tm, k_f)
            if xi > 0.0:
                vol = vol * v / np.sqrt(estimator(F[j], v2))
            dw = rho[j] * z[0] + load2[j] * z[1]
            sd = vol * math.sqrt(dt)
            # lognormal move of the excess over the absorbing level: a martingale
            # increment for F that can never cross the level
            F[j] = F[j] + excess * np.expm1(sd * dw - 0.5 * sd * sd)
        if xi > 0.0:
            e = math.exp(-dt)
            dwv = rv * (z[0] + z[1]) + rv3 * z[2]
            logv = (logv * e + _log_vol_mean(xi, t1) - _log_vol_mean(xi, t0) * e
                    + xi * math.sqrt(0.5 * (1.0 - e * e)) * dwv)
        record(t1)
    return PathEnsemble(times, pillars, F0, out, v2_out, seed, n_paths)


def simulate_paths(model: SlvModel, pillars: Sequence[float], horizon: float, n_paths: int,
                   seed: int = 0, times: Optional[Sequence[float]] = None,
                   estimator: Optional[LeverageEstimator] = None) -> PathEnsemble:
    """Simulate the futures ``pillars`` up to ``horizon``.

    ``times`` are the monitor times (default: the horizon only); pillars stop
    evolving at their own maturity.  Each step draws a ``(3, n_paths)`` block of
    normals whatever the parameters, so the vol-of-vol-free run reproduces
    :func:`simulate_local_vol_paths` bit for bit.
    """
    times = [horizon] if times is None else list(times) + [horizon]
    return _simulate(model, pillars, [t for t in times if t <= horizon + 1e-12], n_paths, seed,
                     True, estimator or LeverageEstimator())


def simulate_local_vol_paths(model: SlvModel, pillars: Sequence[float], horizon: float,
                             n_paths: int, seed: int = 0,
                             times: Optional[Sequence[float]] = None) -> PathEnsemble:
    """Two-factor local-vol ensemble: ``v = 1`` and no leverage estimation."""
    times = [horizon] if times is None else list(times) + [horizon]
    return _simulate(model, pillars, [t for t in times if t <= horizon + 1e-12], n_paths, seed,
                     False, LeverageEstimator())


def _mean_se(x: np.ndarray) -> Tuple[float, float]:
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def vanilla_from_ensemble(ens: PathEnsemble, t: float, T: float, K) -> List[Tuple[float, float]]:
    """Future-style call prices with standard errors for each strike in ``K``."""
    F = ens.values(t, T)
    return [_mean_se(np.maximum(F - k, 0.0)) for k in np.atleast_1d(np.asarray(K, float))]


def mc_price_vanilla(model: SlvModel, t: float, T: float, K: float, n_paths: int,
                     seed: int = 0) -> Tuple[float, float]:
    """Future-style call on ``F(T)`` expiring at ``t``: ``(price, standard error)``."""
    if t > T + 1e-12:
        raise SlvError("option expiry after the futures maturity")
    ens = simulate_paths(model, [T], t, n_paths, seed)
    return vanilla_from_ensemble(ens, t, T, K)[0]


def mc_price_cso(model: SlvModel, T_e: float, T1: float, T2: float, K: float, n_paths: int,
                 seed: int = 0) -> Tuple[float, float]:
    """Future-style ``(F_{T_e}(T1) - F_{T_e}(T2) - K)^+``: ``(price, standard error)``."""
    if T_e > min(T1, T2) + 1e-12:
        raise SlvError("CSO expiry after a leg's maturity")
    ens = simulate_paths(model, [T1, T2], T_e, n_paths, seed)
    return _mean_se(np.maximum(ens.values(T_e, T1) - ens.values(T_e, T2) - K, 0.0))
