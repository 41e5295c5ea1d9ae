"""Mean-reverting normalized fictitious spot.

The normalized spot follows

    ds_t = a(t) (1 - s_t) dt + eta(t, s_t) s_t dW_t,    s_0 = 1,

so ``E[s_t] = 1`` and every futures price is an affine function of ``s_t``:
``F_t(T) = F_0(T) (1 - (1 - s_t) exp(-A(t, T)))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .localvol import LocalVolSurface
from .market_data import FuturesCurve
from .meanrev import MeanReversion, as_mean_reversion
from .pde import CallSurface, PdeGrid, solve_dupire

SCHEMA = "comsmile.spot-model"
SCHEMA_VERSION = 1


def effective_strike(a, t, T, K, F0T):
    """Normalized-spot strike ``1 - exp(A(t, T)) (1 - K / F0T)`` of a futures strike ``K``."""
    a = as_mean_reversion(a)
    if np.any(np.asarray(F0T) <= 0):
        raise ValueError("futures price must be positive")
    growth = np.exp(a.integral(t, T))
    return (1.0 - growth * (1.0 - np.asarray(K, float) / F0T))[()]


def strike_from_effective(a, t, T, k, F0T):
    """Inverse of :func:`effective_strike`."""
    a = as_mean_reversion(a)
    decay = np.exp(-a.integral(t, T))
    return (F0T * (1.0 - (1.0 - np.asarray(k, float)) * decay))[()]


def absorbing_level(a, t, T, F0T):
    """``F0T (1 - exp(-A(t, T)))``: futures level reached when the spot hits zero."""
    a = as_mean_reversion(a)
    return (F0T * (1.0 - np.exp(-a.integral(t, T))))[()]


def futures_from_spot(a, curve, t, T, s_t):
    """``F_t(T)`` given the normalized spot ``s_t``.

    ``curve`` is a :class:`FuturesCurve` or the scalar ``F_0(T)``.
    """
    a = as_mean_reversion(a)
    F0T = curve(T) if callable(curve) else curve
    decay = np.exp(-a.integral(t, T))
    return (F0T * (1.0 - (1.0 - np.asarray(s_t, float)) * decay))[()]


@dataclass(frozen=True)
class CalibratedSpotModel:
    """Futures curve, mean reversion and local vol, plus the PDE grid used to price.

    The call surface is solved once on first use and cached.
    """

    curve: FuturesCurve
    a: MeanReversion
    eta: LocalVolSurface
    grid: PdeGrid
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "a", as_mean_reversion(self.a))

    @cached_property
    def surface(self) -> CallSurface:
        return solve_dupire(self.eta, self.a, self.grid)

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    def forward(self, T):
        return self.curve(T)

    def normalized_call(self, t: float, k):
        """``c(t, k)`` from the solved surface."""
        if t > self.horizon + 1e-10:
            raise ValueError(f"expiry {t} beyond calibrated horizon {self.horizon}")
        return self.surface.price(t, k)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "curve": self.curve.to_dict(),
            "mean_reversion": self.a.to_dict(),
            "local_vol": self.eta.to_dict(),
            "grid": self.grid.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d) -> "CalibratedSpotModel":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"not a spot-model document (schema={d.get('schema')!r})")
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported spot-model schema version {d.get('version')!r}")
        try:
            return cls(FuturesCurve.from_dict(d["curve"]), MeanReversion.from_dict(d["mean_reversion"]),
                       LocalVolSurface.from_dict(d["local_vol"]), PdeGrid.from_dict(d["grid"]),
                       dict(d.get("metadata", {})))
        except KeyError as exc:
            raise ValueError(f"spot-model document missing field {exc}") from None

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CalibratedSpotModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def futures_local_vol(model: CalibratedSpotModel, t, T, K):
    """Absolute (price-unit) volatility of ``F_t(T)`` at level ``K``.

    ``(K - F_0(T)(1 - e^{-A})) * eta(t, k_F)``; zero at the absorbing level.

    Raises
    ------
    ValueError
        If ``K`` lies below the absorbing level.
    """
    F0T = float(model.curve(T))
    K = np.asarray(K, float)
    floor = absorbing_level(model.a, t, T, F0T)
    gap = K - floor
    if np.any(gap < -1e-12 * F0T):
        raise ValueError(f"strike below absorbing level {floor:.6g}")
    k_f = effective_strike(model.a, t, T, K, F0T)
    return (np.maximum(gap, 0.0) * model.eta(t, k_f))[()]


def spot_moment(model: CalibratedSpotModel, t: float, order: int = 1) -> float:
    """``E[s_t]`` (exactly 1) or ``E[s_t^2]`` from the solved call surface."""
    if order == 1:
        return 1.0
    if order != 2:
        raise ValueError("order must be 1 or 2")
    if t == 0:
        return 1.0
    if t > model.horizon + 1e-10:
        raise ValueError(f"t={t} beyond calibrated horizon {model.horizon}")
    return model.surface.second_moment(t)


def terminal_correlation_onefactor(model: Optional[CalibratedSpotModel], t: float, T1: float,
                                   T2: float) -> float:
    """``Corr[F_t(T1), F_t(T2)]`` in the one-factor model: both are affine in ``s_t``."""
    if t > min(T1, T2) + 1e-12:
        raise ValueError("observation time after a contract's last date")
    return 1.0


def simulate_spot(eta, a, times: Sequence[float], n_paths: int, seed: int = 0,
                  dt_max: float = 1.0 / 365.0, antithetic: bool = True) -> np.ndarray:
    """Monte Carlo samples of ``s_t`` at each of ``times``; shape ``(len(times), n_paths)``.

    Splitting scheme per step: an exact lognormal move with the local vol frozen
    at the start of the step, then the exact mean-reversion flow
    ``s <- 1 + (s - 1) exp(-A)``.  Both preserve ``E[s] = 1``.
    """
    a = as_mean_reversion(a)
    eta_fn = eta if callable(eta) else (lambda t, k, v=float(eta): np.full(np.shape(k), v))
    times = np.asarray(times, float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be non-negative and sorted")
    rng = np.random.default_rng(seed)
    n_half = (n_paths + 1) // 2 if antithetic else n_paths
    s = np.ones(2 * n_half if antithetic else n_paths)
    out = np.empty((times.size, n_paths))
    t = 0.0
    for i, target in enumerate(times):
        n_steps = int(np.ceil((target - t) / dt_max - 1e-9))
        for j in range(n_steps):
            dt = (target - t) / (n_steps - j)
            z = rng.standard_normal(n_half)
            if antithetic:
                z = np.concatenate([z, -z])
            vol = eta_fn(t, np.maximum(s, 0.0))
            s = s * np.exp(vol * np.sqrt(dt) * z - 0.5 * vol * vol * dt)
            s = 1.0 + (s - 1.0) * np.exp(-float(a.integral(t, t + dt)))
            t += dt
        out[i] = s[:n_paths]
        t = float(target)
    return out
