"""Non-parametric local-volatility surface on (maturity, effective strike) nodes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

ETA_MIN = 1e-4
ETA_MAX = 5.0
TIME_INTERPOLATIONS = ("flat", "linear_variance")


@dataclass(frozen=True)
class LocalVolSurface:
    """Node values ``eta[i][j]`` at strikes ``strikes[i][j]`` for pillar ``times[i]``.

    In strike each pillar is a monotone cubic (PCHIP) interpolant with
    constant extrapolation.  In time the surface is either flat backwards
    (pillar ``i`` holds on ``(t_{i-1}, t_i]``) or linear in local variance
    between pillars; both are constant before the first and after the last
    pillar.
    """

    times: tuple
    strikes: tuple
    values: tuple
    time_interp: str = "flat"
    eta_min: float = ETA_MIN
    eta_max: float = ETA_MAX

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if not times:
            raise ValueError("local-vol surface needs at least one pillar")
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("pillar times must be strictly increasing")
        if len(self.strikes) != len(times) or len(self.values) != len(times):
            raise ValueError("need one strike/value row per pillar")
        if self.time_interp not in TIME_INTERPOLATIONS:
            raise ValueError(f"unknown time interpolation {self.time_interp!r}")
        strikes, values = [], []
        for i, (k, v) in enumerate(zip(self.strikes, self.values)):
            k = np.array(k, dtype=float)
            v = np.array(v, dtype=float)
            if k.ndim != 1 or k.size == 0 or k.shape != v.shape:
                raise ValueError(f"pillar {i}: strikes and values must be matching 1-d arrays")
            if np.any(np.diff(k) <= 0):
                raise ValueError(f"pillar {i}: strikes must be strictly increasing")
            if np.any(~np.isfinite(v)) or np.any(v <= 0):
                raise ValueError(f"pillar {i}: local vol nodes must be positive")
            v = np.clip(v, self.eta_min, self.eta_max)
            k.setflags(write=False)
            v.setflags(write=False)
            strikes.append(k)
            values.append(v)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "strikes", tuple(strikes))
        object.__setattr__(self, "values", tuple(values))

    @classmethod
    def flat(cls, sigma: float, times=(1.0,), strikes=(1.0,), **kw) -> "LocalVolSurface":
        times = tuple(times)
        ks = [np.atleast_1d(np.asarray(strikes, float))] * len(times)
        return cls(times, tuple(ks), tuple(np.full(k.shape, sigma) for k in ks), **kw)

    @classmethod
    def from_function(cls, fn, times: Sequence[float], strikes: Sequence[Sequence[float]],
                      **kw) -> "LocalVolSurface":
        """Sample ``fn(t, k)`` at the given nodes."""
        vals = tuple(np.asarray(fn(t, np.asarray(k, float)), float) for t, k in zip(times, strikes))
        return cls(tuple(times), tuple(strikes), vals, **kw)

    # -- node vector -------------------------------------------------------

    @property
    def shape(self) -> List[int]:
        return [v.size for v in self.values]

    def node_vector(self) -> np.ndarray:
        return np.concatenate(self.values)

    def with_nodes(self, flat: np.ndarray) -> "LocalVolSurface":
        flat = np.asarray(flat, float)
        if flat.size != sum(self.shape):
            raise ValueError("node vector has the wrong length")
        parts = np.split(flat, np.cumsum(self.shape)[:-1])
        return LocalVolSurface(self.times, self.strikes, tuple(parts), self.time_interp,
                               self.eta_min, self.eta_max)

    # -- evaluation --------------------------------------------------------

    def pillar_curve(self, i: int, k) -> np.ndarray:
        """Strike section of pillar ``i`` at ``k`` (constant beyond the end nodes)."""
        ks, vs = self.strikes[i], self.values[i]
        k = np.asarray(k, float)
        if ks.size == 1:
            return np.full(k.shape, vs[0])
        kc = np.clip(k, ks[0], ks[-1])
        return PchipInterpolator(ks, vs, extrapolate=False)(kc)

    def pillar_weights(self, t: float):
        """Return ``(i0, i1, w)``: eta^2(t) = (1-w) eta_i0^2 + w eta_i1^2."""
        times = self.times
        if t <= times[0]:
            return 0, 0, 0.0
        if t > times[-1]:
            n = len(times) - 1
            return n, n, 0.0
        i = int(np.searchsorted(times, t, side="left"))
        if self.time_interp == "flat" or i == 0:
            return i, i, 0.0
        w = (t - times[i - 1]) / (times[i] - times[i - 1])
        return i - 1, i, float(w)

    def __call__(self, t: float, k):
        i0, i1, w = self.pillar_weights(float(t))
        v1 = self.pillar_curve(i1, k)
        if w == 0.0 or i0 == i1:
            return v1
        v0 = self.pillar_curve(i0, k)
        return np.sqrt((1.0 - w) * v0 * v0 + w * v1 * v1)

    def max_slope(self) -> float:
        """Largest |d eta / dk| between adjacent nodes (Lipschitz diagnostic)."""
        slopes = [np.max(np.abs(np.diff(v) / np.diff(k))) for k, v in zip(self.strikes, self.values)
                  if k.size > 1]
        return float(max(slopes)) if slopes else 0.0

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "times": list(self.times),
            "strikes": [k.tolist() for k in self.strikes],
            "values": [v.tolist() for v in self.values],
            "time_interp": self.time_interp,
            "strike_interp": "pchip",
            "extrapolation": "constant",
            "eta_min": self.eta_min,
            "eta_max": self.eta_max,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LocalVolSurface":
        return cls(tuple(d["times"]), tuple(d["strikes"]), tuple(d["values"]),
                   d.get("time_interp", "flat"), d.get("eta_min", ETA_MIN), d.get("eta_max", ETA_MAX))
