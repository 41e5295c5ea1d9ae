"""Piecewise-constant mean-reversion speed with exact integrals."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class MeanReversion:
    """Speed ``a(t)`` equal to ``rates[i]`` on ``[breaks[i], breaks[i+1])``.

    ``breaks[0]`` must be 0 and the last rate extends to infinity.
    """

    breaks: tuple
    rates: tuple

    def __post_init__(self):
        breaks = tuple(float(b) for b in self.breaks)
        rates = tuple(float(r) for r in self.rates)
        if len(breaks) != len(rates) or not breaks:
            raise ValueError("need one rate per breakpoint")
        if breaks[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        if any(b1 <= b0 for b0, b1 in zip(breaks, breaks[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if any(not r >= 0 for r in rates):
            raise ValueError("mean-reversion speed must be non-negative")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "rates", rates)
        cum = np.concatenate([[0.0], np.cumsum(np.diff(breaks) * np.array(rates[:-1]))])
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def constant(cls, a: float) -> "MeanReversion":
        return cls((0.0,), (a,))

    @property
    def is_zero(self) -> bool:
        return all(r == 0.0 for r in self.rates)

    def _index(self, t):
        return np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.breaks) - 1)

    def __call__(self, t):
        t = np.asarray(t, float)
        return np.asarray(self.rates)[self._index(t)][()]

    def rate_at(self, t: float) -> float:
        """Scalar ``a(t)`` without array overhead."""
        return self.rates[max(bisect.bisect_right(self.breaks, t) - 1, 0)]

    def primitive(self, t):
        """``int_0^t a(u) du``."""
        t = np.asarray(t, float)
        j = self._index(t)
        out = self._cum[j] + np.asarray(self.rates)[j] * (t - np.asarray(self.breaks)[j])
        return out[()]

    def integral(self, t, T):
        """``A(t, T) = int_t^T a(u) du``; raises for ``T < t``."""
        t = np.asarray(t, float)
        T = np.asarray(T, float)
        if np.any(T < t - 1e-14):
            raise ValueError(f"negative time interval: t={t!r}, T={T!r}")
        if self.is_zero:
            return np.zeros(np.broadcast(t, T).shape)[()]
        return np.maximum(self.primitive(T) - self.primitive(t), 0.0)

    def to_dict(self) -> dict:
        return {"breaks": list(self.breaks), "rates": list(self.rates)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MeanReversion":
        return cls(tuple(d["breaks"]), tuple(d["rates"]))


def as_mean_reversion(a) -> MeanReversion:
    if isinstance(a, MeanReversion):
        return a
    if a is None:
        return MeanReversion.constant(0.0)
    if isinstance(a, Sequence) and not isinstance(a, str):
        breaks, rates = a
        return MeanReversion(tuple(breaks), tuple(rates))
    return MeanReversion.constant(float(a))
