"""Market data ingestion: futures and discount curves, contract calendars
and option quotes.

All year fractions are ACT/365 fixed from the valuation date.  A market
directory holds four CSV files::

    futures.csv     T,price                     (header comments: valuation_date, day_count)
    discount.csv    T,df                        (optional; flat 1.0 when absent)
    calendars.csv   id,first_trade,last_trade,first_notice,last_notice,
                    first_delivery,last_delivery,option_expiry[,option_payment]
    quotes.csv      expiry,contract,strike_or_delta,strike_type,vol,style

Comment lines start with ``#``; ``# key: value`` comments before the header
row are read as metadata.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import ndtr, ndtri

DAY_COUNT = "ACT/365F"
FUTURE_STYLE = "future"
EQUITY_STYLE = "equity"
_TIME_TOL = 1e-12


class MarketDataError(ValueError):
    """Invalid or inconsistent market input; the message names the row and field."""


def year_fraction(start: dt.date, end: dt.date) -> float:
    return (end - start).days / 365.0


def add_business_days(day: dt.date, n: int) -> dt.date:
    out = day
    while n > 0:
        out += dt.timedelta(days=1)
        if out.weekday() < 5:
            n -= 1
    return out


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ContractCalendar:
    id: str
    first_trade: dt.date
    last_trade: dt.date
    first_notice: dt.date
    last_notice: dt.date
    first_delivery: dt.date
    last_delivery: dt.date
    option_expiry: dt.date
    option_payment: Optional[dt.date] = None

    def __post_init__(self):
        if not self.first_trade < self.last_trade:
            raise MarketDataError(f"contract {self.id}: first_trade must precede last_trade")
        if self.option_expiry > min(self.first_notice, self.last_trade):
            raise MarketDataError(
                f"contract {self.id}: option_expiry after min(first_notice, last_trade)"
            )
        if self.first_delivery > self.last_delivery:
            raise MarketDataError(f"contract {self.id}: first_delivery after last_delivery")
        if self.option_payment is not None and self.option_payment < self.option_expiry:
            raise MarketDataError(f"contract {self.id}: option_payment before option_expiry")

    @property
    def last(self) -> dt.date:
        """Last date the futures price is a martingale: min(first notice, last trade)."""
        return min(self.first_notice, self.last_trade)

    @property
    def payment(self) -> dt.date:
        if self.option_payment is not None:
            return self.option_payment
        return add_business_days(self.option_expiry, 2)


@dataclass(frozen=True)
class FuturesCurve:
    """Futures prices ``F_0(T)`` on year-fraction pillars, log-linear in between."""

    times: np.ndarray
    prices: np.ndarray
    valuation_date: Optional[dt.date] = None
    day_count: str = DAY_COUNT

    def __post_init__(self):
        times = _frozen(self.times)
        prices = _frozen(self.prices)
        if times.ndim != 1 or times.shape != prices.shape or times.size == 0:
            raise MarketDataError("futures curve needs matching non-empty T and price columns")
        if np.any(np.diff(times) <= 0):
            raise MarketDataError("futures curve pillars must be strictly increasing in T")
        if np.any(times < 0):
            raise MarketDataError("futures curve pillars must have T >= 0")
        if np.any(~(prices > 0)):
            raise MarketDataError("futures prices must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "prices", prices)

    def __call__(self, T):
        return futures_interp(self, T)

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "prices": self.prices.tolist(),
            "valuation_date": self.valuation_date.isoformat() if self.valuation_date else None,
            "day_count": self.day_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FuturesCurve":
        vd = d.get("valuation_date")
        return cls(d["times"], d["prices"], dt.date.fromisoformat(vd) if vd else None,
                   d.get("day_count", DAY_COUNT))


def _loglinear(times: np.ndarray, values: np.ndarray, T):
    T = np.asarray(T, float)
    if times.size == 1:
        return np.full(T.shape, values[0])[()]
    # ratio form anchored on the nearer pillar keeps pillar values exact
    i = np.clip(np.searchsorted(times, T, side="right") - 1, 0, times.size - 2)
    w = (T - times[i]) / (times[i + 1] - times[i])
    left, right = values[i], values[i + 1]
    out = np.where(w <= 0.5, left * (right / left) ** w, right * (left / right) ** (1.0 - w))
    return out[()]


def futures_interp(curve: FuturesCurve, T):
    """Futures price at maturity ``T``, log-linear between pillars.

    Raises
    ------
    MarketDataError
        If any ``T`` lies outside the pillar range (no extrapolation).
    """
    T = np.asarray(T, float)
    lo, hi = curve.span
    if np.any(T < lo - _TIME_TOL) or np.any(T > hi + _TIME_TOL):
        raise MarketDataError(f"T={T!r} outside futures curve range [{lo}, {hi}]")
    return _loglinear(curve.times, curve.prices, np.clip(T, lo, hi))


@dataclass(frozen=True)
class DiscountCurve:
    """Collateral discount factors ``P_0(T; e)``; log-linear, flat-rate beyond the last pillar."""

    times: np.ndarray
    dfs: np.ndarray
    rate_id: str = "collateral"
    enforce_monotone: bool = True

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        dfs = np.array(self.dfs, dtype=float)
        if times.shape != dfs.shape or times.ndim != 1:
            raise MarketDataError("discount curve needs matching T and df columns")
        if times.size == 0 or times[0] > 0:
            times = np.concatenate([[0.0], times])
            dfs = np.concatenate([[1.0], dfs])
        if abs(times[0]) > _TIME_TOL or abs(dfs[0] - 1.0) > 1e-14:
            raise MarketDataError("discount curve must start with P(0) = 1")
        if np.any(np.diff(times) <= 0):
            raise MarketDataError("discount pillars must be strictly increasing in T")
        if np.any(~(dfs > 0)):
            raise MarketDataError("discount factors must be positive")
        if self.enforce_monotone and np.any(np.diff(dfs) > 0):
            raise MarketDataError("discount factors must be non-increasing in T")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "dfs", _frozen(dfs))

    @classmethod
    def flat(cls) -> "DiscountCurve":
        return cls([0.0], [1.0])

    def __call__(self, T):
        T = np.asarray(T, float)
        if np.any(T < -_TIME_TOL):
            raise MarketDataError(f"discount lookup before valuation: T={T!r}")
        logs = np.log(self.dfs)
        inside = np.interp(T, self.times, logs)
        if self.times.size > 1:
            tail_rate = (logs[-1] - logs[-2]) / (self.times[-1] - self.times[-2])
        else:
            tail_rate = 0.0
        beyond = logs[-1] + tail_rate * (T - self.times[-1])
        return np.exp(np.where(T > self.times[-1], beyond, inside))[()]


@dataclass(frozen=True)
class VolQuote:
    expiry: float
    contract: str
    t_last: float
    strike: float
    vol: float
    style: str = FUTURE_STYLE
    payment: Optional[float] = None

    def __post_init__(self):
        if not self.vol > 0:
            raise MarketDataError(f"quote {self.contract}@{self.strike}: vol must be positive")
        if not self.strike > 0:
            raise MarketDataError(f"quote {self.contract}: strike must be positive")
        if not self.expiry > 0:
            raise MarketDataError(f"quote {self.contract}: expiry must be positive")
        if self.expiry > self.t_last + _TIME_TOL:
            raise MarketDataError(f"quote {self.contract}: expiry after contract last date")
        if self.style not in (FUTURE_STYLE, EQUITY_STYLE):
            raise MarketDataError(f"quote {self.contract}: unknown style {self.style!r}")

    @property
    def payment_time(self) -> float:
        return self.expiry if self.payment is None else self.payment


@dataclass(frozen=True)
class VolQuoteSet:
    quotes: Tuple[VolQuote, ...]

    def __post_init__(self):
        quotes = tuple(self.quotes)
        seen = set()
        for q in quotes:
            key = (round(q.expiry, 12), q.contract, round(q.strike, 10))
            if key in seen:
                raise MarketDataError(f"duplicate quote {key}")
            seen.add(key)
        object.__setattr__(self, "quotes", quotes)

    def __iter__(self):
        return iter(self.quotes)

    def __len__(self):
        return len(self.quotes)

    def expiries(self) -> List[float]:
        return sorted({q.expiry for q in self.quotes})


def strike_to_delta(K, t, F0, sigma):
    """Premium-excluded Black call delta ``Phi(d1)``."""
    st = sigma * np.sqrt(t)
    return ndtr((np.log(F0 / K) + 0.5 * st * st) / st)


def delta_to_strike(delta, t, F0, sigma):
    """Strike whose premium-excluded Black call delta equals ``delta``."""
    delta = np.asarray(delta, float)
    if np.any((delta <= 0) | (delta >= 1)):
        raise MarketDataError(f"call delta must lie in (0, 1), got {delta!r}")
    if np.any(np.asarray(sigma) <= 0) or np.any(np.asarray(t) <= 0):
        raise MarketDataError("delta conversion needs sigma > 0 and t > 0")
    st = sigma * np.sqrt(t)
    return F0 * np.exp(-st * ndtri(delta) + 0.5 * st * st)


class Market(NamedTuple):
    curve: FuturesCurve
    discount: DiscountCurve
    quotes: VolQuoteSet
    calendars: Dict[str, ContractCalendar]


# ---------------------------------------------------------------------------
# CSV parsing


def _read_csv(path: Path) -> Tuple[Dict[str, str], List[Tuple[int, Dict[str, str]]]]:
    meta: Dict[str, str] = {}
    lines = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                body = stripped.lstrip("#").strip()
                if ":" in body:
                    key, value = body.split(":", 1)
                    meta[key.strip().lower()] = value.strip()
                continue
            lines.append((lineno, line))
    if not lines:
        raise MarketDataError(f"{path.name}: no header row")
    reader = csv.DictReader([ln for _, ln in lines])
    rows = []
    for (lineno, _), row in zip(lines[1:], reader):
        if None in row or any(v is None for v in row.values()):
            raise MarketDataError(f"{path.name}:{lineno}: wrong number of fields")
        rows.append((lineno, {k.strip(): v.strip() for k, v in row.items()}))
    return meta, rows


def _float(path: Path, lineno: int, row: Mapping[str, str], key: str) -> float:
    try:
        return float(row[key])
    except KeyError:
        raise MarketDataError(f"{path.name}: missing column {key!r}") from None
    except ValueError:
        raise MarketDataError(f"{path.name}:{lineno}: field {key!r} is not a number: {row[key]!r}") from None


def _date(path: Path, lineno: int, row: Mapping[str, str], key: str) -> dt.date:
    try:
        return dt.date.fromisoformat(row[key])
    except KeyError:
        raise MarketDataError(f"{path.name}: missing column {key!r}") from None
    except ValueError:
        raise MarketDataError(f"{path.name}:{lineno}: field {key!r} is not an ISO date: {row[key]!r}") from None


def _wrap(path: Path, lineno: int, exc: Exception) -> MarketDataError:
    return MarketDataError(f"{path.name}:{lineno}: {exc}")


def load_futures(path: Path) -> FuturesCurve:
    meta, rows = _read_csv(path)
    vd = meta.get("valuation_date")
    day_count = meta.get("day_count", DAY_COUNT)
    if day_count.replace(" ", "").upper() not in ("ACT/365F", "ACT/365", "ACT/365FIXED"):
        raise MarketDataError(f"{path.name}: unsupported day count {day_count!r}")
    times = [_float(path, n, r, "T") for n, r in rows]
    prices = [_float(path, n, r, "price") for n, r in rows]
    return FuturesCurve(times, prices, dt.date.fromisoformat(vd) if vd else None, DAY_COUNT)


def load_discount(path: Path, enforce_monotone: bool = True) -> DiscountCurve:
    meta, rows = _read_csv(path)
    times = [_float(path, n, r, "T") for n, r in rows]
    dfs = [_float(path, n, r, "df") for n, r in rows]
    return DiscountCurve(times, dfs, meta.get("rate_id", "collateral"), enforce_monotone)


_CALENDAR_FIELDS = ("first_trade", "last_trade", "first_notice", "last_notice",
                    "first_delivery", "last_delivery", "option_expiry")


def load_calendars(path: Path) -> Dict[str, ContractCalendar]:
    _, rows = _read_csv(path)
    out: Dict[str, ContractCalendar] = {}
    for lineno, row in rows:
        dates = {f: _date(path, lineno, row, f) for f in _CALENDAR_FIELDS}
        payment = row.get("option_payment") or None
        if payment:
            dates["option_payment"] = _date(path, lineno, row, "option_payment")
        cid = row.get("id")
        if not cid:
            raise MarketDataError(f"{path.name}:{lineno}: missing contract id")
        if cid in out:
            raise MarketDataError(f"{path.name}:{lineno}: duplicate contract {cid!r}")
        try:
            out[cid] = ContractCalendar(cid, **dates)
        except MarketDataError as exc:
            raise _wrap(path, lineno, exc) from None
    return out


def _time_field(path, lineno, row, key, valuation: Optional[dt.date]) -> Tuple[float, Optional[dt.date]]:
    raw = row.get(key, "")
    try:
        return float(raw), None
    except ValueError:
        pass
    day = _date(path, lineno, row, key)
    if valuation is None:
        raise MarketDataError(f"{path.name}:{lineno}: dated {key!r} needs a valuation_date")
    return year_fraction(valuation, day), day


def load_quotes(path: Path, curve: FuturesCurve, calendars: Mapping[str, ContractCalendar]) -> VolQuoteSet:
    _, rows = _read_csv(path)
    vd = curve.valuation_date
    quotes = []
    for lineno, row in rows:
        expiry, expiry_date = _time_field(path, lineno, row, "expiry", vd)
        contract = row.get("contract", "")
        cal = calendars.get(contract)
        if cal is None:
            raise MarketDataError(f"{path.name}:{lineno}: unknown contract {contract!r}")
        if vd is None:
            raise MarketDataError(f"{path.name}: quotes need a valuation_date in futures.csv")
        t_last = year_fraction(vd, cal.last)
        if cal.option_payment is not None:
            payment = year_fraction(vd, cal.option_payment)
        else:
            if expiry_date is None:
                expiry_date = vd + dt.timedelta(days=int(round(expiry * 365.0)))
            payment = year_fraction(vd, add_business_days(expiry_date, 2))
        vol = _float(path, lineno, row, "vol")
        value = _float(path, lineno, row, "strike_or_delta")
        kind = row.get("strike_type", "strike").lower()
        style = row.get("style", FUTURE_STYLE).lower()
        if not vol > 0:
            raise MarketDataError(f"{path.name}:{lineno}: field 'vol' must be positive, got {vol}")
        try:
            if kind == "delta":
                strike = float(delta_to_strike(value, expiry, float(curve(t_last)), vol))
            elif kind == "strike":
                strike = value
            else:
                raise MarketDataError(f"unknown strike_type {kind!r}")
            quotes.append(VolQuote(expiry, contract, t_last, strike, vol, style, payment))
        except MarketDataError as exc:
            raise _wrap(path, lineno, exc) from None
    try:
        return VolQuoteSet(tuple(quotes))
    except MarketDataError as exc:
        raise MarketDataError(f"{path.name}: {exc}") from None


def load_market(path, enforce_monotone_discount: bool = True) -> Market:
    """Load and validate a market directory (see module docstring for the layout)."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"market directory not found: {root}")
    curve = load_futures(root / "futures.csv")
    discount_path = root / "discount.csv"
    if discount_path.exists():
        discount = load_discount(discount_path, enforce_monotone_discount)
    else:
        discount = DiscountCurve.flat()
    calendars = load_calendars(root / "calendars.csv")
    quotes = load_quotes(root / "quotes.csv", curve, calendars)
    return Market(curve, discount, quotes, calendars)


def write_market(path, curve: FuturesCurve, quotes: Iterable[VolQuote],
                 calendars: Mapping[str, ContractCalendar],
                 discount: Optional[DiscountCurve] = None) -> None:
    """Write a market directory readable by :func:`load_market`.  Strikes are written as absolute."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "futures.csv", "w", encoding="utf-8", newline="") as fh:
        if curve.valuation_date:
            fh.write(f"# valuation_date: {curve.valuation_date.isoformat()}\n")
        fh.write(f"# day_count: {curve.day_count}\n")
        fh.write("T,price\n")
        for T, F in zip(curve.times, curve.prices):
            fh.write(f"{float(T)!r},{float(F)!r}\n")
    if discount is not None:
        with open(root / "discount.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# rate_id: {discount.rate_id}\nT,df\n")
            for T, P in zip(discount.times, discount.dfs):
                fh.write(f"{float(T)!r},{float(P)!r}\n")
    with open(root / "calendars.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("id," + ",".join(_CALENDAR_FIELDS) + ",option_payment\n")
        for cal in calendars.values():
            cells = [cal.id] + [getattr(cal, f).isoformat() for f in _CALENDAR_FIELDS]
            cells.append(cal.option_payment.isoformat() if cal.option_payment else "")
            fh.write(",".join(cells) + "\n")
    with open(root / "quotes.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("expiry,contract,strike_or_delta,strike_type,vol,style\n")
        for q in quotes:
            fh.write(f"{float(q.expiry)!r},{q.contract},{float(q.strike)!r},strike,{float(q.vol)!r},{q.style}\n")
