import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from comsmile.market_data import (ContractCalendar, DiscountCurve, FuturesCurve, MarketDataError,
                                  VolQuote, VolQuoteSet, add_business_days, delta_to_strike,
                                  load_market, strike_to_delta, write_market, year_fraction)
from comsmile.synthetic import synthetic_market

D = dt.date


def calendar(**kw):
    base = dict(id="X", first_trade=D(2023, 1, 2), last_trade=D(2024, 3, 20),
                first_notice=D(2024, 3, 18), last_notice=D(2024, 3, 19),
                first_delivery=D(2024, 4, 1), last_delivery=D(2024, 4, 30),
                option_expiry=D(2024, 3, 10))
    base.update(kw)
    return ContractCalendar(**base)


def write(path, text):
    path.write_text(text, encoding="utf-8")


def make_dir(tmp_path, quotes="expiry,contract,strike_or_delta,strike_type,vol,style\n0.2,X,100,strike,0.3,future\n"):
    write(tmp_path / "futures.csv", "# valuation_date: 2024-01-02\nT,price\n0.25,100\n0.5,101\n")
    write(tmp_path / "calendars.csv",
          "id,first_trade,last_trade,first_notice,last_notice,first_delivery,last_delivery,option_expiry\n"
          "X,2023-01-02,2024-04-10,2024-04-08,2024-04-09,2024-04-20,2024-05-20,2024-03-15\n")
    write(tmp_path / "quotes.csv", quotes)
    return tmp_path


def test_load_two_pillar_curve(tmp_path):
    m = load_market(make_dir(tmp_path))
    assert m.curve.times.tolist() == [0.25, 0.5]
    assert m.curve.prices.tolist() == [100.0, 101.0]
    assert m.curve.valuation_date == D(2024, 1, 2)
    assert len(m.quotes) == 1
    q = next(iter(m.quotes))
    assert q.t_last == pytest.approx(year_fraction(D(2024, 1, 2), D(2024, 4, 8)))
    assert float(m.discount(3.0)) == 1.0


def test_negative_vol_rejected(tmp_path):
    make_dir(tmp_path, "expiry,contract,strike_or_delta,strike_type,vol,style\n0.2,X,100,strike,-0.1,future\n")
    with pytest.raises(MarketDataError, match="vol"):
        load_market(tmp_path)


def test_unknown_contract_rejected(tmp_path):
    make_dir(tmp_path, "expiry,contract,strike_or_delta,strike_type,vol,style\n0.2,Y,100,strike,0.3,future\n")
    with pytest.raises(MarketDataError, match="unknown contract"):
        load_market(tmp_path)


def test_bad_number_reports_row(tmp_path):
    make_dir(tmp_path, "expiry,contract,strike_or_delta,strike_type,vol,style\n0.2,X,abc,strike,0.3,future\n")
    with pytest.raises(MarketDataError, match=r"quotes.csv:\d"):
        load_market(tmp_path)


def test_missing_directory():
    with pytest.raises(FileNotFoundError):
        load_market("/nonexistent/market")


def test_calendar_date_order():
    with pytest.raises(MarketDataError):
        calendar(option_expiry=D(2024, 3, 19))  # after first notice
    with pytest.raises(MarketDataError):
        calendar(first_delivery=D(2024, 5, 1), last_delivery=D(2024, 4, 1))
    assert calendar().last == D(2024, 3, 18)
    assert calendar().payment == D(2024, 3, 12)


def test_business_days_skip_weekend():
    assert add_business_days(D(2024, 1, 5), 2) == D(2024, 1, 9)


def test_futures_interp_examples():
    c = FuturesCurve([0.25, 0.75], [100.0, 104.0])
    assert float(c(0.5)) == pytest.approx(100 * 1.04 ** 0.5, rel=1e-12)
    assert float(c(0.25)) == 100.0
    flat = FuturesCurve([0.1, 1.0, 2.0], [100.0] * 3)
    assert float(flat(1.7)) == pytest.approx(100.0)
    with pytest.raises(MarketDataError):
        c(1.0)


@given(T=st.floats(0.25, 0.75))
def test_futures_interp_between_pillars(T):
    c = FuturesCurve([0.25, 0.75], [100.0, 104.0])
    assert 100.0 - 1e-9 <= float(c(T)) <= 104.0 + 1e-9


def test_discount_curve_rules():
    d = DiscountCurve([1.0, 2.0], [0.97, 0.94])
    assert float(d(0.0)) == 1.0
    assert float(d(1.0)) == pytest.approx(0.97)
    assert float(d(3.0)) == pytest.approx(0.94 * 0.94 / 0.97)
    with pytest.raises(MarketDataError):
        DiscountCurve([1.0, 2.0], [0.97, 0.98])
    assert float(DiscountCurve([1.0, 2.0], [0.97, 0.98], enforce_monotone=False)(2.0)) == pytest.approx(0.98)


def test_quote_invariants():
    with pytest.raises(MarketDataError):
        VolQuote(0.5, "X", 0.4, 100.0, 0.3)
    with pytest.raises(MarketDataError):
        VolQuote(0.5, "X", 0.6, -1.0, 0.3)
    q = VolQuote(0.5, "X", 0.6, 100.0, 0.3)
    with pytest.raises(MarketDataError, match="duplicate"):
        VolQuoteSet((q, q))


def test_delta_examples():
    st_ = 0.3 * math.sqrt(0.5)
    from scipy.stats import norm
    assert delta_to_strike(norm.cdf(st_ / 2), 0.5, 100.0, 0.3) == pytest.approx(100.0, rel=1e-12)
    assert delta_to_strike(0.5, 1e-12, 100.0, 0.3) == pytest.approx(100.0, rel=1e-6)
    with pytest.raises(MarketDataError):
        delta_to_strike(1.2, 0.5, 100.0, 0.3)


@given(K=st.floats(50, 200), t=st.floats(0.05, 3), s=st.floats(0.05, 1.0))
def test_strike_delta_round_trip(K, t, s):
    d = float(strike_to_delta(K, t, 100.0, s))
    # a delta within 1e-6 of 0 or 1 no longer carries ten digits of strike
    if not 1e-6 < d < 1 - 1e-6:
        return
    assert float(delta_to_strike(d, t, 100.0, s)) == pytest.approx(K, rel=1e-10)


def test_delta_quotes_are_converted(tmp_path):
    make_dir(tmp_path, "expiry,contract,strike_or_delta,strike_type,vol,style\n0.2,X,0.25,delta,0.3,future\n")
    m = load_market(tmp_path)
    q = next(iter(m.quotes))
    F0 = float(m.curve(q.t_last))
    assert float(strike_to_delta(q.strike, q.expiry, F0, 0.3)) == pytest.approx(0.25, abs=1e-12)


def test_write_and_reload_round_trip(tmp_path, small_market):
    m = small_market
    write_market(tmp_path, m.curve, m.quotes, m.calendars, m.discount)
    back = load_market(tmp_path)
    np.testing.assert_array_equal(back.curve.prices, m.curve.prices)
    assert len(back.quotes) == len(m.quotes)
    for a, b in zip(back.quotes, m.quotes):
        assert a.strike == b.strike and a.vol == b.vol and a.contract == b.contract
        assert a.t_last == pytest.approx(b.t_last, abs=1e-12)
