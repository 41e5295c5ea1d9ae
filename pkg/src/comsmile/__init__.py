"""Commodity futures smile toolkit: mean-reverting local vol, calibration, exotics and SLV."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("comsmile")
except PackageNotFoundError:  # running from a source tree without installation
    __version__ = "0.1.0"

from .black import black_call, black_greeks, implied_vol, local_vol_from_implied
from .calibration import CalibrationConfig, CalibrationReport, calibrate
from .exotics import (CsoQuote, cso_quote_metric, fit_mean_reversion, price_cso_closed_form,
                      price_mco, volatility_drop)
from .localvol import LocalVolSurface
from .market_data import DiscountCurve, FuturesCurve, VolQuote, VolQuoteSet, load_market
from .meanrev import MeanReversion
from .pde import PdeGrid, solve_dupire
from .pricing import price_vanilla_equity_style, price_vanilla_future_style
from .slv import SlvModel, instantaneous_correlation, mc_price_cso, mc_price_vanilla, simulate_paths
from .spot_model import CalibratedSpotModel

__all__ = [
    "__version__", "black_call", "black_greeks", "implied_vol", "local_vol_from_implied",
    "CalibrationConfig", "CalibrationReport", "calibrate", "CsoQuote", "cso_quote_metric",
    "fit_mean_reversion", "price_cso_closed_form", "price_mco", "volatility_drop",
    "LocalVolSurface", "DiscountCurve", "FuturesCurve", "VolQuote", "VolQuoteSet", "load_market",
    "MeanReversion", "PdeGrid", "solve_dupire", "price_vanilla_equity_style",
    "price_vanilla_future_style", "SlvModel", "instantaneous_correlation", "mc_price_cso",
    "mc_price_vanilla", "simulate_paths", "CalibratedSpotModel",
]
