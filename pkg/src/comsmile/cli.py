"""Command-line front end: calibrate, price, fit-a, simulate, implied-vol.

Exit codes: 0 success, 1 input/output or validation error, 2 calibration did
not converge (best-effort artifacts are still written), 3 numerical failure.
Settings resolve as command-line flags over the ``--config`` TOML file over
built-in defaults; every run writes a manifest with the resolved settings,
input hashes and package version.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .black import black_vega, implied_vol
from .calibration import CalibrationConfig, CalibrationError, calibrate
from .exotics import A_GRID, CsoQuote, fit_mean_reversion, price_mco
from .market_data import (EQUITY_STYLE, FUTURE_STYLE, MarketDataError, load_market, year_fraction)
from .meanrev import MeanReversion
from .pde import PdeError
from .pricing import implied_futures_vol
from .slv import LeverageEstimator, SimulationConfig, SlvError, SlvModel, simulate_paths
from .spot_model import CalibratedSpotModel

log = logging.getLogger("comsmile")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULTS: Dict[str, Dict[str, object]] = {
    "calibrate": {"a": "0.0", "max_iter": 50, "aa_memory": 5, "mode": "level_skew",
                  "tol_bp": 0.01, "threshold_bp": 0.1, "time_interp": "flat", "n_k": 2000},
    "price": {},
    "fit-a": {"a_grid": ",".join(repr(float(a)) for a in A_GRID), "refine": True,
              "max_iter": 50, "aa_memory": 5, "tol_bp": 0.05, "n_k": 2000},
    "simulate": {"xi": 0.0, "rho_v": 0.0, "rho": "1.0", "paths": 100000, "seed": 0,
                 "dt": 1.0 / 365.0, "quantiles": "0.01,0.05,0.25,0.5,0.75,0.95,0.99"},
    "implied-vol": {"df": 1.0},
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# -- helpers -----------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(child.relative_to(path).as_posix().encode())
            h.update(child.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _resolve(command: str, args: argparse.Namespace) -> Dict[str, object]:
    """Flags over config file over defaults."""
    resolved = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise CliError(f"{path}: {exc}") from None
        section = doc.get(command, {})
        top = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        for src in (top, section):
            for key, value in src.items():
                key = key.replace("-", "_")
                if key not in resolved:
                    raise CliError(f"{path}: unknown setting {key!r} for {command}")
                resolved[key] = value
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(path: Path, command: str, settings: dict, inputs: Dict[str, Path],
                    outputs: Iterable[Path]) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "settings": {k: settings[k] for k in sorted(settings)},
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in sorted(inputs.items())},
        "outputs": sorted(str(p) for p in outputs),
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(out: Path) -> Path:
    return out if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _read_csv(path: Path) -> List[dict]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    return list(csv.DictReader(lines))


def _parse_mean_reversion(text: str) -> MeanReversion:
    """``"0.5"`` or ``"0:0.8,1:0.4"`` (break:rate pairs)."""
    text = str(text)
    try:
        if ":" not in text:
            return MeanReversion.constant(float(text))
        pairs = [p.split(":") for p in text.split(",")]
        return MeanReversion(tuple(float(b) for b, _ in pairs), tuple(float(r) for _, r in pairs))
    except ValueError as exc:
        raise CliError(f"bad mean reversion {text!r}: {exc}") from None


def _parse_floats(text, what: str) -> List[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad {what} list {text!r}") from None


def _time(value: str, market, what: str) -> float:
    """Year fraction, ISO date, or a contract id (its option expiry)."""
    try:
        return float(value)
    except ValueError:
        pass
    cal = market.calendars.get(value)
    try:
        day = cal.option_expiry if cal is not None else dt.date.fromisoformat(value)
    except ValueError:
        raise CliError(f"bad {what} {value!r}") from None
    vd = market.curve.valuation_date
    if vd is None:
        raise CliError(f"dated {what} needs a valuation_date in futures.csv")
    return year_fraction(vd, day)


def _contract_time(market, cid: str) -> float:
    cal = market.calendars.get(cid)
    if cal is None:
        raise CliError(f"unknown contract {cid!r}")
    if market.curve.valuation_date is None:
        raise CliError("contracts need a valuation_date in futures.csv")
    return year_fraction(market.curve.valuation_date, cal.last)


def _load_model(path: Path) -> CalibratedSpotModel:
    try:
        return CalibratedSpotModel.load(path)
    except FileNotFoundError:
        raise CliError(f"model file not found: {path}") from None
    except (ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _calibration_config(s: dict) -> CalibrationConfig:
    fields = {f.name for f in dataclasses.fields(CalibrationConfig)}
    return CalibrationConfig(**{k: v for k, v in s.items() if k in fields})


# -- commands ----------------------------------------------------------------


def cmd_calibrate(args) -> int:
    s = _resolve("calibrate", args)
    market = load_market(args.market)
    a = _parse_mean_reversion(s["a"])
    config = _calibration_config(s)
    model, report = calibrate(market.quotes, market.curve, market.discount, a, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    report_path = Path(args.report) if args.report else out.with_name("report.csv")
    _write_csv(report_path, ["iteration", "max_bp", "rms_bp"],
               ([r.iteration, r.max_bp, r.rms_bp] for r in report.history))
    outputs = [out, report_path]
    if args.dump_surface:
        surf = Path(args.dump_surface)
        _write_csv(surf, ["t", "k", "eta"],
                   ([t, k, v] for t, ks, vs in zip(model.eta.times, model.eta.strikes, model.eta.values)
                    for k, v in zip(ks, vs)))
        outputs.append(surf)
    _write_manifest(_manifest_path(out), "calibrate", s, {"market": Path(args.market)}, outputs)
    status = "converged" if report.converged else "did not converge"
    print(f"calibration {status}: max error {report.max_bp:.6g} bp after "
          f"{report.iterations} iterations (best {report.best_iteration})")
    for t in report.flagged_pillars:
        print(f"warning: ATM quote at the edge of the strike range at t={t!r}", file=sys.stderr)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_price(args) -> int:
    s = _resolve("price", args)
    model = _load_model(Path(args.model))
    market = load_market(args.market)
    rows = []
    for n, trade in enumerate(_read_csv(Path(args.trades)), start=2):
        try:
            kind = trade.get("trade_type", "vanilla").strip().lower()
            if kind not in ("vanilla", "mco"):
                raise CliError(f"unsupported trade type {kind!r}")
            style = trade.get("style", FUTURE_STYLE).strip().lower() or FUTURE_STYLE
            if style not in (FUTURE_STYLE, EQUITY_STYLE):
                raise CliError(f"unknown margining style {style!r}")
            t = _time(trade["expiry"].strip(), market, "expiry")
            T = _contract_time(market, trade["contract"].strip())
            K = float(trade["strike"])
            price = float(price_mco(model, t, T, K, style, market.discount))
        except KeyError as exc:
            raise CliError(f"{args.trades}:{n}: missing column {exc}") from None
        except ValueError as exc:
            raise CliError(f"{args.trades}:{n}: {exc}") from None
        F0 = float(model.curve(T))
        df = float(market.discount(t)) if style == EQUITY_STYLE else 1.0
        try:
            vol = float(implied_futures_vol(price, F0, t, K, df)) if K > 0 and t > 0 else math.nan
        except ValueError:
            vol = math.nan
        rows.append([kind, t, trade["contract"].strip(), K, style, F0, price, vol])
    out = Path(args.out)
    _write_csv(out, ["trade_type", "expiry", "contract", "strike", "style", "forward", "price",
                     "implied_vol"], rows)
    _write_manifest(_manifest_path(out), "price", s,
                    {"model": Path(args.model), "market": Path(args.market),
                     "trades": Path(args.trades)}, [out])
    return EXIT_OK


def _load_cso(path: Path, market) -> List[CsoQuote]:
    quotes = []
    for n, row in enumerate(_read_csv(path), start=2):
        try:
            near, far = row["near"].strip(), row["far"].strip()
            t_e = _time(row["expiry"].strip(), market, "expiry")
            cal_far = market.calendars.get(far)
            far_exp = (year_fraction(market.curve.valuation_date, cal_far.option_expiry)
                       if cal_far is not None and market.curve.valuation_date else None)
            opt = {k: float(row[k]) for k in ("price", "near_vol", "far_vol", "drop")
                   if (row.get(k) or "").strip()}
            quotes.append(CsoQuote(t_e, _contract_time(market, near), _contract_time(market, far),
                                   float(row["strike"]), far_expiry=far_exp,
                                   label=f"{near}/{far}", **opt))
        except KeyError as exc:
            raise CliError(f"{path}:{n}: missing column {exc}") from None
        except ValueError as exc:
            raise CliError(f"{path}:{n}: {exc}") from None
    if not quotes:
        raise CliError(f"{path}: no CSO quotes")
    return quotes


def cmd_fit_a(args) -> int:
    s = _resolve("fit-a", args)
    market = load_market(args.market)
    cso = _load_cso(Path(args.cso), market)
    grid = _parse_floats(s["a_grid"], "a-grid")
    config = _calibration_config(s)
    try:
        fit = fit_mean_reversion(cso, market.quotes, market.curve, market.discount, config,
                                 grid, bool(s["refine"]))
    except RuntimeError as exc:
        raise CliError(str(exc), EXIT_NUMERICAL) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"a": fit.a, "objective": fit.objective,
           "trials": [{"a": a, "objective": v} for a, v in fit.trials.items()],
           "skipped": {repr(a): msg for a, msg in fit.skipped.items()}}
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    drops_path = Path(args.drops) if args.drops else out.with_name("drops.csv")
    trial_as = list(fit.drops)
    header = ["expiry", "label", "strike", "market_drop"] + [f"model_drop_a={a!r}" for a in trial_as]
    _write_csv(drops_path, header,
               ([q.expiry, q.label, q.strike, fit.market_drops[i]]
                + [fit.drops[a][i] for a in trial_as] for i, q in enumerate(cso)))
    _write_manifest(_manifest_path(out), "fit-a", s,
                    {"market": Path(args.market), "cso": Path(args.cso)}, [out, drops_path])
    print(f"fitted mean reversion a={fit.a!r} (objective {fit.objective:.6g})")
    return EXIT_OK


def _parse_rho(text) -> tuple:
    text = str(text)
    if ":" not in text:
        return (0.0,), (float(text),)
    pairs = sorted((float(t), float(r)) for t, r in (p.split(":") for p in text.split(",")))
    return tuple(t for t, _ in pairs), tuple(r for _, r in pairs)


def cmd_simulate(args) -> int:
    s = _resolve("simulate", args)
    model = _load_model(Path(args.model))
    market = load_market(args.market)
    try:
        rho_t, rho_v = _parse_rho(s["rho"])
    except ValueError:
        raise CliError(f"bad rho specification {s['rho']!r}") from None
    slv = SlvModel(model, float(s["xi"]), float(s["rho_v"]), rho_t, rho_v,
                   SimulationConfig(dt_max=float(s["dt"])))
    quotes = [q for q in market.quotes if q.expiry <= model.horizon + 1e-10]
    if not quotes:
        raise CliError("no quotes within the model horizon")
    pillars = sorted({q.t_last for q in quotes})
    times = sorted({q.expiry for q in quotes})
    ens = simulate_paths(slv, pillars, times[-1], int(s["paths"]), int(s["seed"]), times,
                         LeverageEstimator())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = ens.n_paths

    diag = []
    for i, t in enumerate(ens.times):
        v2 = ens.v2[i]
        for j, T in enumerate(ens.pillars):
            F = ens.futures.get((i, j))
            if F is None:
                continue
            diag.append([t, T, v2.mean(), v2.std(ddof=1) / math.sqrt(n),
                         F.mean() - ens.forwards[j], F.std(ddof=1) / math.sqrt(n)])
    _write_csv(out / "diagnostics.csv",
               ["t", "pillar", "mean_v2", "v2_se", "martingale_error", "martingale_se"], diag)

    qs = _parse_floats(s["quantiles"], "quantile")
    term = []
    for q in quotes:
        F = ens.values(q.expiry, q.t_last)
        term.append([q.contract, q.expiry, q.t_last, F.mean(), F.std(ddof=1)]
                    + list(np.quantile(F, qs)))
    seen, terminal = set(), []
    for row in term:
        if (row[0], row[1]) not in seen:
            seen.add((row[0], row[1]))
            terminal.append(row)
    _write_csv(out / "terminal.csv", ["contract", "t", "pillar", "mean", "std"]
               + [f"q{q!r}" for q in qs], terminal)

    gaps = []
    for q in quotes:
        F = ens.values(q.expiry, q.t_last)
        pay = np.maximum(F - q.strike, 0.0)
        price, se = pay.mean(), pay.std(ddof=1) / math.sqrt(n)
        F0 = float(model.curve(q.t_last))
        pde = float(price_mco(model, q.expiry, q.t_last, q.strike))
        try:
            v_pde = float(implied_futures_vol(pde, F0, q.expiry, q.strike))
            v_mc = float(implied_futures_vol(price, F0, q.expiry, q.strike))
            se_vol = se / (F0 * float(black_vega(q.expiry, q.strike / F0, v_pde)))
        except ValueError:
            v_pde = v_mc = se_vol = math.nan
        gaps.append([q.expiry, q.contract, q.strike, pde, price, se, v_pde, v_mc,
                     (v_mc - v_pde) * 1e4, se_vol * 1e4])
    _write_csv(out / "gyongy.csv", ["expiry", "contract", "strike", "pde_price", "mc_price",
                                    "mc_se", "pde_vol", "mc_vol", "gap_bp", "se_bp"], gaps)
    outputs = [out / "diagnostics.csv", out / "terminal.csv", out / "gyongy.csv"]
    _write_manifest(out / "manifest.json", "simulate", s,
                    {"model": Path(args.model), "market": Path(args.market)}, outputs)
    return EXIT_OK


def cmd_implied_vol(args) -> int:
    s = _resolve("implied-vol", args)
    df = float(s["df"])
    try:
        vol = implied_vol(args.price / (df * args.forward), args.expiry, args.strike / args.forward)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(repr(float(vol)))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comsmile", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit local vol to a market directory")
    c.add_argument("--market", required=True, help="directory with futures/calendars/quotes CSVs")
    c.add_argument("--out", required=True, help="model JSON to write")
    c.add_argument("--report", help="convergence CSV (default: report.csv next to --out)")
    c.add_argument("--dump-surface", help="write the calibrated local-vol nodes to this CSV")
    c.add_argument("--config", help="TOML settings file")
    c.add_argument("--a", help="mean reversion: a constant or break:rate pairs")
    c.add_argument("--max-iter", type=int)
    c.add_argument("--aa-memory", type=int, help="Anderson memory (0 = plain fixed point)")
    c.add_argument("--mode", choices=("level_skew", "level"))
    c.add_argument("--tol-bp", type=float, help="stop once the max error is below this")
    c.add_argument("--threshold-bp", type=float, help="convergence threshold for the exit code")
    c.add_argument("--time-interp", choices=("flat", "linear_variance"))
    c.add_argument("--n-k", type=int, help="PDE strike nodes")
    c.set_defaults(func=cmd_calibrate)

    c = sub.add_parser("price", help="price vanilla and mid-curve trades")
    c.add_argument("--model", required=True)
    c.add_argument("--market", required=True, help="market directory (calendars, discount)")
    c.add_argument("--trades", required=True,
                   help="CSV: trade_type,expiry,contract,strike,style (expiry: years, ISO date or contract id)")
    c.add_argument("--out", required=True)
    c.add_argument("--config", help="TOML settings file")
    c.set_defaults(func=cmd_price)

    c = sub.add_parser("fit-a", help="fit constant mean reversion to calendar spread options")
    c.add_argument("--market", required=True)
    c.add_argument("--cso", required=True, help="CSV: expiry,near,far,strike and price or drop")
    c.add_argument("--out", required=True, help="fit summary JSON")
    c.add_argument("--drops", help="drop-curve CSV (default: drops.csv next to --out)")
    c.add_argument("--config", help="TOML settings file")
    c.add_argument("--a-grid", help="comma-separated trial values")
    c.add_argument("--refine", action=argparse.BooleanOptionalAction, default=None)
    c.add_argument("--max-iter", type=int)
    c.add_argument("--aa-memory", type=int)
    c.add_argument("--tol-bp", type=float)
    c.add_argument("--n-k", type=int)
    c.set_defaults(func=cmd_fit_a)

    c = sub.add_parser("simulate", help="stochastic local vol Monte Carlo diagnostics")
    c.add_argument("--model", required=True)
    c.add_argument("--market", required=True, help="quotes define pillars and checks")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--config", help="TOML settings file")
    c.add_argument("--xi", type=float, help="vol-of-vol")
    c.add_argument("--rho-v", type=float, help="spot-vol correlation")
    c.add_argument("--rho", help="curve loading: a constant or T:rho pairs")
    c.add_argument("--paths", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--dt", type=float, help="max time step in years")
    c.add_argument("--quantiles", help="comma-separated quantile levels for terminal.csv")
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("implied-vol", help="Black implied vol of a futures call price")
    c.add_argument("--price", type=float, required=True)
    c.add_argument("--forward", type=float, required=True)
    c.add_argument("--expiry", type=float, required=True, help="years")
    c.add_argument("--strike", type=float, required=True)
    c.add_argument("--df", type=float, help="discount factor for equity-style premiums")
    c.add_argument("--config", help="TOML settings file")
    c.set_defaults(func=cmd_implied_vol)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (MarketDataError, SlvError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CalibrationError, PdeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
