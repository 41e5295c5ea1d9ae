import csv
import json
import subprocess
import sys

import pytest

from comsmile.cli import EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, main
from comsmile.spot_model import CalibratedSpotModel
from comsmile.synthetic import synthetic_cso_quotes, write_fixture

FAST = ["--n-k", "600"]


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory, small_market):
    root = tmp_path_factory.mktemp("cli")
    write_fixture(root / "mkt", small_market, synthetic_cso_quotes(small_market, n_pairs=3))
    return root


@pytest.fixture(scope="session")
def model_path(fixture_dir):
    out = fixture_dir / "model.json"
    code = main(["calibrate", "--market", str(fixture_dir / "mkt"), "--a", "0.5", "--out", str(out)]
                + FAST)
    assert code == EXIT_OK
    return out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_calibrate_writes_model_report_and_manifest(model_path, fixture_dir):
    report = rows(fixture_dir / "report.csv")
    assert len(report) - 1 <= 30
    assert float(report[-1]["max_bp"]) < 0.1
    model = CalibratedSpotModel.load(model_path)
    assert model.a.rates == (0.5,)
    man = json.loads((fixture_dir / "model.json.manifest.json").read_text())
    assert man["command"] == "calibrate" and man["version"]
    assert man["settings"]["a"] == "0.5" and man["settings"]["n_k"] == 600
    assert len(man["inputs"]["market"]["sha256"]) == 64


def test_missing_market_is_input_error(tmp_path, capsys):
    code = main(["calibrate", "--market", str(tmp_path / "nope"), "--out", str(tmp_path / "m.json")])
    assert code == EXIT_INPUT
    assert "not found" in capsys.readouterr().err


def test_forced_non_convergence_keeps_artifacts(fixture_dir, tmp_path):
    out = tmp_path / "m.json"
    code = main(["calibrate", "--market", str(fixture_dir / "mkt"), "--a", "0.5", "--out", str(out),
                 "--max-iter", "1"] + FAST)
    assert code == EXIT_NOT_CONVERGED
    assert out.exists() and (tmp_path / "report.csv").exists()


def test_config_precedence(fixture_dir, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('a = "0.5"\n[calibrate]\nmax_iter = 1\nn_k = 600\n')
    base = ["calibrate", "--market", str(fixture_dir / "mkt"), "--config", str(cfg)]
    assert main(base + ["--out", str(tmp_path / "a.json")]) == EXIT_NOT_CONVERGED
    assert main(base + ["--out", str(tmp_path / "b.json"), "--max-iter", "50"]) == EXIT_OK
    man = json.loads((tmp_path / "b.json.manifest.json").read_text())
    assert man["settings"]["max_iter"] == 50 and man["settings"]["n_k"] == 600
    cfg.write_text("bogus = 1\n")
    assert main(base + ["--out", str(tmp_path / "c.json")]) == EXIT_INPUT


def test_price_zero_strike_is_forward(model_path, fixture_dir, tmp_path):
    model = CalibratedSpotModel.load(model_path)
    trades = tmp_path / "trades.csv"
    trades.write_text("trade_type,expiry,contract,strike,style\n"
                      "vanilla,C02,C02,0,future\n"
                      "vanilla,C02,C02,80,equity\n"
                      "mco,C01,C03,80,future\n")
    out = tmp_path / "prices.csv"
    assert main(["price", "--model", str(model_path), "--market", str(fixture_dir / "mkt"),
                 "--trades", str(trades), "--out", str(out)]) == EXIT_OK
    got = rows(out)
    assert float(got[0]["price"]) == pytest.approx(float(got[0]["forward"]), rel=1e-12)
    assert got[0]["implied_vol"] == ""
    assert 0.05 < float(got[1]["implied_vol"]) < 1.0
    assert got[2]["trade_type"] == "mco"
    assert (tmp_path / "prices.csv.manifest.json").exists()


def test_price_rejects_unknown_trade(model_path, fixture_dir, tmp_path):
    trades = tmp_path / "trades.csv"
    trades.write_text("trade_type,expiry,contract,strike,style\nswaption,C02,C02,80,future\n")
    assert main(["price", "--model", str(model_path), "--market", str(fixture_dir / "mkt"),
                 "--trades", str(trades), "--out", str(tmp_path / "p.csv")]) == EXIT_INPUT


def test_schema_mismatch(fixture_dir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema": "something-else"}')
    trades = tmp_path / "t.csv"
    trades.write_text("trade_type,expiry,contract,strike,style\n")
    assert main(["price", "--model", str(bad), "--market", str(fixture_dir / "mkt"),
                 "--trades", str(trades), "--out", str(tmp_path / "p.csv")]) == EXIT_INPUT


def test_fit_a_recovers_generating_value(fixture_dir, tmp_path):
    out = tmp_path / "fit.json"
    assert main(["fit-a", "--market", str(fixture_dir / "mkt"), "--cso", str(fixture_dir / "mkt" / "cso_quotes.csv"),
                 "--out", str(out), "--a-grid", "0.25,0.5,0.75"] + FAST) == EXIT_OK
    fit = json.loads(out.read_text())
    assert 0.45 <= fit["a"] <= 0.55
    drops = rows(tmp_path / "drops.csv")
    assert len(drops) == 9


def test_simulate_is_deterministic(model_path, fixture_dir, tmp_path):
    outs = []
    for name in ("one", "two"):
        d = tmp_path / name
        assert main(["simulate", "--model", str(model_path), "--market", str(fixture_dir / "mkt"),
                     "--out-dir", str(d), "--xi", "0", "--seed", "7", "--paths", "5000"]) == EXIT_OK
        outs.append(d)
    for f in ("diagnostics.csv", "terminal.csv", "gyongy.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    diag = rows(outs[0] / "diagnostics.csv")
    assert all(float(r["mean_v2"]) == 1.0 for r in diag)
    assert json.loads((outs[0] / "manifest.json").read_text())["settings"]["seed"] == 7


def test_implied_vol_command(capsys):
    assert main(["implied-vol", "--price", "7.965567455405804", "--forward", "100", "--expiry", "1",
                 "--strike", "100"]) == EXIT_OK
    assert float(capsys.readouterr().out) == pytest.approx(0.2, abs=1e-10)
    assert main(["implied-vol", "--price", "150", "--forward", "100", "--expiry", "1",
                 "--strike", "100"]) == EXIT_INPUT


def test_help_runs_as_module():
    res = subprocess.run([sys.executable, "-m", "comsmile.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("calibrate", "price", "fit-a", "simulate", "implied-vol"):
        assert cmd in res.stdout
