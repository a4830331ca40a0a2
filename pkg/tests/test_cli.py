import json
import math

import numpy as np
import pytest

from movact.cli import (EXIT_CONFIG, EXIT_OK, OUTPUT_ENV, fit_decay, main, read_csv_columns,
                        run_experiment)
from movact.errors import ConfigError, PreconditionError

SMALL_RHC = ["--set", "h=0.05", "--set", "T=0.1", "--set", "delta=0.05", "--set", "max_iter=20",
             "--t-final", "0.2"]


def test_fit_decay_exact_exponential():
    t = np.linspace(0, 2, 40)
    C, rate = fit_decay((t, 1.5 * np.exp(-2 * t)))
    assert rate == pytest.approx(2.0, abs=1e-10)
    assert C == pytest.approx(1.5, rel=1e-10)


def test_fit_decay_constant_is_zero():
    _, rate = fit_decay((np.linspace(0, 1, 20), np.full(20, 3.0)))
    assert abs(rate) < 1e-12


def test_fit_decay_preconditions():
    with pytest.raises(PreconditionError):
        fit_decay((np.arange(9.0), np.ones(9)))
    v = np.ones(20)
    v[4] = 0.0
    with pytest.raises(PreconditionError):
        fit_decay((np.arange(20.0), v))


def test_fit_decay_from_csv(tmp_path):
    p = tmp_path / "traj.csv"
    t = np.linspace(0, 1, 11)
    p.write_text("t,l2_norm\n" + "".join(f"{float(a)!r},{math.exp(-3 * a)!r}\n" for a in t))
    _, rate = fit_decay(str(p))
    assert rate == pytest.approx(3.0, abs=1e-10)
    assert main(["fit-decay", str(p)]) == EXIT_OK


def test_delta_larger_than_horizon_is_config_error(tmp_path, capsys):
    code = main(["rhc", "--out", str(tmp_path), "--set", "T=0.5", "--set", "delta=1.0"])
    assert code == EXIT_CONFIG
    assert "delta" in capsys.readouterr().err


def test_unknown_key_is_config_error(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--set", "bogus=1"]) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        run_experiment("example2", {"bogus": 1}, root=tmp_path)
    with pytest.raises(ConfigError):
        run_experiment("nope", root=tmp_path)


def test_config_file(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('h = 0.05\nt_final = 0.1\ndt = 0.01\nreaction = 1.0\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    bad = tmp_path / "bad.toml"
    bad.write_text("h = = 1")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_rhc_runs_are_deterministic(tmp_path, monkeypatch):
    outs = []
    for sub in ("a", "b"):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / sub))
        manifest, out = run_experiment("example2", {"h": 0.05, "T": 0.1, "delta": 0.05, "max_iter": 20,
                                                    "t_final": 0.2})
        outs.append((manifest, out))
    (ma, a), (mb, b) = outs
    assert ma.hash == mb.hash
    assert str(a).startswith(str(tmp_path / "a"))
    name = "moving_beta0.01.csv"
    assert (a / name).read_bytes() == (b / name).read_bytes()
    cols = read_csv_columns(a / name)
    assert list(cols) == ["t", "l2_norm", "c", "abs_u", "eta"]
    assert np.all(np.diff(cols["t"]) > 0)
    assert cols["t"][-1] == pytest.approx(0.2)
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["hash"] == ma.hash


def test_static_mode_cli(tmp_path, capsys):
    code = main(["run", "example2", "--mode", "static", "--M", "1", "--out", str(tmp_path), "--json",
                 *SMALL_RHC])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    s = summary["static_beta0.01"]
    # the single centred actuator cannot see the second mode
    assert s["max_abs_u"] <= 1e-6


def test_stability_check_output(tmp_path, capsys):
    assert main(["stability-check", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "verdict: NOT_STABILIZABLE" in out
    assert "index 2" in out
    verdict = json.loads(next(tmp_path.glob("*/verdict.json")).read_text())
    assert verdict["verdict"] == "NOT_STABILIZABLE"
    assert verdict["eigenvalue"] == pytest.approx(4 * math.pi ** 2 * 0.1 - 5, rel=1e-12)


def test_stability_check_off_centre(tmp_path, capsys):
    assert main(["stability-check", "--center", "0.31", "--out", str(tmp_path)]) == EXIT_OK
    assert "verdict: STABILIZABLE" in capsys.readouterr().out


def test_inadmissible_centre_is_precondition_error(tmp_path):
    assert main(["stability-check", "--center", "0.01", "--out", str(tmp_path)]) == 3


def test_simulate_example2(tmp_path, capsys):
    code = main(["simulate", "--out", str(tmp_path), "--h", "0.02", "--t-final", "1", "--json"])
    assert code == EXIT_OK
    s = json.loads(capsys.readouterr().out)
    assert -s["fit_rate"] == pytest.approx(5 - 4 * math.pi ** 2 * 0.1, rel=0.05)
