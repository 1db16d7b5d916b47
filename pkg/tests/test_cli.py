import io
import json
import subprocess
import sys

import pytest

from payforward.cli import OUT_ENV, run
from payforward.search import read_csv


def call(*argv):
    buf = io.StringIO()
    code = run(list(argv), stdout=buf)
    return code, buf.getvalue()


@pytest.fixture(autouse=True)
def _no_env_out(monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)


def test_min_w():
    code, out = call("min-w", "--p", "0.44", "--d", "8", "--variant", "immediate")
    assert code == 0
    assert float(out) == pytest.approx(0.132, abs=0.01)
    assert len(out.strip().split(".")[1]) == 6


def test_bounds_at_half():
    code, out = call("bounds", "--p", "0.5")
    assert code == 0
    assert "case1_advantage: 0.000000" in out.splitlines()
    assert "case2_advantage: 0.000000" in out.splitlines()


def test_pne_check():
    code, out = call("pne-check", "--p", "0.45", "--w", "0.225")
    assert code == 0
    assert out.splitlines() == ["deviation_payoff: 0.915542", "compliant_payoff: 0.775000",
                                "equilibrium_supporting: false"]


@pytest.mark.parametrize(
    "argv,flag",
    [(["min-w", "--p", "1.5"], "--p"), (["solve", "--p", "0.3", "--d", "0"], "--d"),
     (["solve", "--p", "0.3", "--w", "-1"], "--w"), (["bounds", "--p", "0.7"], "--p"),
     (["solve", "--p", "0.3", "--variant", "lazy"], "--variant"),
     (["simulate", "--p", "0.3", "--phases", "0"], "--phases"), (["min-w", "--p", "x"], "--p")],
)
def test_usage_errors_name_flag(argv, flag, capsys):
    code, _ = call(*argv)
    assert code == 2
    assert flag in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert call("solve", "--p", "0.3", "--bogus")[0] == 2
    assert "--bogus" in capsys.readouterr().err


def test_domain_error():
    err = io.StringIO()
    code = run(["min-w", "--p", "0.6"], stdout=io.StringIO(), stderr=err)
    assert code == 1
    assert "no compliance" in err.getvalue()


def test_solve_json_sorted():
    code, out = call("solve", "--p", "0.3", "--w", "0", "--d", "4", "--json")
    assert code == 0
    data = json.loads(out)
    assert list(data) == sorted(data)
    assert data["g_star"] == pytest.approx(0.3, abs=1e-6)
    assert data["frontier_optimal"] is True
    assert data["policy"]["(1,0,0)"] == "settle"


def test_solve_text():
    code, out = call("solve", "--p", "0.45", "--w", "0")
    assert code == 0 and "frontier_optimal: False" in out and "policy:" in out


def test_curve_files_and_determinism(tmp_path):
    argv = ["curve", "--variant", "immediate", "--d", "6", "--p-from", "0.43", "--p-to", "0.45", "--out"]
    a, b = tmp_path / "a", tmp_path / "b"
    code, out = call(*argv, str(a))
    assert code == 0
    assert call(*argv, str(b))[0] == 0
    name = "curve_immediate_uniform_d6.csv"
    assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / name).read_text() == out
    rows = read_csv(out)
    assert [p for p, _ in rows] == [0.43, 0.44, 0.45]
    manifest = json.loads((a / "curve_immediate_uniform_d6.manifest.json").read_text())
    assert manifest["subcommand"] == "curve"
    assert manifest["parameters"]["d"] == 6
    assert manifest["outputs"] == [str(a / name)]
    assert manifest["version"] and manifest["wall_seconds"] >= 0


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert call("pne-check", "--p", "0.44", "--w", "0.132")[0] == 0
    assert (tmp_path / "pne_check.txt").exists()
    assert (tmp_path / "pne_check.manifest.json").exists()


def test_verify_honest():
    code, out = call("verify", "--p", "0.3", "--w", "0.5", "--k", "50")
    assert code == 0
    assert "potential_tight: True" in out and "induction_violations: 0" in out
    assert "claims_ok: True" in out


def test_simulate(tmp_path):
    code, out = call("simulate", "--p", "0.3", "--w", "1", "--phases", "20000", "--seed", "3")
    assert code == 0
    data = json.loads(out)
    assert data["seeds"] == [3] and data["phases"] == 20000
    assert abs(data["q_M_hat"] - 0.3) < 0.02
    code, out2 = call("simulate", "--p", "0.3", "--w", "1", "--phases", "20000", "--seed", "3")
    assert out2 == out
    code, _ = call("simulate", "--p", "0.3", "--phases", "100", "--trace", "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "trace.csv").exists()
    manifest = json.loads((tmp_path / "simulate.manifest.json").read_text())
    assert str(tmp_path / "trace.csv") in manifest["outputs"] and manifest["seed"] == 0


def test_simulate_trace_needs_dir():
    assert call("simulate", "--p", "0.3", "--phases", "100", "--trace")[0] == 1


def test_simulate_small_miners():
    code, out = call("simulate", "--p", "0.44", "--w", "0.132", "--phases", "20000", "--small-miners", "10")
    assert code == 0
    data = json.loads(out)
    assert data["trials"] > 0 and data["n"] == 10


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "payforward", "pne-check", "--p", "0.44", "--w", "0.132"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "equilibrium_supporting: true" in res.stdout
