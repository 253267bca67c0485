import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from decayscope.cli import main, read_config
from decayscope.ingest import read_sample


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    obs = d / "obs.csv"
    assert main(["simulate", "--n", "20000", "--seed", "3", "--out", str(obs)]) == 0
    return d, obs, d / "obs.sources.csv"


def data_flags(sim):
    _, obs, src = sim
    return ["--obs", str(obs), "--sources", str(src)]


def test_simulate_outputs_and_manifest(sim):
    d, obs, src = sim
    assert obs.read_text().splitlines()[0] == "lat,lon,period,group,outcome"
    assert src.read_text().splitlines()[0] == "id,lat,lon"
    man = json.loads((d / "obs.csv.manifest.json").read_text())
    assert man["command"] == "simulate" and man["config"]["n"] == 20000
    assert set(man) >= {"inputs", "outputs", "config_hash", "versions", "timestamp"}


def test_simulate_idempotent(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["simulate", "--n", "500", "--seed", "1", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ma = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    mb = json.loads((tmp_path / "b.csv.manifest.json").read_text())
    assert {k: v for k, v in ma["config"].items() if k not in ("out",)} == \
        {k: v for k, v in mb["config"].items() if k not in ("out",)}


def test_ingest_then_boundary_from_sample(sim, tmp_path, capsys):
    out = tmp_path / "s.bin"
    assert main(["ingest", *data_flags(sim), "--out", str(out), "--chunk-rows", "3000"]) == 0
    s = read_sample(out)
    assert s.n == 20000
    man = json.loads((tmp_path / "s.bin.manifest.json").read_text())
    assert len(man["inputs"]) == 2 and all(len(h) == 64 for h in man["inputs"].values())
    capsys.readouterr()
    assert main(["boundary", "--sample", str(out), "--epsilon", "0.6", "0.7",
                 "--out-dir", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "boundary.json").read_text())
    assert [b["epsilon"] for b in res["boundaries"]] == [0.6, 0.7]
    b6 = res["boundaries"][0]
    assert abs(b6["d_star"] - np.log(1 / 0.6) / 0.00701) < 6
    assert b6["ci_method"] == "plug-in" and b6["ci"][0] < b6["d_star"] < b6["ci"][1]
    assert b6["plug_in"]["se"] >= b6["plug_in"]["se_known_threshold"]
    assert json.loads(capsys.readouterr().out)["n"] == 20000


def test_boundary_bootstrap_and_grid_rule(sim, tmp_path):
    assert main(["boundary", *data_flags(sim), "--epsilon", "0.6", "--ci", "bootstrap",
                 "--boot-b", "20", "--boot-nb", "2000", "--grid-rule",
                 "--out-dir", str(tmp_path)]) == 0
    b = json.loads((tmp_path / "boundary.json").read_text())["boundaries"][0]
    assert b["ci_method"] == "bootstrap" and b["bootstrap"]["B"] == 20
    assert b["d_star"] == round(b["d_star"]) and not b["interpolated"]


def test_fit_writes_curve_and_exponential(sim, tmp_path):
    assert main(["fit", *data_flags(sim), "--hac", "--hac-bw-km", "20",
                 "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "d_km,m_hat,m_prime_hat,f_hat,sigma2_hat" and len(lines) == 102
    exp = json.loads((tmp_path / "exponential.json").read_text())
    assert abs(exp["kappa"] - 0.00701) < 0.002
    assert exp["se_hac"] > 0


def test_compare_outputs(sim, tmp_path):
    assert main(["compare", *data_flags(sim), "--bins", "10,50,90",
                 "--out-dir", str(tmp_path)]) == 0
    rows = (tmp_path / "comparison.csv").read_text().splitlines()
    assert len(rows) == 4
    assert "improvement_pp" in json.loads((tmp_path / "comparison.json").read_text())["overall"]


def test_spec_test_command(sim, tmp_path):
    assert main(["spec-test", *data_flags(sim), "--boot-b", "20", "--seed", "1",
                 "--out-dir", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "spec_test.json").read_text())
    assert res["B_used"] == 20 and 0 <= res["p_value"] <= 1


def test_config_file_and_override(sim, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepsilon = 0.7\nci = none\nbandwidth = 4\n")
    assert read_config(cfg)["epsilon"] == "0.7"
    assert main(["boundary", *data_flags(sim), "--config", str(cfg),
                 "--out-dir", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "boundary.json").read_text())
    assert res["h"] == 4.0 and res["boundaries"][0]["epsilon"] == 0.7
    assert res["boundaries"][0]["ci"] is None
    assert main(["boundary", *data_flags(sim), "--config", str(cfg), "--epsilon", "0.6",
                 "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "boundary.json").read_text())["boundaries"][0]["epsilon"] == 0.6
    cfg.write_text("no_such_key = 1\n")
    assert main(["boundary", *data_flags(sim), "--config", str(cfg)]) == 2


@pytest.mark.parametrize("argv", [
    [],
    ["nope"],
    ["boundary", "--epsilon", "1.5", "--sample", "x.bin"],
    ["boundary", "--epsilon", "0"],
    ["boundary"],
    ["boundary", "--sample", "a", "--obs", "b"],
    ["simulate", "--out", "x.csv", "--n", "0"],
    ["fit", "--bandwidth", "wide", "--sample", "x"],
    ["fit", "--grid", "0,100", "--sample", "x"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_runtime_errors_exit_1(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["boundary", "--sample", str(tmp_path / "missing.bin")]) == 1
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + bytes(12))
    assert main(["boundary", "--sample", str(bad)]) == 1
    obs = tmp_path / "o.csv"
    obs.write_text("lat,lon,period,group,outcome\n")
    src = tmp_path / "s.csv"
    src.write_text("id,lat,lon\na,0,0\n")
    assert main(["fit", "--obs", str(obs), "--sources", str(src)]) == 1


def test_version_and_help_exit_0(capsys):
    assert main(["--version"]) == 0
    assert "decayscope" in capsys.readouterr().out
    assert main(["boundary", "--help"]) == 0


@pytest.mark.skipif(shutil.which("decayscope") is None, reason="console script not installed")
def test_console_script(tmp_path):
    r = subprocess.run(["decayscope", "simulate", "--n", "200", "--out", str(tmp_path / "o.csv")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "decayscope", "boundary"], capture_output=True,
                       text=True)
    assert r.returncode == 2


def test_end_to_end_closed_form(tmp_path):
    obs = tmp_path / "s.csv"
    assert main(["simulate", "--form", "exponential", "--A", "2.28", "--kappa", "0.00701",
                 "--n", "100000", "--seed", "7", "--out", str(obs)]) == 0
    assert main(["boundary", "--obs", str(obs), "--sources", str(tmp_path / "s.sources.csv"),
                 "--epsilon", "0.5", "--out-dir", str(tmp_path)]) == 0
    b = json.loads((tmp_path / "boundary.json").read_text())["boundaries"][0]
    assert abs(b["d_star"] - 98.87) <= 2.0


def test_rerun_tables_byte_identical(sim, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    for d in (a, b):
        assert main(["compare", *data_flags(sim), "--out-dir", str(d)]) == 0
        assert main(["fit", *data_flags(sim), "--out-dir", str(d)]) == 0
    for name in ("comparison.csv", "comparison.json", "curve.csv", "exponential.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
