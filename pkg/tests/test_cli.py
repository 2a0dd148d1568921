import json

import pytest

from kfplab.cli import RunConfig, main, parse_grid, run, validate_config
from kfplab.errors import ConfigError

BASE = {"domain": {"x": [0, 1], "v": [-1, 1]}, "grid": {"nx": 16, "nv": 16}}


def _write(tmp_path, **extra):
    cfg = {**BASE, **extra}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_verify_constant_preset_passes(tmp_path, capsys):
    code = run("verify", _write(tmp_path, preset="constant"), out=tmp_path / "o")
    assert code == 0
    data = json.loads((tmp_path / "o" / "verify.json").read_text())
    assert data["verdicts"] and all(v["passed"] for v in data["verdicts"])
    assert "FAIL" not in capsys.readouterr().out


def test_missing_domain(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"preset": "constant"}))
    assert run("verify", path, out=tmp_path / "o") == 2
    assert "missing key: domain" in capsys.readouterr().err


def test_unknown_key_and_preset(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        validate_config({**BASE, "preset": "constant", "colour": 1})
    with pytest.raises(ConfigError, match="preset"):
        validate_config({**BASE, "preset": "nope"})


def test_bad_json_is_config_error(tmp_path):
    path = tmp_path / "x.json"
    path.write_text("{")
    assert run("solve", path) == 2


def test_solve_writes_fields_and_manifest(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--config", str(_write(tmp_path, preset="unit_box")), "--out", str(out), "--grid", "12x10", "--seed", "5"]) == 0
    assert (out / "u.csv").read_text().startswith("x,v,u")
    man = json.loads((out / "manifest.json").read_text())
    assert man["grid"] == [12, 10] and man["seeds"]["oracle"] == 5
    assert len(man["config_hash"]) == 64 and "numpy" in man["versions"]


def test_manifest_hash_is_stable(tmp_path):
    p = _write(tmp_path, preset="unit_box")
    h1 = RunConfig.from_dict(json.loads(p.read_text())).config_hash()
    h2 = RunConfig.from_dict(json.loads(p.read_text()), seed=3).config_hash()
    assert h1 == h2


def test_expression_config(tmp_path):
    coeffs = {"A": "0.5", "f": "0", "g": "x1 + v1^2"}
    assert run("solve", _write(tmp_path, coefficients=coeffs), out=tmp_path / "o") == 0
    bad = {"A": "0.5", "g": "import os"}
    assert run("solve", _write(tmp_path, coefficients=bad), out=tmp_path / "o") == 2


def test_crosscheck_unit_box(tmp_path):
    oracle = {"n_paths": 2000, "dt": 1e-3, "seed": 2024, "probes": [[0.5, 0.25], [0.25, -0.5]]}
    assert run("crosscheck", _write(tmp_path, preset="unit_box", oracle=oracle), out=tmp_path / "o") == 0
    table = json.loads((tmp_path / "o" / "crosscheck.json").read_text())["table"]
    assert len(table) == 2
    assert all(r["diff"] <= r["budget"] for r in table)


def test_perron_and_report(tmp_path):
    cfg = _write(tmp_path, preset="product_perron", perron={"max_sweeps": 2000})
    out = tmp_path / "o"
    assert run("perron", cfg, out=out) == 0
    assert (out / "upper.csv").exists() and (out / "lower.csv").exists()
    assert run("report", cfg, out=out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["sections"] == ["perron"]


def test_perron_rejects_split_data(tmp_path):
    coeffs = {"A": "0.5", "g1": "0", "g2": "1"}
    assert run("perron", _write(tmp_path, coefficients=coeffs), out=tmp_path / "o") == 2


def test_solver_failure_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, preset="unit_box", eps=0.01, solver={"method": "gmres", "max_iter": 1, "restart": 1, "rel_tol": 1e-12})
    assert run("solve", cfg, out=tmp_path / "o") == 3
    assert "[solver]" in capsys.readouterr().err


def test_failed_check_exit_code(tmp_path):
    cfg = _write(tmp_path, preset="unit_box", viscosity={"k_max": 2, "stop_tol": 1e-12})
    assert run("viscosity", cfg, out=tmp_path / "o") == 1


def test_grid_parsing():
    assert parse_grid("64x32") == (64, 32)
    with pytest.raises(ConfigError):
        parse_grid("64")
