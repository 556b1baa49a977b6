import json

import numpy as np
import pytest

from hjm_fdr.cli import EXIT_CONFIG, EXIT_OK, EXIT_STRUCTURE, bundled_config_text, main, read_curve_path
from hjm_fdr.config import (
    RunConfig,
    apply_overrides,
    config_hash,
    parse_config,
    serialize_config,
    with_family,
)
from hjm_fdr.curve_space import MaturityGrid
from hjm_fdr.errors import ConfigError
from hjm_fdr.hjm_core import sigma
from hjm_fdr.fdr import SpanFamily, svensson_basis, svensson_model
from hjm_fdr.model_file import parse_model, serialize_model, spec_from_model
from hjm_fdr.sim import invariance_residuals

FAST = ["--set", "simulate.n_paths=1", "--set", "verify.n_paths=1"]


# -- config -----------------------------------------------------------------------------------

def test_bundled_config_round_trip():
    cfg = parse_config(bundled_config_text())
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_defaults_fill_missing_keys():
    cfg = parse_config("[model]\nalpha = 2.0\n")
    assert cfg.model.alpha == 2.0
    assert cfg.grid == RunConfig().grid
    assert cfg.simulate.dt is None


@pytest.mark.parametrize(
    "text",
    [
        "[grid]\nbogus = 1\n",
        "[nowhere]\nx = 1\n",
        "x = 1\n",
        "[grid]\nn_points = many\n",
        "[grid]\nx_max = 1\n[grid]\nx_max = 2\n",
        "[simulate]\npolicy = teleport\n",
    ],
)
def test_bad_config_raises(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_overrides():
    cfg = parse_config(bundled_config_text())
    out = apply_overrides(cfg, ["model.alpha=1.3", "simulate.n_paths = 7"])
    assert out.model.alpha == 1.3 and out.simulate.n_paths == 7
    assert out.grid == cfg.grid
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["model.nonsense=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["alpha=1"])


def test_hash_tracks_content():
    cfg = parse_config(bundled_config_text())
    assert config_hash(cfg) != config_hash(apply_overrides(cfg, ["analysis.seed=1"]))


def test_with_family():
    cfg = with_family(parse_config("[model]\nfamily = constant\n"), "svensson")
    assert cfg.model.family == "svensson" and cfg.model.spec is None


# -- model files ------------------------------------------------------------------------------

def test_model_file_round_trip():
    grid = MaturityGrid(15.9375, 128)
    model, _, _ = svensson_model(1.3, grid)
    spec = spec_from_model(model)
    again = parse_model(serialize_model(spec))
    assert again == spec
    rebuilt = again.build(grid)
    h = model.base_point
    for a, b in zip(sigma(model, h), sigma(rebuilt, h)):
        np.testing.assert_allclose(a.values, b.values, rtol=1e-13, atol=1e-15)
    for f, g in zip(model.functionals, rebuilt.functionals):
        assert f(h) == pytest.approx(g(h), rel=1e-13, abs=1e-15)


def test_model_file_errors():
    good = serialize_model(spec_from_model(svensson_model(1.3, MaturityGrid(15.9375, 64))[0]))
    with pytest.raises(ConfigError):
        parse_model(good.replace("[phi.1]", "[phi.2]"))
    with pytest.raises(ConfigError):
        parse_model(good + "\n[mystery]\nkey = 1\n")
    with pytest.raises(ConfigError):
        parse_model("[functional.1]\nkind = point-evaluation\nnodes = 1.0\nweights = 1.0\n")


# -- command line -----------------------------------------------------------------------------

def _json(path):
    return json.loads(path.read_text())


def test_analyze_reports_two_dimensions(tmp_path, capsys):
    assert main(["analyze", "--output", str(tmp_path), "--set", "model.alpha=1.3"]) == EXIT_OK
    doc = _json(tmp_path / "analyze" / "analysis.json")
    rep = doc["result"]["report"]
    assert rep["k_D"] == 2 and rep["stabilized"]
    assert doc["result"]["bracket_coefficient"]["observed"] == "corrected"
    assert doc["config_sha256"] == config_hash(parse_config(doc["config"]))
    assert "k_D = 2" in capsys.readouterr().out


def test_analyze_depth_one_not_stabilized(tmp_path, capsys):
    assert main(["analyze", "--output", str(tmp_path), "--set", "analysis.max_depth=1"]) == EXIT_OK
    rep = _json(tmp_path / "analyze" / "analysis.json")["result"]["report"]
    assert not rep["stabilized"]
    assert "not stabilized" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["analyze", "--output", str(tmp_path), "--set", "grid.n_points=-3"]) == EXIT_CONFIG
    assert main(["analyze", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "ConfigError" in err


def test_structure_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[model]\nfamily = constant\n")
    assert main(["verify", "--config", str(cfg), "--output", str(tmp_path), "--path", str(tmp_path / "x.csv")]) != EXIT_OK
    fake = tmp_path / "p.csv"
    fake.write_text("t,x,value\n0.0,0.0,0.01\n")
    assert main(["verify", "--output", str(tmp_path), "--path", str(fake)]) in (EXIT_CONFIG, EXIT_STRUCTURE)


def test_print_config(capsys):
    assert main(["print-config"]) == EXIT_OK
    assert parse_config(capsys.readouterr().out) == parse_config(bundled_config_text())


def test_demo_is_deterministic(tmp_path, monkeypatch):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        assert main(["demo-svensson", "--output", "out"] + FAST) == EXIT_OK
        outs.append(d / "out" / "demo-svensson")
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    assert {"analysis.json", "realization.json", "simulate_report.json", "verify_report.json",
            "realized_path_0.csv", "spde_path_0.csv"} <= set(files)
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_demo_artifacts_carry_config(tmp_path):
    assert main(["demo-svensson", "--output", str(tmp_path)] + FAST) == EXIT_OK
    out = tmp_path / "demo-svensson"
    doc = _json(out / "verify_report.json")
    cfg = parse_config(doc["config"])
    h = config_hash(cfg)
    assert doc["config_sha256"] == h and doc["schema_version"] == 1
    head = (out / "lambda.csv").read_text().splitlines()
    assert head[1] == f"# config_sha256 = {h}"
    assert doc["result"]["tangency_consistent"]


def test_verify_realized_path(tmp_path, capsys):
    assert main(["simulate", "--output", str(tmp_path)] + FAST) == EXIT_OK
    f = tmp_path / "simulate" / "realized_path_0.csv"
    grid = parse_config(bundled_config_text()).make_grid()
    path = read_curve_path(f, grid)
    basis = SpanFamily(svensson_basis(1.0, grid))
    assert np.nanmax(invariance_residuals(path, basis)) < 1e-10
    assert main(["verify", "--output", str(tmp_path), "--path", str(f)]) == EXIT_OK
    doc = _json(tmp_path / "verify" / "verify_report.json")
    assert doc["result"]["invariance"][0]["sup"] < 1e-10
