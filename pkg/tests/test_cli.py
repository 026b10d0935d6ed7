import json

import numpy as np
import pytest

from meshshell.cli import main
from meshshell.config import load_table, parse_config, parse_expression
from meshshell.errors import ConfigurationError

from conftest import CONFIGS


# -- expressions and configuration ----------------------------------------------------

def test_sine_pressure_at_quarter_period():
    assert parse_expression("sin(2*pi*t)")(0.25) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("text, t, value", [
    ("1 + 2 * 3", 0.0, 7.0),
    ("2 ^ 3 ^ 2", 0.0, 512.0),
    ("-2 ^ 2", 0.0, -4.0),
    ("(1 + t) / 2", 3.0, 2.0),
    ("exp(0) + cos(pi)", 0.0, 0.0),
    ("1.5e1 - .5", 0.0, 14.5),
])
def test_expression_grammar(text, t, value):
    assert parse_expression(text)(t) == pytest.approx(value)


@pytest.mark.parametrize("text", ["", "1 +", "foo(t)", "sin t", "2 $ 3", "(1"])
def test_malformed_expression_rejected(text):
    with pytest.raises(ConfigurationError):
        parse_expression(text)


def test_pressure_table(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("# t value\n0 0\n1 2\n")
    f = load_table(p)
    assert f(0.25) == pytest.approx(0.5)
    p.write_text("0 0\n0 1\n")
    with pytest.raises(ConfigurationError):
        load_table(p)


def test_rigid_pipe_config_has_no_net():
    cfg = parse_config(CONFIGS / "rigid_pipe.ini")
    assert cfg.net == "none"
    assert cfg.fluid_enabled and not cfg.convection


def test_demo_config_values():
    cfg = parse_config(CONFIGS / "demo.ini")
    assert (cfg.N_z, cfg.N_rho, cfg.N_theta) == (16, 8, 16)
    assert cfg.P_in(0.25) == pytest.approx(1.0)
    assert cfg.P_out(0.3) == 0.0


def test_zero_density_rejected(write_config):
    with pytest.raises(ConfigurationError, match="rho_F.*positive"):
        parse_config(write_config(fluid={"rho_F": 0}))


def test_missing_key_named(write_config):
    with pytest.raises(ConfigurationError, match="mu_F"):
        parse_config(write_config(drop=[("fluid", "mu_F")]))


def test_bad_pressure_expression_names_key(write_config):
    with pytest.raises(ConfigurationError, match="P_in"):
        parse_config(write_config(bc={"P_in": "expr: sin(2*pi*"}))


def test_table_pressure_relative_to_config(write_config, tmp_path):
    (tmp_path / "inlet.txt").write_text("0 1\n1 3\n")
    cfg = parse_config(write_config(bc={"P_in": "table: inlet.txt"}))
    assert cfg.P_in(0.5) == pytest.approx(2.0)


# -- subcommands ------------------------------------------------------------------------

def test_verify_geometry_passes(capsys):
    assert main(["verify", "geometry"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"] and out["suites"]["geometry"]["jacobian_identity"] <= 1e-12


def test_unknown_suite_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["verify", "nonsense"])
    assert exc.value.code == 2


def test_bad_config_exit_code(write_config, capsys):
    assert main(["run", str(write_config(fluid={"mu_F": -1}))]) == 2


def test_run_twice_identical_and_inspect(write_config, tmp_path, capsys):
    path = write_config(init={"preset": "stirred", "amplitude": 1.0}, output={"cadence": 5})
    outs = []
    for name in ("a", "b"):
        assert main(["run", str(path), "--out", str(tmp_path / name), "--weak-residual"]) == 0
        capsys.readouterr()
        outs.append(tmp_path / name)
    for fname in ("ledger.csv", "weak_residual.csv", "fluid_000005.vtk"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
    assert main(["inspect", str(outs[0] / "final_state.npz")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n"] == 5 and info["fluid_nodes"] == 5 * 3 * 8


def test_restart_from_state_file(write_config, tmp_path, capsys):
    first = write_config("first.ini", init={"preset": "stirred", "amplitude": 1.0})
    assert main(["run", str(first), "--out", str(tmp_path / "s")]) == 0
    second = write_config("second.ini", init={"preset": f"state:{tmp_path / 's' / 'final_state.npz'}"})
    assert main(["run", str(second), "--out", str(tmp_path / "r"), "--steps", "2"]) == 0
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "r" / "final_state.npz")]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 2


def test_convergence_table(write_config, tmp_path, capsys):
    path = write_config(init={"preset": "stirred", "amplitude": 1.0}, time={"T": 0.04, "N": 2})
    code = main(["convergence", str(path), "--levels", "2", "--json", str(tmp_path / "c.json")])
    captured = capsys.readouterr()
    assert "max_E" in captured.err and "sum|v-v*|^2 dt" in captured.err
    res = json.loads((tmp_path / "c.json").read_text())
    assert [lvl["N"] for lvl in res["levels"]] == [2, 4]
    assert code == (0 if res["ok"] else 1)
