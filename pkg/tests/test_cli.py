import json
import subprocess
import sys

import pytest

from spinchaos import cli
from spinchaos.config import ConfigError, load_experiment, load_params


def _write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_params(tmp_path):
    p = load_params(_write(tmp_path, "[model]\nbeta = 0.5\nn_particles = 12\n[grid]\nn_steps = 40\n"
                                     "[initial]\nhalf_width = 0.3\n"))
    assert p.beta == 0.5 and p.n_particles == 12 and p.grid.n_steps == 40
    assert p.initial.half_width == 0.3 and p.potential.kind == "LogBarrier"


def test_zero_potential_defaults(tmp_path):
    p = load_params(_write(tmp_path, "[potential]\nkind = Zero\n"))
    assert p.initial.kind == "PointMassZero"


def test_unknown_keys_and_sections(tmp_path):
    with pytest.raises(ConfigError):
        load_params(_write(tmp_path, "[model]\nbogus = 1\n"))
    with pytest.raises(ConfigError):
        load_params(_write(tmp_path, "[extra]\nx = 1\n"))
    with pytest.raises(ConfigError):
        load_experiment(_write(tmp_path, "[experiment]\nname = rate\nwhatever = 3\n"))


def test_experiment_knobs(tmp_path):
    cfg = load_experiment(_write(tmp_path, "[experiment]\nname = rate\nn_grid = 64, 128, 256, 512\n"
                                           "n_disorder = 100\nk = 2\nslope_window = -0.7, -0.3\n"), seed=4)
    assert cfg.experiment == "rate" and cfg.seed == 4
    assert cfg.knobs == {"n_grid": (64, 128, 256, 512), "n_disorder": 100, "k": 2, "slope_window": (-0.7, -0.3)}
    assert cfg.params.potential.kind == "Zero"


def test_knob_invariants(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment(_write(tmp_path, "[experiment]\nname = rate\nn_grid = 64, 32, 128, 256\n"))
    with pytest.raises(ConfigError):
        load_experiment(_write(tmp_path, "[experiment]\nname = rate\nn_disorder = 10\n"))


def test_cli_runs_experiment(tmp_path, capsys):
    cfg = _write(tmp_path, "[potential]\nkind = Zero\n[experiment]\nn = 30\nn_disorder = 100\n")
    code = cli.main(["u0-exact", "--config", str(cfg), "--out", str(tmp_path / "out"), "--format", "csv"])
    assert code == 0
    assert "PASS u0-exact" in capsys.readouterr().out
    report = json.loads((tmp_path / "out" / "u0-exact.json").read_text())
    assert report["config"]["n"] == 30
    assert (tmp_path / "out" / "u0-exact.csv").exists()


def test_cli_simulate_writes_ensemble(tmp_path, capsys):
    cfg = _write(tmp_path, "[model]\nn_particles = 3\n[grid]\nn_steps = 10\n[experiment]\nn_replicas = 2\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path), "--format", "csv"]) == 0
    assert (tmp_path / "ensemble.csv").exists()


def test_cli_run_all(tmp_path, capsys):
    good = _write(tmp_path, "[potential]\nkind = Zero\n[experiment]\nname = u0-exact\nn = 30\nn_disorder = 100\n",
                  "good.ini")
    bad = _write(tmp_path, "[potential]\nkind = Zero\n[experiment]\nname = u0-exact\nn = 30\nn_disorder = 100\n"
                           "rel_tol = -1\n", "bad.ini")
    assert cli.main(["run-all"]) == 0
    assert cli.main(["run-all", str(good)]) == 0
    assert cli.main(["run-all", str(good), str(bad)]) == 1
    out = capsys.readouterr().out
    assert "PASS u0-exact" in out and "FAIL u0-exact" in out


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["rate", "--threads", "-1"]) == 2
    assert cli.main(["rate", "--seed", str(2**64)]) == 2
    assert cli.main(["rate", "--config", str(tmp_path / "missing.ini")]) == 2


def test_console_module_entry():
    out = subprocess.run([sys.executable, "-m", "spinchaos", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in cli.SUBCOMMANDS + ("run-all",):
        assert name in out.stdout
