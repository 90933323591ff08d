"""Tests for the fedmc command-line interface."""

from click.testing import CliRunner

from src.cli import main

RUN_TOML = """
clients = 3
rank = 2
rounds = 2
timing = "off"

[synthetic]
m = 18
n = 7
rank = 2
density = 0.7

[admm]
N = 2
beta = 3.0

[sampling]
size = 2
"""


def _config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(RUN_TOML)
    return path


def test_help_lists_sections():
    result = CliRunner().invoke(main, ["--help"])
    assert result.exit_code == 0
    assert "Experiments" in result.output
    assert "Diagnostics" in result.output


def test_run_writes_metrics(tmp_path):
    out = tmp_path / "metrics.csv"
    result = CliRunner().invoke(
        main, ["run", "--config", str(_config(tmp_path)), "--out", str(out), "--rounds", "3"]
    )
    assert result.exit_code == 0, result.output
    assert "Wrote 4 rows" in result.output
    assert len(out.read_text().splitlines()) == 5


def test_run_fedmavg(tmp_path):
    out = tmp_path / "fedmavg.csv"
    result = CliRunner().invoke(
        main,
        ["run", "--config", str(_config(tmp_path)), "--algo", "fedmavg", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert out.exists()


def test_invalid_override_exits_1(tmp_path):
    result = CliRunner().invoke(
        main, ["run", "--config", str(_config(tmp_path)), "--rounds", "0"]
    )
    assert result.exit_code == 1
    assert "Error:" in result.output


def test_bad_beta_value(tmp_path):
    result = CliRunner().invoke(
        main, ["run", "--config", str(_config(tmp_path)), "--beta", "fast"]
    )
    assert result.exit_code == 2


def test_check_prints_threshold(tmp_path):
    result = CliRunner().invoke(main, ["check", "--config", str(_config(tmp_path))])
    assert result.exit_code == 0, result.output
    assert "is valid" in result.output
    assert "threshold" in result.output


def test_synth_writes_file(tmp_path):
    spec = tmp_path / "spec.toml"
    spec.write_text("[synthetic]\nm = 10\nn = 6\nrank = 2\ndensity = 0.5\nseed = 4\n")
    out = tmp_path / "synth.npz"
    result = CliRunner().invoke(main, ["synth", "--spec", str(spec), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert out.exists()
