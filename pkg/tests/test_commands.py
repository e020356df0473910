from pathlib import Path

import yaml
from click.testing import CliRunner

from beamlab.commands import cli


def test_help_lists_every_subcommand():
    result = CliRunner().invoke(cli, ["--help"])
    assert result.exit_code == 0
    for name in ("trace", "beam-verify", "forward", "dtn", "linearize", "reconstruct", "compare"):
        assert name in result.output


def test_missing_config_is_a_configuration_error(tmp_path: Path):
    result = CliRunner().invoke(cli, ["forward", "-c", str(tmp_path / "absent.yaml"), "-o", str(tmp_path / "out")])
    assert result.exit_code == 2


def test_invalid_config_is_a_configuration_error(write_config, tmp_path: Path):
    path = write_config(lattice={"nt": 2})
    result = CliRunner().invoke(cli, ["forward", "-c", str(path), "-o", str(tmp_path / "out")])
    assert result.exit_code == 2
    assert "lattice.nt" in result.output


def test_forward_run(write_config, tmp_path: Path):
    out = tmp_path / "out"
    result = CliRunner().invoke(cli, ["forward", "-c", str(write_config()), "-o", str(out), "--seed", "3"])
    assert result.exit_code == 0, result.output
    manifest = yaml.safe_load((out / "manifest.yaml").read_text())
    assert manifest["pipeline"] == "forward"
    assert manifest["seed"] == 3
