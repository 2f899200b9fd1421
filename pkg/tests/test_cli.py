from __future__ import annotations

import json
import pathlib

import pytest
from typer.testing import CliRunner

from lasalt import cli

from .conftest import RESOURCES


SMALL = str(RESOURCES / "small.json")


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def trajectory_dir(runner, tmp_path) -> str:
    out = str(tmp_path / "expectation")
    result = runner.invoke(
        cli.cli, ["expectation", "-c", SMALL, "-o", out], catch_exceptions=False
    )
    assert result.exit_code == 0
    return out


def test_expectation_writes_trajectory(trajectory_dir):
    meta = json.loads((pathlib.Path(trajectory_dir) / "meta.json").read_text())
    assert meta["config_hash"]
    assert any(name.startswith("theta") for name in meta["files"])


def test_refuses_non_empty_output(runner, trajectory_dir):
    result = runner.invoke(cli.cli, ["expectation", "-c", SMALL, "-o", trajectory_dir])
    assert result.exit_code == cli.EXIT_CONFIG
    result = runner.invoke(
        cli.cli, ["expectation", "-c", SMALL, "-o", trajectory_dir, "--force"]
    )
    assert result.exit_code == 0


def test_moments_from_trajectory(runner, trajectory_dir, tmp_path):
    out = str(tmp_path / "moments")
    result = runner.invoke(
        cli.cli,
        ["moments", "-c", SMALL, "-T", trajectory_dir, "-o", out],
        catch_exceptions=False,
    )
    assert result.exit_code == 0
    assert (tmp_path / "moments").is_dir()


def test_corrupted_snapshot(runner, trajectory_dir, tmp_path):
    """A changed snapshot is caught by its recorded hash."""
    snapshot = sorted((tmp_path / "expectation").glob("theta*.lsf1"))[-1]
    data = bytearray(snapshot.read_bytes())
    data[-1] ^= 0xFF
    snapshot.write_bytes(bytes(data))
    result = runner.invoke(
        cli.cli, ["moments", "-c", SMALL, "-T", trajectory_dir, "-o", str(tmp_path / "m")]
    )
    assert result.exit_code == cli.EXIT_CONFIG


def test_trajectory_of_other_config(runner, trajectory_dir, tmp_path):
    degenerate = str(RESOURCES / "degenerate.json")
    out = str(tmp_path / "m")
    result = runner.invoke(
        cli.cli, ["moments", "-c", degenerate, "-T", trajectory_dir, "-o", out]
    )
    assert result.exit_code == cli.EXIT_CONFIG


def test_missing_config(runner, tmp_path):
    result = runner.invoke(cli.cli, ["expectation", "-o", str(tmp_path / "x")])
    assert result.exit_code == cli.EXIT_CONFIG
    missing = str(tmp_path / "nope.json")
    result = runner.invoke(cli.cli, ["spde", "-c", missing, "-o", str(tmp_path / "y")])
    assert result.exit_code == cli.EXIT_CONFIG


def test_spde_member(runner, trajectory_dir, tmp_path):
    out = tmp_path / "member"
    result = runner.invoke(
        cli.cli,
        ["spde", "-c", SMALL, "-T", trajectory_dir, "-m", "3", "-o", str(out)],
        catch_exceptions=False,
    )
    assert result.exit_code == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["member"] == 3
    assert meta["scheme"] == "strat"


def test_characteristics(runner, trajectory_dir, tmp_path):
    out = tmp_path / "chars"
    result = runner.invoke(
        cli.cli,
        ["characteristics", "-c", SMALL, "-T", trajectory_dir, "-o", str(out)],
        catch_exceptions=False,
    )
    assert result.exit_code == 0
    data = json.loads((out / "characteristics.json").read_text())
    assert data["theta_rel_l2"] < 0.1
    assert (out / "inverse_map.lsf1").exists()


def test_verify_is_reproducible(runner, tmp_path):
    """Two runs with different thread counts write identical summaries."""
    outputs = []
    for threads, name in ((1, "a"), (2, "b")):
        out = tmp_path / name
        args = ["verify", "-q", "--only", "A-1", "--only", "A-11", "-o", str(out)]
        result = runner.invoke(
            cli.cli, [*args, "-t", str(threads)], catch_exceptions=False
        )
        assert result.exit_code == 0
        outputs.append((out / "verify.json").read_bytes())
    assert outputs[0] == outputs[1]


def test_verify_failure_exit_code(runner, tmp_path):
    degenerate = str(RESOURCES / "degenerate.json")
    out = tmp_path / "verify"
    result = runner.invoke(
        cli.cli, ["verify", "-q", "-c", degenerate, "-o", str(out)]
    )
    assert result.exit_code == cli.EXIT_VERIFY
    summary = json.loads((out / "verify.json").read_text())
    assert summary["failed"] == ["E-1"]


if __name__ == "__main__":
    pytest.main([__file__])
