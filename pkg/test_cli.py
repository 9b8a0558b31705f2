#!/usr/bin/env python3
"""Tests for the maxshape command-line interface"""

import json

import pytest
from click.testing import CliRunner

from app import cli
from utils import __version__
from utils.errors import EXIT_CONFIG
from utils.run_config import config_to_dict, default_config


def _write_config(tmp_path, problem="nibc", **overrides):
    config = default_config(problem).with_overrides(**{"mesh.level": 0, **overrides})
    path = tmp_path / f"{problem}.json"
    path.write_text(json.dumps(config_to_dict(config)))
    return path


def test_version_and_help():
    runner = CliRunner()
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0 and __version__ in result.output
    result = runner.invoke(cli, ["--help"])
    for command in ("solve", "geomcheck", "derive", "verify"):
        assert command in result.output


def test_missing_config_exits_with_config_code(tmp_path):
    result = CliRunner().invoke(cli, ["solve", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)])
    assert result.exit_code == EXIT_CONFIG


def test_invalid_config_exits_with_config_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"problem": "nibc", "wave": {"k": -1.0}}))
    result = CliRunner().invoke(cli, ["derive", "--config", str(path), "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_CONFIG
    assert not (tmp_path / "out" / "report.json").exists()


def test_config_option_is_required():
    result = CliRunner().invoke(cli, ["verify"])
    assert result.exit_code != 0
    assert "--config" in result.output


def test_solve_writes_report(tmp_path):
    path = _write_config(tmp_path, "nibc", **{"response.beta": [0.01, 0.0]})
    out = tmp_path / "run"
    result = CliRunner().invoke(cli, ["solve", "--config", str(path), "--out", str(out), "--seed", "5"])
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    assert report["command"] == "solve" and report["seed"] == 5
    assert report["passed"]
    assert (out / "tables" / "criteria.csv").exists()


@pytest.mark.slow
def test_geomcheck_passes_on_pec_config(tmp_path):
    path = _write_config(tmp_path, "npec")
    out = tmp_path / "geom"
    result = CliRunner().invoke(cli, ["geomcheck", "--config", str(path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert json.loads((out / "report.json").read_text())["command"] == "geomcheck"


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
