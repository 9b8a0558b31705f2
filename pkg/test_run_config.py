#!/usr/bin/env python3
"""Tests for run configurations, settings and the report writer"""

import json
import os

import numpy as np
import pandas as pd
import pytest

from utils.errors import EXIT_CONFIG, ConfigError, exit_code_for
from utils.report_writer import EXPECTED_FAILURE, FAIL, PASS, Report, to_jsonable
from utils.run_config import (
    config_to_dict,
    default_config,
    load_run_config,
    parse_complex,
    parse_run_config,
    write_default_configs,
)
from utils.settings import Settings


def test_parse_complex_forms():
    assert parse_complex(2) == 2 + 0j
    assert parse_complex([0.5, -1.0]) == complex(0.5, -1.0)
    assert parse_complex("1 + 0.5j") == complex(1.0, 0.5)
    for bad in (True, [1.0], "one", None):
        with pytest.raises(ValueError):
            parse_complex(bad)


def test_defaults_round_trip(tmp_path):
    paths = write_default_configs(tmp_path)
    assert [p.name for p in paths] == ["nibc.json", "npec.json", "ntc.json"]
    for path in paths:
        config = load_run_config(path)
        assert config == default_config(config.problem)
    assert load_run_config(tmp_path / "npec.json").response.beta == 0.05


def test_validation_errors_name_the_field():
    cases = [
        ({"problem": "robin"}, "problem"),
        ({"mesh": {"level": 5}}, "mesh.level"),
        ({"wave": {"impedance": [-1.0, 0.0]}}, "wave.impedance"),
        ({"wave": {"polarization": [0.0, 0.0, 1.0]}}, "wave"),
        ({"t_grid": [1e-2, 1e-1]}, "t_grid"),
        ({"verify": {"refinement_levels": [1]}}, "verify.refinement_levels"),
        ({"solver": {"unknown": 1}}, "solver.unknown"),
        ({"problem": "ntc"}, "<root>"),
    ]
    for data, field_path in cases:
        with pytest.raises(ConfigError) as info:
            parse_run_config(data)
        assert str(info.value).startswith(field_path), (data, str(info.value))
        assert exit_code_for(info.value) == EXIT_CONFIG


def test_bad_documents_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.json")
    with pytest.raises(ConfigError):
        parse_run_config("{not json")
    with pytest.raises(ConfigError):
        parse_run_config("[1, 2]")


def test_overrides_and_direction_normalization():
    config = parse_run_config({"wave": {"direction": [0.0, 0.0, 2.0]}})
    assert config.wave.direction == (0.0, 0.0, 1.0)
    finer = config.with_overrides(**{"mesh.level": 2, "response.beta": [0.1, 0.0]})
    assert finer.mesh.level == 2 and finer.response.beta == 0.1
    assert config.mesh.level == 1
    assert json.loads(json.dumps(config_to_dict(finer)))["response"]["beta"] == [0.1, 0.0]


def test_deformation_seed_defaults_to_run_seed():
    config = parse_run_config({"seed": 7, "deformation": {"type": "random-smooth"}})
    assert config.deformation_spec()["seed"] == 7


def test_settings_from_environment():
    overrides = {"MAXSHAPE_THREADS": "4", "MAXSHAPE_LOG_JSON": "true"}
    saved = {key: os.environ.get(key) for key in overrides}
    os.environ.update(overrides)
    try:
        settings = Settings()
    finally:
        for key, value in saved.items():
            if value is None:
                os.environ.pop(key, None)
            else:
                os.environ[key] = value
    assert settings.threads == 4 and settings.log_json


def test_to_jsonable():
    value = {"a": np.float64(np.inf), "b": 1 + 2j, "c": np.arange(2), "d": np.bool_(True), "e": float("nan")}
    assert to_jsonable(value) == {"a": "inf", "b": [1.0, 2.0], "c": [0, 1], "d": True, "e": "nan"}


def _report():
    report = Report("verify", "nibc", {"problem": "nibc"}, seed=3)
    report.check("C1", "M expansion order", True, 2.01, [1.9, 2.1])
    report.add_row("DIV", "divergence beyond critical strength", EXPECTED_FAILURE, 1e3)
    report.add_slope("C5", "material remainder", {"slope": 2.0, "fit_residual": 1e-3,
                                                   "t_grid": [1e-1, 1e-2], "errors": [1e-2, 1e-4]})
    report.add_table("fd", pd.DataFrame({"t": [0.1, 0.01], "remainder": [1e-2, 1e-4]}))
    return report


def test_report_outcome():
    report = _report()
    assert report.passed
    report.check("C7", "tangential part vanishes", False, 1e-3, 0.0)
    assert [r.status for r in report.rows] == [PASS, EXPECTED_FAILURE, FAIL]
    assert report.failed_criteria() == ["C7"]
    assert not report.to_dict()["passed"]


def test_report_output_is_deterministic(tmp_path):
    first = _report().write(tmp_path / "a")
    second = _report().write(tmp_path / "b")
    for key in ("report", "criteria", "slopes", "fd"):
        with open(first[key], "rb") as f, open(second[key], "rb") as g:
            assert f.read() == g.read()
    data = json.loads(open(first["report"]).read())
    assert data["seed"] == 3 and data["slopes"][0]["t_grid"] == [0.1, 0.01]


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
