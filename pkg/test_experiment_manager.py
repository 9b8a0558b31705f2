#!/usr/bin/env python3
"""Tests for the experiment manager and the solve-backed verification suites on coarse meshes"""

import pytest

import verification_suites as suites
from experiment_manager import ExperimentManager
from utils.report_writer import FAIL, PASS, VACUOUS, Report
from utils.run_config import default_config


def _manager(tmp_path, problem="nibc", **overrides):
    settings = {"mesh.level": 0, "verify.fd_level": 0, "verify.refinement_levels": [0, 1], **overrides}
    return ExperimentManager(default_config(problem).with_overrides(**settings), out_dir=str(tmp_path), seed=3)


def _statuses(report, criterion):
    return {row.name: row.status for row in report.rows if row.criterion == criterion}


def test_solve_report_records_sampled_lipschitz(tmp_path):
    outcome = _manager(tmp_path).solve()
    report = outcome["report"]
    sampled = report.sections["lipschitz"]
    assert set(sampled) >= {"estimate", "declared", "samples", "exceeds_declared"}
    assert not sampled["exceeds_declared"]
    assert _statuses(report, "SOLVE")["sampled Lipschitz ratio within declared L_g"] == PASS
    assert (tmp_path / "report.json").exists()


def test_zero_response_skips_lipschitz_sampling(tmp_path):
    report = _manager(tmp_path, **{"response.type": "zero"}).solve()["report"]
    assert "lipschitz" not in report.sections


@pytest.mark.slow
def test_fixed_point_suite_matches_folded_solve(tmp_path):
    report = Report("verify", "nibc")
    results = suites.fixed_point_suite(report, _manager(tmp_path), 0)
    assert set(results) == {"nibc", "npec", "ntc"}
    assert all(r["relative_gap"] < suites.FIXED_POINT_TOLERANCE for r in results.values())
    assert all(status == PASS for status in _statuses(report, "C3").values())


@pytest.mark.slow
def test_contraction_suite_reports_geometric_increments(tmp_path):
    report = Report("verify", "nibc")
    summary = suites.contraction_suite(report, _manager(tmp_path), "nibc", 0)
    assert summary["beta_crit"] > 0.0
    statuses = _statuses(report, "C4")
    assert statuses["median increment ratio"] == PASS
    assert statuses["iteration counts grow with beta"] == PASS
    assert "over-critical response" in _statuses(report, "DIV")


@pytest.mark.slow
def test_hadamard_suite_on_two_levels(tmp_path):
    report = Report("verify", "nibc")
    results = suites.hadamard_suite(report, _manager(tmp_path), "nibc", [0, 1])
    statuses = _statuses(report, "C7")
    assert statuses["tangential deformation: boundary data exactly zero"] == PASS
    assert statuses["tangential deformation: shape derivative decays"] == PASS
    assert statuses["equal normal parts give equal shape derivatives"] == PASS
    assert results["rotation_norms"][1] < results["rotation_norms"][0]


@pytest.mark.slow
def test_bvp_crosscheck_suite_agrees_on_finer_levels(tmp_path):
    report = Report("verify", "nibc")
    results = suites.bvp_crosscheck_suite(report, _manager(tmp_path), [1, 2])
    gaps = results["gaps"]
    assert gaps[1] < gaps[0] and gaps[1] < suites.BVP_AGREEMENT
    assert FAIL not in _statuses(report, "C8").values()
    assert "shape_bvp_nibc" in report.sections


@pytest.mark.slow
def test_jump_crosscheck_for_transmission_problem(tmp_path):
    report = Report("verify", "ntc")
    results = suites.bvp_crosscheck_suite(report, _manager(tmp_path, "ntc"), [0, 1], "ntc")
    assert len(results["residuals"]) == 2
    statuses = _statuses(report, "C8")
    assert statuses["ntc: jump residual shrinks under refinement"] == PASS
    assert VACUOUS not in statuses.values()
    assert report.sections["shape_jump_ntc"]["levels"] == [0, 1]


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
