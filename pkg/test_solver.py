#!/usr/bin/env python3
"""Tests for the fixed-point solvers, their diagnostics and the stability surrogates"""

import numpy as np
import pytest
from pydantic import ValidationError

from create_mesh import generate_builtin
from discretization import EdgeSpace, RadiationOperator, ScatteringProblem, WaveParameters
from response import ConstantDatumResponse, LinearResponse, SaturatingResponse, ZeroResponse
from solver import (
    ContractionDiagnostics,
    FixedPointConfig,
    critical_beta,
    estimate_stability,
    iterate,
    solve_folded_linear,
    solve_nibc,
    solve_problem,
)
from utils.errors import MaxItersExceeded, NotContracting

TIGHT = FixedPointConfig(max_iters=500, abs_tol=1e-14, rel_tol=1e-12)


def _problem(kind="nibc"):
    bundle = generate_builtin("ball" if kind == "ntc" else "spherical-shell", 0)
    space = EdgeSpace(bundle.mesh, bundle.boundary_tag)
    radiation = RadiationOperator("silver-mueller-1", bundle.outer_radius)
    return ScatteringProblem(space, WaveParameters(eps_interior=2.0), ZeroResponse(bundle.surface), radiation, kind)


def test_fixed_point_config_validated():
    with pytest.raises(ValidationError):
        FixedPointConfig(damping=0.0)
    with pytest.raises(ValidationError):
        FixedPointConfig(max_iters=0)


def test_diagnostics_summary(tmp_path):
    diagnostics = ContractionDiagnostics("nibc", increments=[1.0, 0.5, 0.25, 0.125], converged=True)
    assert diagnostics.iterations == 4
    assert diagnostics.rho_hat == pytest.approx(0.5)
    frame = diagnostics.to_frame()
    assert list(frame.columns) == ["iter", "increment_norm", "ratio"]
    assert np.isnan(frame["ratio"].iloc[0])
    assert diagnostics.write_log(tmp_path / "iterations.csv").exists()
    assert diagnostics.summary()["converged"]


def test_iterate_detects_divergence():
    with pytest.raises(NotContracting):
        iterate(lambda E: 2.0 * E + 1.0, np.zeros(3), FixedPointConfig(), ContractionDiagnostics("test"))


def test_iterate_reports_exhausted_budget():
    with pytest.raises(MaxItersExceeded):
        iterate(lambda E: 0.99 * E + 1.0, np.zeros(3), FixedPointConfig(max_iters=5), ContractionDiagnostics("test"))


@pytest.mark.parametrize("kind", ["nibc", "npec", "ntc"])
def test_zero_response_takes_one_iteration(kind):
    result = solve_problem(_problem(kind))
    assert result.diagnostics.converged
    assert result.diagnostics.iterations == 1
    assert result.diagnostics.residual < 1e-10
    assert (result.Q is not None) == (kind == "npec")


def test_field_independent_datum_takes_one_iteration():
    problem = _problem("nibc")
    problem = problem.with_response(ConstantDatumResponse(problem.response.surface, a_const=0.1))
    result = solve_problem(problem)
    assert result.diagnostics.iterations == 1
    assert result.diagnostics.residual < 1e-10


@pytest.mark.parametrize("kind", ["nibc", "npec"])
def test_linear_response_matches_folded_solve(kind):
    problem = _problem(kind)
    c = 0.2 * critical_beta(estimate_stability(problem), 1.0) * (0.6 + 0.8j)
    linear = problem.with_response(LinearResponse(problem.response.surface, c=c))
    fixed_point = solve_problem(linear, TIGHT)
    assert fixed_point.diagnostics.converged
    direct = solve_folded_linear(linear)
    assert np.linalg.norm(fixed_point.E - direct) <= 1e-7 * np.linalg.norm(direct)


def test_saturating_response_contracts():
    problem = _problem("nibc")
    estimate = estimate_stability(problem)
    beta = 0.5 * critical_beta(estimate, 1.0)
    result = solve_problem(problem.with_response(SaturatingResponse(problem.response.surface, beta)), TIGHT)
    assert result.diagnostics.converged
    assert result.diagnostics.residual < 1e-7
    if result.diagnostics.rho_hat is not None:
        assert result.diagnostics.rho_hat < 1.0


def test_stability_estimate():
    estimate = estimate_stability(_problem("npec"))
    assert estimate.constant > 0.0 and estimate.lift_norm > 0.0
    assert critical_beta(estimate, 2.0) == pytest.approx(0.5 / estimate.constant)
    assert estimate.summary()["contraction_surrogate"] == 0.0


def test_solver_checks_problem_kind():
    with pytest.raises(ValueError):
        solve_nibc(_problem("npec"))


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
