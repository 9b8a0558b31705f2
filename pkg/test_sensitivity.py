#!/usr/bin/env python3
"""Tests for material derivatives, finite-difference oracles and the Hadamard boundary data"""

import numpy as np
import pytest

from create_mesh import generate_builtin
from deformations import RadialBump, TangentialRotation, ZeroDeformation
from discretization import EdgeSpace, RadiationOperator, ScatteringProblem, WaveParameters
from response import SaturatingResponse, ZeroResponse
from sensitivity import (
    LinearizedSystem,
    NormalData,
    RegionShapeDerivative,
    additivity_gap,
    assemble_material_rhs,
    compute_sensitivity,
    deformed_mesh_check,
    material_fd_check,
    normal_data,
    normal_derivative,
    recover_region_shape_derivative,
    rhs_fd_check,
    shape_boundary_data,
    solve_material,
    solve_shape_bvp,
    surface_data,
    verify_shape_bvp,
)
from solver import FixedPointConfig, critical_beta, estimate_stability, solve_problem
from utils.errors import MissingCurvature, NotConverged

TIGHT = FixedPointConfig(max_iters=500, abs_tol=1e-14, rel_tol=1e-12)
AXIS = np.array([0.2, -0.4, 0.9])
HN = 0.3


def _solved(kind="nibc", fraction=0.5, level=0):
    bundle = generate_builtin("ball" if kind == "ntc" else "spherical-shell", level)
    space = EdgeSpace(bundle.mesh, bundle.boundary_tag)
    radiation = RadiationOperator("silver-mueller-1", bundle.outer_radius)
    problem = ScatteringProblem(space, WaveParameters(eps_interior=2.0), ZeroResponse(bundle.surface),
                                radiation, kind)
    beta = fraction * critical_beta(estimate_stability(problem), 1.0)
    problem = problem.with_response(SaturatingResponse(bundle.surface, beta))
    return bundle, problem, solve_problem(problem, TIGHT)


def test_zero_deformation_has_zero_material_derivative():
    _, problem, solution = _solved()
    rhs = assemble_material_rhs(problem, solution.E, ZeroDeformation())
    assert not np.any(rhs)
    W = solve_material(LinearizedSystem.for_problem(problem, solution.E), rhs)
    assert problem.x_norm(W) == 0.0


def test_material_rhs_requires_converged_state():
    _, problem, _ = _solved()
    with pytest.raises(NotConverged):
        assemble_material_rhs(problem, np.zeros(problem.space.ndofs, dtype=complex), RadialBump(0.5))


def test_material_derivative_is_additive():
    _, problem, solution = _solved()
    linearized = LinearizedSystem.for_problem(problem, solution.E)
    gap = additivity_gap(linearized, problem, solution.E, RadialBump(0.5), TangentialRotation(0.3))
    assert gap < 1e-10


def test_rhs_matches_pulled_back_difference_quotients():
    _, problem, solution = _solved()
    h = RadialBump(0.5)
    rhs = assemble_material_rhs(problem, solution.E, h)
    check = rhs_fd_check(problem, solution.E, h, rhs)
    assert check["exact_zero"] or check["min_slope"] >= 0.9


def test_tangential_field_gives_zero_boundary_data():
    bundle, problem, solution = _solved()
    rotation = TangentialRotation(0.5, r_inner=0.8, r_outer=1.7)
    surf = surface_data(problem, bundle.surface)
    normal = normal_data(problem, rotation, surf)
    assert not np.any(normal.h_n) and not np.any(normal.grad_h_n)
    result = compute_sensitivity(problem, solution, rotation, bundle.surface)
    assert not np.any(result.boundary_data.pointwise)


def test_surface_data_needs_curvature_source():
    _, problem, _ = _solved()
    with pytest.raises(MissingCurvature):
        surface_data(problem)
    fitted = surface_data(problem, allow_fit=True)
    assert fitted.source == "weingarten-fit"


def _rigid_rotation(kind):
    """E = b x x, which the edge space reproduces, with constant h_n and zero grad_G h_n"""
    bundle = generate_builtin("ball" if kind == "ntc" else "spherical-shell", 0)
    space = EdgeSpace(bundle.mesh, bundle.boundary_tag)
    wave = WaveParameters(k=1.5, impedance=2.0, eps_interior=2.0)
    problem = ScatteringProblem(space, wave, ZeroResponse(bundle.surface),
                                RadiationOperator("silver-mueller-1", bundle.outer_radius), kind)
    E = space.interpolate(lambda x: np.cross(AXIS, x))
    surf = surface_data(problem, bundle.surface)
    quad = space.boundary(problem.tag)
    normal = NormalData(np.full(quad.weights.shape, HN), np.zeros(quad.points.shape))
    return problem, E, surf, quad, normal


def test_normal_derivative_of_rigid_rotation():
    problem, E, surf, quad, _ = _rigid_rotation("nibc")
    # S (b x p) = b x n and n x curl E = 2 n x b on the sphere
    expected = np.cross(AXIS, surf.normals)
    assert np.allclose(normal_derivative(problem, E, surf), expected, atol=1e-10)


def test_impedance_boundary_data_of_rigid_rotation():
    problem, E, surf, quad, normal = _rigid_rotation("nibc")
    data = shape_boundary_data(problem, E, normal, surf)
    n, p = surf.normals, quad.points
    radius = np.linalg.norm(p, axis=-1, keepdims=True)
    coef = 1j * problem.wave.k * problem.wave.impedance
    bxp = np.cross(AXIS, p)
    assert np.allclose(data.curl_scalar, 2.0 * HN * (n @ AXIS), atol=1e-10)
    expected = -HN * problem.wave.k ** 2 * bxp - 2.0 * coef * HN * bxp / radius
    assert np.allclose(data.rest, expected, atol=1e-10)


def test_transmission_boundary_data_of_rigid_rotation():
    problem, E, surf, quad, normal = _rigid_rotation("ntc")
    data = shape_boundary_data(problem, E, normal, surf)
    # E and curl E are continuous, so only the permittivity contrast survives
    assert np.allclose(data.curl_scalar, 0.0, atol=1e-10)
    assert np.allclose(data.rest, HN * problem.wave.k ** 2 * np.cross(AXIS, quad.points), atol=1e-10)
    assert np.allclose(data.jump, 0.0, atol=1e-10)


@pytest.mark.parametrize("kind", ["nibc", "npec", "ntc"])
def test_sensitivity_on_coarsest_mesh(kind):
    bundle, problem, solution = _solved(kind)
    result = compute_sensitivity(problem, solution, RadialBump(0.5), bundle.surface, with_mixed=False)
    assert np.all(np.isfinite(result.boundary_data.pointwise))
    assert np.all(np.isfinite(result.delta_dofs))
    assert result.boundary_data.l2_norm(problem.space.boundary(problem.tag).weights) > 0.0
    if kind == "ntc":
        assert np.all(np.isfinite(result.boundary_data.jump))
        assert isinstance(result.delta_regions, RegionShapeDerivative)
    else:
        assert result.delta_regions is None


@pytest.mark.parametrize("kind", ["nibc", "npec"])
def test_direct_shape_solve_satisfies_its_system(kind):
    bundle, problem, solution = _solved(kind)
    result = compute_sensitivity(problem, solution, RadialBump(0.5), bundle.surface, with_mixed=False)
    linearized = LinearizedSystem.for_problem(problem, solution.E)
    direct = solve_shape_bvp(problem, solution.E, result.boundary_data, linearized)
    check = verify_shape_bvp(problem, solution.E, direct, result.boundary_data, linearized)
    assert check["problem"] == kind
    assert check["relative"] < 1e-8
    recovered = verify_shape_bvp(problem, solution.E, result.delta_dofs, result.boundary_data, linearized)
    assert np.isfinite(recovered["relative"]) and np.isfinite(recovered["boundary_l2_relative"])


def test_transmission_shape_check_needs_both_sides():
    bundle, problem, solution = _solved("ntc")
    h = RadialBump(0.5)
    result = compute_sensitivity(problem, solution, h, bundle.surface, with_mixed=False)
    with pytest.raises(ValueError):
        solve_shape_bvp(problem, solution.E, result.boundary_data)
    with pytest.raises(ValueError):
        verify_shape_bvp(problem, solution.E, result.delta_dofs, result.boundary_data)

    regions = recover_region_shape_derivative(problem, result.W, solution.E, h)
    assert np.allclose(regions.exterior, result.delta_regions.exterior)
    check = verify_shape_bvp(problem, solution.E, regions, result.boundary_data)
    assert check["jump_scale"] > 0.0
    assert np.isfinite(check["relative"])


def test_deformed_mesh_agrees_with_pulled_back_solve():
    _, problem, _ = _solved()
    h = RadialBump(0.5)
    coarse = deformed_mesh_check(problem, h, 1e-1, TIGHT)
    fine = deformed_mesh_check(problem, h, 1e-2, TIGHT)
    assert fine["relative"] < coarse["relative"]
    assert fine["relative"] < 0.05


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["nibc", "npec", "ntc"])
def test_material_derivative_matches_finite_differences(kind):
    _, problem, solution = _solved(kind)
    h = RadialBump(0.5)
    W = solve_material(LinearizedSystem.for_problem(problem, solution.E),
                       assemble_material_rhs(problem, solution.E, h))
    check = material_fd_check(problem, solution.E, W, h, [1e-1, 3e-2, 1e-2, 3e-3], TIGHT)
    assert check["remainder_slope"] >= 1.5
    assert check["scaled_monotone"]


@pytest.mark.slow
def test_mixed_identity_for_pec_problem():
    bundle, problem, solution = _solved("npec")
    result = compute_sensitivity(problem, solution, RadialBump(0.5), bundle.surface)
    assert result.P is not None
    assert result.diagnostics["mixed_identity"]["relative"] < 1e-7


@pytest.mark.slow
def test_recovered_shape_derivative_approaches_direct_solve():
    gaps = []
    for level in (1, 2):
        bundle, problem, solution = _solved("nibc", level=level)
        linearized = LinearizedSystem.for_problem(problem, solution.E)
        result = compute_sensitivity(problem, solution, RadialBump(0.5), bundle.surface, linearized=linearized)
        direct = solve_shape_bvp(problem, solution.E, result.boundary_data, linearized)
        gaps.append(problem.hcurl_norm(direct - result.delta_dofs) / problem.hcurl_norm(direct))
    assert gaps[1] < gaps[0]
    assert gaps[1] <= 0.10


@pytest.mark.slow
def test_transmission_jump_residual_shrinks_under_refinement():
    relative = []
    for level in (0, 1):
        bundle, problem, solution = _solved("ntc", level=level)
        result = compute_sensitivity(problem, solution, RadialBump(0.5), bundle.surface)
        check = verify_shape_bvp(problem, solution.E, result.delta_regions, result.boundary_data)
        relative.append(check["relative"])
    assert relative[1] < relative[0]


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
