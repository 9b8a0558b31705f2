#!/usr/bin/env python3
"""Tests for the edge space, the assembled forms and the scattering problem"""

import numpy as np
import pandas as pd
import pytest
from scipy.special import spherical_jn, spherical_yn

from create_mesh import generate_builtin
from discretization import (
    AssembledSystem,
    EdgeSpace,
    RadiationOperator,
    ScatteringProblem,
    TangentialLift,
    WaveParameters,
    assemble_boundary_projection,
    assemble_curl_curl,
    assemble_mass,
    assemble_radiation,
    assemble_radiation_dual,
    join,
    manufactured_solution_error,
    real_block,
    split,
)
from response import ZeroResponse
from utils.errors import PolarizationNotTransverse, UnsupportedOuterBoundary
from utils.spherical_modes import hankel_ratio_coefficients, real_vsh
from verification_suites import manufactured_curl, manufactured_curl_curl, manufactured_field


def _space(kind="spherical-shell", level=0):
    bundle = generate_builtin(kind, level)
    return bundle, EdgeSpace(bundle.mesh, bundle.boundary_tag)


def _problem(kind="nibc"):
    bundle, space = _space("ball" if kind == "ntc" else "spherical-shell")
    radiation = RadiationOperator("silver-mueller-1", bundle.outer_radius)
    wave = WaveParameters(eps_interior=2.0)
    return ScatteringProblem(space, wave, ZeroResponse(bundle.surface), radiation, kind)


def test_wave_parameters_validated():
    with pytest.raises(ValueError):
        WaveParameters(k=0.0)
    with pytest.raises(ValueError):
        WaveParameters(impedance=-1.0 + 1j)
    with pytest.raises(ValueError):
        WaveParameters(direction=(0.0, 0.0, 2.0))
    with pytest.raises(PolarizationNotTransverse):
        WaveParameters(polarization=(0.0, 0.0, 1.0)).check_transverse()
    with pytest.raises(ValueError):
        RadiationOperator("absorbing")


def test_incident_curl_matches_finite_differences():
    wave = WaveParameters(k=2.0, direction=(0.0, 0.6, 0.8), polarization=(1.0, 0.0, 0.0))
    x = np.random.default_rng(0).uniform(-1, 1, size=(5, 3))
    s = 1e-6
    jac = np.stack([(wave.incident(x + s * e) - wave.incident(x - s * e)) / (2 * s) for e in np.eye(3)], axis=-1)
    curl = np.stack([jac[:, 2, 1] - jac[:, 1, 2], jac[:, 0, 2] - jac[:, 2, 0], jac[:, 1, 0] - jac[:, 0, 1]], axis=1)
    assert np.abs(curl - wave.incident_curl(x)).max() < 1e-7


def test_interpolation_reproduces_rigid_fields():
    _, space = _space()
    a = np.array([0.3, -1.0, 0.5])
    b = np.array([0.2, 0.1, -0.4])
    coeffs = space.interpolate(lambda x: a + np.cross(b, x))
    values = space.values_at_quadrature(coeffs)
    assert np.abs(values - (a + np.cross(b, space.qpoints))).max() < 1e-12
    assert np.abs(space.curls_per_tet(coeffs) - 2 * b).max() < 1e-12


def test_curl_curl_kernel_contains_gradients():
    bundle, space = _space()
    phi = np.random.default_rng(1).normal(size=bundle.mesh.n_vertices)
    gradient = phi[bundle.mesh.edges[:, 1]] - phi[bundle.mesh.edges[:, 0]]
    K = assemble_curl_curl(space)
    assert np.abs(K @ gradient).max() < 1e-10 * np.abs(K).max()


def test_mass_matrix_is_symmetric_positive():
    _, space = _space()
    M = assemble_mass(space)
    assert abs(M - M.T).max() < 1e-14
    v = np.random.default_rng(2).normal(size=space.ndofs)
    assert v @ (M @ v) > 0


def test_real_block_equivalence():
    _, space = _space()
    A = assemble_mass(space) * (1.0 + 0.5j)
    x = np.random.default_rng(3).normal(size=space.ndofs) + 1j * np.random.default_rng(4).normal(size=space.ndofs)
    assert np.allclose(real_block(A) @ split(x), split(A @ x))
    assert np.array_equal(join(split(x)), x)


def test_lift_reproduces_constant_traces():
    _, space = _space()
    c = np.array([1.0, 2.0, -0.5])
    quad = space.boundary()
    data = np.cross(quad.point_normals, np.broadcast_to(c, quad.points.shape))
    lift = TangentialLift(space)
    w = lift({space.boundary_tag: data})
    expected = space.interpolate(lambda x: np.broadcast_to(c, x.shape))
    assert np.abs(w[lift.boundary_dofs] - expected[lift.boundary_dofs]).max() < 1e-10


def test_problem_forms():
    problem = _problem("nibc")
    assert problem.pulled_back(None, 0.0) is None
    assert problem.system().form == "nibc_linear"
    K = problem.curl_curl
    other = problem.with_response(ZeroResponse(problem.response.surface))
    assert other.curl_curl is K
    with pytest.raises(ValueError):
        ScatteringProblem(problem.space, problem.wave, problem.response, problem.radiation, "robin")


def test_transmission_problem_uses_region_values():
    problem = _problem("ntc")
    assert problem.tag == "interface"
    assert np.any(problem.eps != 1.0)
    assert problem.system().form == "ntc_linear"


def test_system_dump(tmp_path):
    problem = _problem("nibc")
    system: AssembledSystem = problem.system()
    paths = system.dump(tmp_path)
    rows = pd.read_csv(paths["matrix"], sep=" ", header=None)
    assert len(rows) == system.matrix.nnz
    load = pd.read_csv(paths["load"], sep=" ", header=None)
    assert np.allclose(load[1] + 1j * load[2], system.load)




def _outgoing_rotated_mode(x, k):
    """n = 1 rotated outgoing mode h_1(kr) (-y, x, 0) / r, an exact solution of curl curl E = k^2 E"""
    r = np.linalg.norm(x, axis=-1)
    h = spherical_jn(1, k * r) - 1j * spherical_yn(1, k * r)
    return (h / r)[..., None] * np.stack([-x[..., 1], x[..., 0], np.zeros_like(r)], axis=-1)


def test_spectral_coefficients_match_exact_outgoing_mode():
    k, radius = 3.0, 2.0
    a, b = hankel_ratio_coefficients(k, radius, 1)
    assert a.shape == (3,) and np.allclose(a, a[0]) and np.allclose(b, b[0])
    theta, phi = 1.1, 0.4
    x = radius * np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    s = 1e-5
    jac = np.stack([(_outgoing_rotated_mode(x + s * e, k) - _outgoing_rotated_mode(x - s * e, k)) / (2 * s)
                    for e in np.eye(3)], axis=-1)
    curl = np.array([jac[2, 1] - jac[1, 2], jac[0, 2] - jac[2, 0], jac[1, 0] - jac[0, 1]])
    nu = x / radius
    field = _outgoing_rotated_mode(x, k)
    factor = np.vdot(field, np.cross(nu, curl)) / np.vdot(field, field)
    # rotated modes carry -ik a, gradient modes ik b, and the two multiply to -k^2
    assert factor == pytest.approx(-1j * k * a[0], abs=1e-6)
    assert factor == pytest.approx(0.0135 + 2.919j, abs=1e-3)
    assert (1j * k * b[0]) * (-1j * k * a[0]) == pytest.approx(-k ** 2)


def test_spectral_coefficients_approach_first_order_term():
    a, b = hankel_ratio_coefficients(10.0, 2.0, 1)
    assert abs(-1j * 10.0 * a[0] - 10.0j) / 10.0 < 0.1
    assert abs(1j * 10.0 * b[0] - 10.0j) / 10.0 < 0.1
    assert hankel_ratio_coefficients(10.0, 2.0, 0)[0].size == 0


def test_spectral_radiation_acts_on_outer_dofs_only():
    bundle, space = _space()
    spectral = RadiationOperator("spectral-dtn", bundle.outer_radius, order=2)
    R = assemble_radiation(space, spectral, 1.0)
    inner = np.setdiff1d(np.arange(space.ndofs), space.outer_dofs)
    assert abs(R[inner]).max() == 0.0 and abs(R[:, inner]).max() == 0.0
    assert abs(R - R.T).max() < 1e-12 * abs(R).max()
    dual = assemble_radiation_dual(space, spectral, 1.0)
    assert abs(dual - dual.T).max() < 1e-12 * abs(dual).max()
    assert assemble_radiation(space, RadiationOperator("spectral-dtn", bundle.outer_radius), 1.0).nnz == 0
    with pytest.raises(UnsupportedOuterBoundary):
        assemble_radiation(space, RadiationOperator("spectral-dtn", 1.5 * bundle.outer_radius, order=1), 1.0)


def test_spectral_radiation_reduces_to_first_order_term_on_resolved_modes():
    bundle, space = _space()
    k = 10.0 / bundle.outer_radius
    spectral = RadiationOperator("spectral-dtn", bundle.outer_radius, order=1)
    R = assemble_radiation(space, spectral, k)
    # a rigid rotation about z traces the n = 1 rotated mode on the outer sphere
    coeffs = space.interpolate(lambda x: np.cross(np.array([0.0, 0.0, 1.0]), x))
    quad = space.boundary("gammaR")
    U, V = real_vsh(quad.points.reshape(-1, 3), np.zeros(3), bundle.outer_radius, 1)
    shape = quad.points.shape[:2] + U.shape[1:]
    QU = assemble_boundary_projection(space, "gammaR", U.reshape(shape))
    QV = assemble_boundary_projection(space, "gammaR", V.reshape(shape))
    resolved = np.sum((QU.T @ coeffs) ** 2) + np.sum((QV.T @ coeffs) ** 2)
    assert np.sum((QV.T @ coeffs) ** 2) > 10 * np.sum((QU.T @ coeffs) ** 2)
    assert abs(coeffs @ (R @ coeffs) - 1j * k * resolved) / abs(k * resolved) < 0.1


def test_spectral_incident_load_is_finite():
    bundle, space = _space()
    spectral = RadiationOperator("spectral-dtn", bundle.outer_radius, order=2)
    problem = ScatteringProblem(space, WaveParameters(), ZeroResponse(bundle.surface), spectral, "nibc")
    load = problem.incident_load
    assert np.all(np.isfinite(load)) and np.abs(load).max() > 0


@pytest.mark.slow
def test_manufactured_error_decreases():
    errors = []
    for level in (0, 1, 2):
        _, space = _space("cube-with-hole", level)
        errors.append(manufactured_solution_error(space, 1.0, manufactured_field, manufactured_curl,
                                                  manufactured_curl_curl)["hcurl_error"])
    assert errors[2] < errors[1] < errors[0]


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
