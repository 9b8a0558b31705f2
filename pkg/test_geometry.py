#!/usr/bin/env python3
"""
Tests for the geometry layer: deformation maps, bulk and surface coefficients,
analytic surfaces, surface operators and the covariant Piola transform
"""

import numpy as np
import pytest

from deformations import DeformationField, PolynomialDeformation, ZeroDeformation
from geometry import (
    AnalyticSurface,
    DiscreteSurface,
    build_diffeomorphism,
    bulk_coefficients,
    bulk_variation,
    geometric_kit,
    piola_pullback,
    surface_kit,
)
from utils.errors import DegenerateTriangle, NonInvertible, SupportViolation


class ConstantNormalSpeed(DeformationField):
    """h = c x/|x|, uncut"""

    name = "normal-speed"

    def __init__(self, c: float):
        self.c = c

    def value(self, x):
        return self.c * x / np.linalg.norm(x, axis=-1, keepdims=True)

    def jacobian(self, x):
        r = np.linalg.norm(x, axis=-1)
        n = x / r[..., None]
        return self.c * (np.eye(3) - n[..., :, None] * n[..., None, :]) / r[..., None, None]


def _sphere_points(count=40, seed=0):
    x = np.random.default_rng(seed).normal(size=(count, 3))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _stretch(eps):
    linear = np.zeros((3, 3))
    linear[0, 0] = 1.0
    return PolynomialDeformation(np.zeros(3), linear, np.zeros((3, 3, 3))), eps


def test_identity_map():
    points = _sphere_points()
    phi = build_diffeomorphism(ZeroDeformation(), 0.3, points)
    assert np.allclose(phi(points), points)
    assert np.allclose(phi.jacobian(points), np.eye(3))
    assert np.allclose(phi.determinant(points), 1.0)


def test_stretch_determinant():
    h, eps = _stretch(1e-2)
    points = _sphere_points()
    phi = build_diffeomorphism(h, eps, points)
    assert np.allclose(phi.jacobian(points)[0], np.diag([1 + eps, 1.0, 1.0]))
    assert np.allclose(phi.determinant(points), 1 + eps)


def test_inadmissible_step_rejected():
    h, _ = _stretch(0.0)
    with pytest.raises(NonInvertible):
        build_diffeomorphism(h, 0.6, _sphere_points())


def test_support_violation_near_outer_boundary():
    h = PolynomialDeformation(np.ones(3), np.zeros((3, 3)), np.zeros((3, 3, 3)))
    with pytest.raises(SupportViolation):
        build_diffeomorphism(h, 0.01, _sphere_points(), collar_points=2.0 * _sphere_points(seed=1))


def test_bulk_coefficients_identity_and_stretch():
    M, N = bulk_coefficients(np.eye(3))
    assert np.allclose(M, np.eye(3)) and np.allclose(N, np.eye(3))

    eps = 0.05
    M, N = bulk_coefficients(np.diag([1 + eps, 1.0, 1.0]))
    assert np.allclose(M, np.diag([1 + eps, 1 / (1 + eps), 1 / (1 + eps)]))


def test_bulk_coefficients_are_inverse():
    rng = np.random.default_rng(3)
    J = np.eye(3) + 0.3 * rng.normal(size=(50, 3, 3))
    J = J[np.linalg.det(J) > 0.1]
    M, N = bulk_coefficients(J)
    assert np.abs(M @ N - np.eye(3)).max() < 1e-10
    assert np.abs(M - np.swapaxes(M, -1, -2)).max() < 1e-12


def test_bulk_coefficients_reject_inverted_jacobian():
    with pytest.raises(NonInvertible):
        bulk_coefficients(np.diag([-1.0, 1.0, 1.0]))


def test_bulk_variation():
    M_dot, N_dot = bulk_variation(np.zeros((3, 3)))
    assert not M_dot.any() and not N_dot.any()

    J_h = np.zeros((3, 3))
    J_h[0, 0] = 1.0
    M_dot, N_dot = bulk_variation(J_h)
    assert np.allclose(M_dot, np.diag([1.0, -1.0, -1.0]))
    assert np.allclose(N_dot, -M_dot)


def test_bulk_expansion_is_second_order():
    rng = np.random.default_rng(5)
    J_h = rng.normal(size=(3, 3))
    M_dot, _ = bulk_variation(J_h)
    ts = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    errors = [np.linalg.norm(bulk_coefficients(np.eye(3) + t * J_h)[0] - np.eye(3) - t * M_dot) for t in ts]
    slope = np.polyfit(np.log(ts), np.log(errors), 1)[0]
    assert 1.9 <= slope <= 2.1


def test_kit_at_zero_deformation():
    points = _sphere_points()
    kit = geometric_kit(ZeroDeformation(), 0.0, points, points)
    assert np.allclose(kit.M, np.eye(3)) and np.allclose(kit.N, np.eye(3))
    assert np.allclose(kit.omega, 1.0)
    assert np.allclose(kit.delta_n, 0.0)


def test_uniform_scaling_area_ratio():
    eps = 0.1
    points = _sphere_points()
    h = PolynomialDeformation(np.zeros(3), np.eye(3), np.zeros((3, 3, 3)))
    kit = geometric_kit(h, eps, points, points)
    assert np.allclose(kit.omega, (1 + eps) ** 2)
    assert np.allclose(kit.normal_t, points)


def test_constant_normal_speed_on_unit_sphere():
    c = 0.3
    points = _sphere_points()
    h = ConstantNormalSpeed(c)
    kit = geometric_kit(h, 0.0, points, points)
    assert np.abs(kit.delta_n).max() < 1e-12
    assert np.allclose(kit.omega_dot, 2 * c)

    sphere = AnalyticSurface.sphere()
    curved = surface_kit(kit.jacobian, kit.jacobian_h, points, sphere.shape_operator(points),
                         sphere.additive_curvature(points), kit.h_values)
    assert np.allclose(curved["omega_dot"], 2 * c)
    assert np.abs(curved["delta_n"]).max() < 1e-12


def test_normal_variation_is_tangential():
    rng = np.random.default_rng(7)
    h = PolynomialDeformation(rng.normal(size=3), rng.normal(size=(3, 3)), 0.3 * rng.normal(size=(3, 3, 3)))
    points = _sphere_points(seed=2)
    kit = geometric_kit(h, 0.0, points, points)
    assert np.abs(np.einsum("nd,nd->n", kit.delta_n, points)).max() < 1e-12


def test_sphere_curvature_closed_forms():
    r = 1.5
    sphere = AnalyticSurface.sphere(radius=r)
    points = r * _sphere_points()
    P = np.eye(3) - points[:, :, None] * points[:, None, :] / r ** 2
    assert np.allclose(sphere.shape_operator(points), P / r)
    assert np.allclose(sphere.additive_curvature(points), 2.0 / r)


def test_plane_is_flat():
    plane = AnalyticSurface.plane((0.0, 0.0, 1.0), (0.0, 0.0, 2.0))
    points = np.array([[0.3, -0.2, 1.0], [1.0, 1.0, 1.0]])
    assert np.allclose(plane.normal(points), [0.0, 0.0, 1.0])
    assert np.allclose(plane.additive_curvature(points), 0.0)
    assert np.allclose(plane.project(np.array([[0.3, 0.4, 5.0]])), [[0.3, 0.4, 1.0]])


def test_ellipsoid_reduces_to_sphere():
    points = _sphere_points()
    ellipsoid = AnalyticSurface.ellipsoid((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    sphere = AnalyticSurface.sphere()
    assert np.allclose(ellipsoid.normal(points), sphere.normal(points))
    assert np.allclose(ellipsoid.shape_operator(points), sphere.shape_operator(points))


def test_analytic_surface_gradient():
    sphere = AnalyticSurface.sphere()
    points = _sphere_points()
    grad = sphere.surface_gradient(points, np.broadcast_to([0.0, 0.0, 1.0], points.shape))
    expected = np.array([0.0, 0.0, 1.0]) - points[:, 2:3] * points
    assert np.allclose(grad, expected)


def _square_patch():
    grid = np.array([[i, j, 0.0] for j in range(3) for i in range(3)], dtype=float)
    tris = []
    for j in range(2):
        for i in range(2):
            a = j * 3 + i
            tris += [[a, a + 1, a + 4], [a, a + 4, a + 3]]
    return DiscreteSurface(grid, np.array(tris))


def test_discrete_gradient_of_constant_is_zero():
    surface = _square_patch()
    assert np.allclose(surface.gradient(np.ones(surface.n_nodes)), 0.0)


def test_discrete_gradient_of_linear_function_is_exact():
    surface = _square_patch()
    psi = 2.0 * surface.nodes[:, 0] - surface.nodes[:, 1]
    assert np.allclose(surface.gradient(psi), [2.0, -1.0, 0.0])
    assert np.allclose(surface.vector_curl(psi), np.cross([0.0, 0.0, 1.0], [2.0, -1.0, 0.0]))


def test_degenerate_triangle_rejected():
    with pytest.raises(DegenerateTriangle):
        DiscreteSurface(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), np.array([[0, 1, 2]]))


def test_piola_identity_and_constant_field():
    points = _sphere_points()
    phi = build_diffeomorphism(ZeroDeformation(), 0.0, points)
    field = lambda y: np.stack([y[:, 1], y[:, 2] ** 2, y[:, 0]], axis=1)
    assert np.allclose(piola_pullback(field, phi, points).values, field(points))

    h, eps = _stretch(0.1)
    phi = build_diffeomorphism(h, eps, points)
    c = np.array([1.0, -2.0, 0.5])
    pulled = piola_pullback(lambda y: np.broadcast_to(c, y.shape), phi, points)
    assert np.allclose(pulled.values, [c[0] * (1 + eps), c[1], c[2]])


def test_piola_curl_identity_for_linear_field():
    rng = np.random.default_rng(11)
    h = PolynomialDeformation(rng.normal(size=3) * 0.2, rng.normal(size=(3, 3)) * 0.2,
                              rng.normal(size=(3, 3, 3)) * 0.1)
    points = rng.uniform(-1, 1, size=(30, 3))
    phi = build_diffeomorphism(h, 0.1, points)
    field = lambda y: np.stack([np.zeros(len(y)), y[:, 0], np.zeros(len(y))], axis=1)
    curl = lambda y: np.broadcast_to([0.0, 0.0, 1.0], y.shape)
    pulled = piola_pullback(field, phi, points, curl)
    J = phi.jacobian(points)
    det = np.linalg.det(J)
    mapped = np.einsum("nij,nj->ni", J, pulled.curl) / det[:, None]
    assert np.abs(mapped - curl(phi(points))).max() < 1e-10


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
