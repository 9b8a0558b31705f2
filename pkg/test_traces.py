#!/usr/bin/env python3
"""Tests for the tangential traces and the first variation of the transported trace"""

import numpy as np
import pytest

from deformations import RandomSmoothDeformation, ZeroDeformation
from geometry import geometric_kit
from traces import (
    TangentialField,
    TraceVariation,
    tangential_component,
    tangential_trace,
    transported_trace,
    transported_trace_smooth,
    variation_of_field,
)
from utils.errors import DegenerateNormal


def _sphere_points(count=25, seed=0):
    x = np.random.default_rng(seed).normal(size=(count, 3))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _complex_field(points, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=points.shape) + 1j * rng.normal(size=points.shape)


def test_tangential_parts():
    n = _sphere_points()
    U = _complex_field(n)
    gamma_T = tangential_component(U, n)
    gamma_t = tangential_trace(U, n)
    assert np.abs(np.einsum("nd,nd->n", gamma_T, n)).max() < 1e-14
    assert np.allclose(-np.cross(n, gamma_t), gamma_T)


def test_transported_trace_at_identity():
    n = _sphere_points()
    U = _complex_field(n)
    kit = geometric_kit(ZeroDeformation(), 0.0, n, n)
    assert np.allclose(transported_trace(U, kit), tangential_component(U, n))


def test_transported_trace_definitions_agree():
    n = 1.0 * _sphere_points()
    h = RandomSmoothDeformation(seed=4, r_inner=1.2, r_outer=1.7)
    kit = geometric_kit(h, 0.05, n, n)
    U = _complex_field(n)
    assert np.abs(transported_trace(U, kit) - transported_trace_smooth(U, kit)).max() < 1e-12


def test_trace_variation_matches_finite_difference():
    n = _sphere_points(seed=3)
    h = RandomSmoothDeformation(seed=2)
    U = _complex_field(n, seed=5)
    step = 1e-6
    plus = transported_trace(U, geometric_kit(h, step, n, n))
    minus = transported_trace(U, geometric_kit(h, -step, n, n))
    fd = (plus - minus) / (2 * step)
    variation = variation_of_field(U, geometric_kit(h, 0.0, n, n))
    assert np.abs(variation.values - fd).max() < 1e-6


def test_transported_trace_needs_surface_data():
    points = _sphere_points()
    kit = geometric_kit(ZeroDeformation(), 0.0, points)
    with pytest.raises(DegenerateNormal):
        transported_trace(_complex_field(points), kit)


def test_tangential_field_pairing():
    n = _sphere_points(count=10)
    weights = np.full(10, 0.1)
    field = TangentialField.from_field(_complex_field(n), n, weights)
    assert field.is_tangential()
    assert field.l2_norm() == pytest.approx(np.sqrt(field.inner(field).real))
    assert field.rotated().l2_norm() == pytest.approx(field.l2_norm())

    skewed = TangentialField(n.astype(complex), n, weights)
    assert not skewed.is_tangential()


def test_bound_constant():
    values = np.ones((4, 3))
    variation = TraceVariation(values)
    assert variation.l2_norm() == pytest.approx(np.sqrt(12.0))
    assert variation.bound_constant(2.0, 0.5) == pytest.approx(np.sqrt(12.0))
    assert variation.bound_constant(0.0, 1.0) == 0.0


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
