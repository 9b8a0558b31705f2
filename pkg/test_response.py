#!/usr/bin/env python3
"""Tests for the pointwise boundary responses and the Nemytskii utilities"""

import numpy as np
import pytest

from geometry import AnalyticSurface
from response import (
    ConstantDatumResponse,
    FiniteDifferenceResponse,
    LinearResponse,
    SaturatingResponse,
    ZeroResponse,
    build_response,
    estimate_lipschitz,
    nemytskii_remainder,
    random_tangential,
)
from utils.errors import EmptySampleSet, OutsideTubularNeighborhood

SPHERE = AnalyticSurface.sphere()


def _tube_points(count=20, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(count, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * rng.uniform(0.95, 1.05, size=(count, 1))


def _complex(shape, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


RESPONSES = [
    LinearResponse(SPHERE, c=0.2 - 0.1j, a_tilt=0.4),
    SaturatingResponse(SPHERE, beta=0.3 + 0.2j, a_tilt=0.4),
    ConstantDatumResponse(SPHERE, vector=(1.0, 2.0, -1.0), a_tilt=0.4),
]


@pytest.mark.parametrize("response", RESPONSES, ids=lambda r: r.name)
def test_directional_derivative_matches_finite_differences(response):
    x = _tube_points()
    z, w = _complex(x.shape, 1), _complex(x.shape, 2)
    s = 1e-6
    fd = (response.evaluate(x, z + s * w) - response.evaluate(x, z - s * w)) / (2 * s)
    assert np.abs(response.directional_derivative(x, z, w) - fd).max() < 1e-7


@pytest.mark.parametrize("response", RESPONSES, ids=lambda r: r.name)
def test_spatial_action_matches_finite_differences(response):
    x = _tube_points(seed=3)
    z = _complex(x.shape, 4)
    h = np.random.default_rng(5).normal(size=x.shape)
    s = 1e-6
    fd = (response.evaluate(x + s * h, z) - response.evaluate(x - s * h, z)) / (2 * s)
    assert np.abs(response.spatial_gradient_action(x, z, h) - fd).max() < 1e-6


def test_saturating_derivative_is_only_real_linear():
    response = SaturatingResponse(SPHERE, beta=0.5)
    x = _tube_points()
    z, w = _complex(x.shape, 1), _complex(x.shape, 2)
    real_scaled = response.directional_derivative(x, z, 2.0 * w)
    assert np.allclose(real_scaled, 2.0 * response.directional_derivative(x, z, w))
    assert not np.allclose(response.directional_derivative(x, z, 1j * w),
                           1j * response.directional_derivative(x, z, w))


def test_declared_lipschitz_bounds_samples():
    x = _tube_points(count=200)
    for response in (LinearResponse(SPHERE, c=0.3, a_tilt=0.5), SaturatingResponse(SPHERE, beta=0.3j, a_tilt=0.5)):
        sampled = estimate_lipschitz(response, x, _complex(x.shape, 6), _complex(x.shape, 7))
        assert 0.0 < sampled["estimate"] <= response.lipschitz * (1 + 1e-9)
        assert not sampled["exceeds_declared"]
        assert sampled["declared"] == pytest.approx(response.lipschitz)
    assert LinearResponse(SPHERE, c=0.3, a_tilt=0.5).lipschitz == pytest.approx(0.45)


def test_lipschitz_flags_understated_constant():
    x = _tube_points(count=50)
    understated = FiniteDifferenceResponse(SPHERE, lambda x, z: 2.0 * z, lipschitz=0.5)
    sampled = estimate_lipschitz(understated, x, _complex(x.shape, 6), _complex(x.shape, 7))
    assert sampled["exceeds_declared"]
    assert sampled["estimate"] > sampled["declared"] == pytest.approx(0.5)


def test_lipschitz_needs_distinct_samples():
    x = _tube_points()
    z = _complex(x.shape, 1)
    with pytest.raises(EmptySampleSet):
        estimate_lipschitz(SaturatingResponse(SPHERE), x, z, z)


def test_points_outside_tube_are_rejected():
    x = 1.5 * _tube_points()
    with pytest.raises(OutsideTubularNeighborhood):
        SaturatingResponse(SPHERE).evaluate(x, _complex(x.shape, 1))


def test_field_independent_responses():
    x = _tube_points()
    z, w = _complex(x.shape, 1), _complex(x.shape, 2)
    zero = ZeroResponse(SPHERE)
    assert zero.is_zero and zero.field_independent
    assert not zero.evaluate(x, z).any()

    constant = ConstantDatumResponse(SPHERE)
    assert constant.field_independent and constant.lipschitz == 0.0
    assert np.allclose(constant.evaluate(x, z), constant.evaluate(x, w))
    assert not constant.directional_derivative(x, z, w).any()


def test_values_are_tangential():
    x = _tube_points()
    n = SPHERE.normal(x)
    for response in RESPONSES:
        g = response.evaluate(x, _complex(x.shape, 8))
        assert np.abs(np.einsum("nd,nd->n", g, n)).max() < 1e-14


def test_finite_difference_wrapper_matches_analytic():
    analytic = SaturatingResponse(SPHERE, beta=0.4 + 0.1j, a_tilt=0.2)
    wrapped = FiniteDifferenceResponse(SPHERE, analytic.evaluate, lipschitz=analytic.lipschitz)
    x = _tube_points()
    z, w = _complex(x.shape, 1), _complex(x.shape, 2)
    assert np.abs(wrapped.directional_derivative(x, z, w) - analytic.directional_derivative(x, z, w)).max() < 1e-6


def test_nemytskii_remainder_is_first_order():
    response = SaturatingResponse(SPHERE, beta=1.0)
    x = _tube_points(count=50)
    n = SPHERE.normal(x)
    rng = np.random.default_rng(9)
    zeta = random_tangential(x, n, rng)
    eta = random_tangential(x, n, rng)
    fit = nemytskii_remainder(response, x, zeta, eta, np.full(len(x), 1.0 / len(x)))
    assert fit["slope"] >= 0.9
    assert fit["ratios"][-1] < 1e-3


def test_build_response():
    assert isinstance(build_response({"type": "zero"}, SPHERE), ZeroResponse)
    saturating = build_response({"type": "saturating", "beta": [0.05, -0.01], "a_tilt": 0.2}, SPHERE)
    assert saturating.beta == complex(0.05, -0.01)
    assert saturating.lipschitz == pytest.approx(abs(complex(0.05, -0.01)) * 1.2)
    assert saturating.scaled(0.2).beta == 0.2
    linear = build_response({"type": "linear", "c": 0.3}, SPHERE)
    assert linear.c == 0.3 and linear.pec_compatible
    with pytest.raises(ValueError):
        build_response({"type": "cubic"}, SPHERE)


if __name__ == "__main__":
    from utils.check_runner import main
    main(globals())
