# response.py - Pointwise nonlinear boundary responses g(x, z) and Nemytskii utilities
"""
Boundary responses

A response is evaluated at points x of a tubular neighborhood of Gamma and complex
3-vectors z. Its spatial dependence enters through the normal extension n(x) of the
reference surface and an amplitude a(x) that is constant along normals.
All evaluators broadcast over leading axes.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np

from geometry import AnalyticSurface
from utils.errors import EmptySampleSet, OutsideTubularNeighborhood
from utils.rates import fit_loglog_slope

logger = logging.getLogger(__name__)

E3 = np.array([0.0, 0.0, 1.0])


def _dot(a, b):
    return np.einsum("...d,...d->...", a, b)


def _sq(a):
    return np.sum(np.abs(a) ** 2, axis=-1)


def _project(z, n):
    return z - _dot(z, n)[..., None] * n


class BoundaryResponse(ABC):
    """g(x, z) with its R-linear derivative g_z, spatial action grad_x g . h and mixed derivative"""

    name = "response"
    field_independent = False
    is_zero = False
    pec_compatible = False

    def __init__(self, surface: AnalyticSurface, tube_width: Optional[float] = None):
        self.surface = surface
        self.tube_width = surface.tube_width() if tube_width is None else float(tube_width)

    # -- metadata -----------------------------------------------------------

    @property
    @abstractmethod
    def lipschitz(self) -> float:
        """Declared L_g"""

    @property
    def derivative_bound(self) -> float:
        """Declared C_g"""
        return self.lipschitz

    def growth_envelopes(self) -> Dict[str, float]:
        """psi_0, psi_1 constants for reports"""
        return {"psi0": 0.0, "psi1": self.derivative_bound}

    def describe(self) -> Dict[str, Any]:
        return {"type": self.name, "lipschitz": self.lipschitz, "derivative_bound": self.derivative_bound,
                **self.growth_envelopes()}

    # -- helpers --------------------------------------------------------------

    def check_points(self, x: np.ndarray) -> None:
        if not np.isfinite(self.tube_width):
            return
        distance = np.abs(self.surface.signed_distance(x))
        if np.any(distance >= self.tube_width):
            raise OutsideTubularNeighborhood(
                f"Point at distance {float(distance.max()):.3e} from Gamma, tube width {self.tube_width:.3e}"
            )

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.surface.normal(x)

    # -- evaluators -----------------------------------------------------------

    @abstractmethod
    def _value(self, x, z, n): ...

    @abstractmethod
    def _derivative(self, x, z, w, n): ...

    @abstractmethod
    def _spatial(self, x, z, h, n): ...

    def evaluate(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self.check_points(x)
        return self._value(x, np.asarray(z, dtype=complex), self.normal(x))

    def directional_derivative(self, x: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        """g_z(x, z; w), R-linear in w"""
        x = np.asarray(x, dtype=float)
        self.check_points(x)
        return self._derivative(x, np.asarray(z, dtype=complex), np.asarray(w, dtype=complex), self.normal(x))

    def spatial_gradient_action(self, x: np.ndarray, z: np.ndarray, h: np.ndarray) -> np.ndarray:
        """grad_x g(x, z) . h at fixed z"""
        x = np.asarray(x, dtype=float)
        self.check_points(x)
        return self._spatial(x, np.asarray(z, dtype=complex), np.asarray(h, dtype=float), self.normal(x))

    def mixed_derivative(self, x: np.ndarray, z: np.ndarray, w: np.ndarray, h: np.ndarray,
                         step: float = 1e-6) -> np.ndarray:
        """g_xz(x, z; w) . h by central differences of the spatial action in z"""
        z = np.asarray(z, dtype=complex)
        w = np.asarray(w, dtype=complex)
        plus = self.spatial_gradient_action(x, z + step * w, h)
        minus = self.spatial_gradient_action(x, z - step * w, h)
        return (plus - minus) / (2.0 * step)

    def normal_variation(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Directional derivative of the normal extension, J_n h"""
        return np.einsum("...ij,...j->...i", self.surface.normal_jacobian(x), h)

    def nemytskii(self, x: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        """G(zeta) = g(., zeta(.)) on sampled points"""
        return self.evaluate(x, zeta)


class ZeroResponse(BoundaryResponse):
    name = "zero"
    field_independent = True
    is_zero = True
    pec_compatible = True

    @property
    def lipschitz(self) -> float:
        return 0.0

    def _value(self, x, z, n):
        return np.zeros(np.broadcast_shapes(x.shape, z.shape), dtype=complex)

    def _derivative(self, x, z, w, n):
        return np.zeros(np.broadcast_shapes(x.shape, z.shape, w.shape), dtype=complex)

    def _spatial(self, x, z, h, n):
        return np.zeros(np.broadcast_shapes(x.shape, z.shape, h.shape), dtype=complex)


class _AmplitudeMixin:
    """a(x) = a_const (1 + a_tilt n(x).e3), constant along normals"""

    a_const: float
    a_tilt: float

    def amplitude(self, x, n):
        return self.a_const * (1.0 + self.a_tilt * n[..., 2])

    def amplitude_gradient_action(self, x, h):
        jac_n = self.surface.normal_jacobian(x)
        return self.a_const * self.a_tilt * np.einsum("...j,...j->...", jac_n[..., 2, :], h)

    @property
    def amplitude_sup(self) -> float:
        return abs(self.a_const) * (1.0 + abs(self.a_tilt))


class LinearResponse(_AmplitudeMixin, BoundaryResponse):
    """g = c a(x) P_T z (C-linear)"""

    name = "linear"
    pec_compatible = True

    def __init__(self, surface: AnalyticSurface, c: complex = 0.1, a_const: float = 1.0,
                 a_tilt: float = 0.0, tube_width: Optional[float] = None):
        super().__init__(surface, tube_width)
        self.c = complex(c)
        self.a_const = float(a_const)
        self.a_tilt = float(a_tilt)

    @property
    def lipschitz(self) -> float:
        return abs(self.c) * self.amplitude_sup

    def _value(self, x, z, n):
        return self.c * self.amplitude(x, n)[..., None] * _project(z, n)

    def _derivative(self, x, z, w, n):
        return self.c * self.amplitude(x, n)[..., None] * _project(w, n)

    def _spatial(self, x, z, h, n):
        n_dot = self.normal_variation(x, h)
        u = _project(z, n)
        u_dot = -n_dot * _dot(z, n)[..., None] - n * _dot(z, n_dot)[..., None]
        a = self.amplitude(x, n)[..., None]
        a_dot = self.amplitude_gradient_action(x, h)[..., None]
        return self.c * (a_dot * u + a * u_dot)

    def describe(self):
        return {**super().describe(), "c": [self.c.real, self.c.imag], "a_const": self.a_const, "a_tilt": self.a_tilt}


class SaturatingResponse(_AmplitudeMixin, BoundaryResponse):
    """g = beta a(x) P_T z / (1 + |P_T z|^2)"""

    name = "saturating"

    def __init__(self, surface: AnalyticSurface, beta: complex = 0.1, a_const: float = 1.0,
                 a_tilt: float = 0.0, tube_width: Optional[float] = None):
        super().__init__(surface, tube_width)
        self.beta = complex(beta)
        self.a_const = float(a_const)
        self.a_tilt = float(a_tilt)

    @property
    def lipschitz(self) -> float:
        return abs(self.beta) * self.amplitude_sup

    def growth_envelopes(self):
        return {"psi0": self.lipschitz / 2.0, "psi1": self.lipschitz}

    def _value(self, x, z, n):
        u = _project(z, n)
        scale = self.beta * self.amplitude(x, n) / (1.0 + _sq(u))
        return scale[..., None] * u

    def _derivative(self, x, z, w, n):
        u = _project(z, n)
        v = _project(w, n)
        denom = 1.0 + _sq(u)
        cross = np.real(_dot(u, np.conj(v)))
        ba = (self.beta * self.amplitude(x, n))[..., None]
        return ba * (v / denom[..., None] - 2.0 * u * (cross / denom ** 2)[..., None])

    def _spatial(self, x, z, h, n):
        n_dot = self.normal_variation(x, h)
        u = _project(z, n)
        u_dot = -n_dot * _dot(z, n)[..., None] - n * _dot(z, n_dot)[..., None]
        denom = 1.0 + _sq(u)
        s_dot = 2.0 * np.real(_dot(u, np.conj(u_dot)))
        a = self.amplitude(x, n)[..., None]
        a_dot = self.amplitude_gradient_action(x, h)[..., None]
        return self.beta * (a_dot * u / denom[..., None]
                            + a * (u_dot / denom[..., None] - u * (s_dot / denom ** 2)[..., None]))

    def scaled(self, beta: complex) -> "SaturatingResponse":
        return SaturatingResponse(self.surface, beta, self.a_const, self.a_tilt, self.tube_width)

    def describe(self):
        return {**super().describe(), "beta": [self.beta.real, self.beta.imag],
                "a_const": self.a_const, "a_tilt": self.a_tilt}


class ConstantDatumResponse(_AmplitudeMixin, BoundaryResponse):
    """z-independent tangential datum g = a(x) P_T c"""

    name = "constant"
    field_independent = True
    pec_compatible = True

    def __init__(self, surface: AnalyticSurface, vector=(1.0, 0.0, 0.0), a_const: float = 1.0,
                 a_tilt: float = 0.0, tube_width: Optional[float] = None):
        super().__init__(surface, tube_width)
        self.vector = np.asarray(vector, dtype=complex)
        self.a_const = float(a_const)
        self.a_tilt = float(a_tilt)

    @property
    def lipschitz(self) -> float:
        return 0.0

    def _value(self, x, z, n):
        out = self.amplitude(x, n)[..., None] * _project(np.broadcast_to(self.vector, n.shape), n)
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, z.shape)).copy()

    def _derivative(self, x, z, w, n):
        return np.zeros(np.broadcast_shapes(x.shape, z.shape, w.shape), dtype=complex)

    def _spatial(self, x, z, h, n):
        c = np.broadcast_to(self.vector, n.shape)
        n_dot = self.normal_variation(x, h)
        u = _project(c, n)
        u_dot = -n_dot * _dot(c, n)[..., None] - n * _dot(c, n_dot)[..., None]
        a = self.amplitude(x, n)[..., None]
        a_dot = self.amplitude_gradient_action(x, h)[..., None]
        out = a_dot * u + a * u_dot
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, z.shape)).copy()


class FiniteDifferenceResponse(BoundaryResponse):
    """Wraps a user g(x, z) without analytic derivatives; central differences with step 1e-6 (1 + |z|)"""

    name = "finite-difference"

    def __init__(self, surface: AnalyticSurface, function: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 lipschitz: float, tube_width: Optional[float] = None):
        super().__init__(surface, tube_width)
        self.function = function
        self._lipschitz = float(lipschitz)

    @property
    def lipschitz(self) -> float:
        return self._lipschitz

    def _step(self, z):
        return 1e-6 * (1.0 + np.sqrt(_sq(z)))[..., None]

    def _value(self, x, z, n):
        return np.asarray(self.function(x, z), dtype=complex)

    def _derivative(self, x, z, w, n):
        step = self._step(z)
        return (self.function(x, z + step * w) - self.function(x, z - step * w)) / (2.0 * step)

    def _spatial(self, x, z, h, n):
        step = self._step(z)
        return (self.function(x + step * h, z) - self.function(x - step * h, z)) / (2.0 * step)


# ---------------------------------------------------------------------------
# Nemytskii utilities
# ---------------------------------------------------------------------------

def random_tangential(points: np.ndarray, normals: np.ndarray, rng: np.random.Generator,
                      scale: float = 1.0) -> np.ndarray:
    z = rng.normal(size=points.shape) + 1j * rng.normal(size=points.shape)
    return scale * _project(z, normals)


def estimate_lipschitz(response: BoundaryResponse, x: np.ndarray, z1: np.ndarray, z2: np.ndarray) -> Dict[str, Any]:
    """
    Max of |g(x, z1) - g(x, z2)| / |z1 - z2| over the sample set, against the declared L_g

    Returns:
        dict with the sampled estimate, the declared constant and exceeds_declared

    Raises:
        EmptySampleSet: no sample with z1 != z2
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    z1 = np.asarray(z1, dtype=complex).reshape(-1, 3)
    z2 = np.asarray(z2, dtype=complex).reshape(-1, 3)
    gap = np.sqrt(_sq(z1 - z2))
    keep = gap > 0.0
    if x.shape[0] == 0 or not np.any(keep):
        raise EmptySampleSet("Lipschitz estimate needs at least one pair with z1 != z2")
    diff = np.sqrt(_sq(response.evaluate(x[keep], z1[keep]) - response.evaluate(x[keep], z2[keep])))
    estimate = float(np.max(diff / gap[keep]))
    exceeds = estimate > response.lipschitz * (1.0 + 1e-6) + 1e-14
    if exceeds:
        logger.warning(f"Sampled Lipschitz ratio {estimate:.4e} exceeds declared L_g {response.lipschitz:.4e}")
    return {"estimate": estimate, "declared": float(response.lipschitz), "samples": int(np.sum(keep)),
            "exceeds_declared": bool(exceeds)}


def nemytskii_remainder(response: BoundaryResponse, x: np.ndarray, zeta: np.ndarray, eta: np.ndarray,
                        weights: np.ndarray, scales: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4)) -> Dict[str, Any]:
    """
    Remainder |G(zeta + s eta) - G(zeta) - g_z(zeta; s eta)|_L2 / |s eta|_L2 over decreasing s
    """
    def l2(v):
        return float(np.sqrt(np.sum(weights * _sq(v))))

    base = response.evaluate(x, zeta)
    ratios = []
    for s in scales:
        step = s * eta
        remainder = response.evaluate(x, zeta + step) - base - response.directional_derivative(x, zeta, step)
        norm = l2(step)
        ratios.append(l2(remainder) / norm if norm > 0 else 0.0)
    fit = fit_loglog_slope(scales, ratios)
    fit["ratios"] = ratios
    return fit


def check_pec_compatibility(response: BoundaryResponse, x: np.ndarray, normals: np.ndarray,
                            lift_energy: Callable[[np.ndarray], float], l2_norm: Callable[[np.ndarray], float],
                            rng: np.random.Generator, samples: int = 5) -> Dict[str, Any]:
    """
    Sampled L_pec: energy of lift(g(zeta1) - g(zeta2)) against |zeta1 - zeta2|_L2

    lift_energy maps boundary data at the quadrature points to the H(curl) norm of its lift.
    """
    ratios = []
    for _ in range(samples):
        zeta1 = random_tangential(x, normals, rng)
        zeta2 = random_tangential(x, normals, rng)
        gap = l2_norm(zeta1 - zeta2)
        if gap == 0.0:
            continue
        data = response.evaluate(x, zeta1) - response.evaluate(x, zeta2)
        ratios.append(lift_energy(data) / gap)
    if not ratios:
        raise EmptySampleSet("No usable samples for the PEC compatibility check")
    return {"l_pec": float(max(ratios)), "samples": len(ratios), "pec_compatible": response.pec_compatible}


def build_response(spec: Dict[str, Any], surface: AnalyticSurface) -> BoundaryResponse:
    """Create a response from a config descriptor {type, beta, c, a_const, a_tilt, vector}"""
    kind = spec.get("type", "zero")
    a_const = float(spec.get("a_const", 1.0))
    a_tilt = float(spec.get("a_tilt", 0.0))
    if kind == "zero":
        return ZeroResponse(surface)
    if kind == "linear":
        return LinearResponse(surface, _as_complex(spec.get("c", 0.1)), a_const, a_tilt)
    if kind == "saturating":
        return SaturatingResponse(surface, _as_complex(spec.get("beta", 0.1)), a_const, a_tilt)
    if kind == "constant":
        return ConstantDatumResponse(surface, spec.get("vector", (1.0, 0.0, 0.0)), a_const, a_tilt)
    raise ValueError(f"Unknown response type '{kind}'")


def _as_complex(value) -> complex:
    if isinstance(value, (list, tuple)):
        return complex(float(value[0]), float(value[1]))
    return complex(value)
