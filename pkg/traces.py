# traces.py - Tangential traces on Gamma, the transported trace and its first variation
"""
Tangential trace operators

All operators act pointwise on arrays of shape (..., 3) and broadcast over leading axes;
traces are stored at the boundary quadrature points, never as edge coefficients.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from geometry import GeometricKit
from utils.errors import DegenerateNormal

logger = logging.getLogger(__name__)

TANGENCY_TOLERANCE = 1e-10


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...d,...d->...", a, b)


def tangential_component(U: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """gamma_T U = n x (U x n) = U - (U.n) n"""
    U = np.asarray(U)
    return U - _dot(U, normals)[..., None] * normals


def tangential_trace(U: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """gamma_t U = n x U (rotated trace); gamma_T U = -n x gamma_t U"""
    normals = np.broadcast_to(normals, np.shape(U))
    return np.cross(normals, U)


def transported_trace(U: np.ndarray, kit: GeometricKit) -> np.ndarray:
    """gamma_{T,h} U = P_h J_phi^-T gamma_T U, the definition used at mesh level"""
    if kit.projector is None:
        raise DegenerateNormal("Geometric kit has no surface data")
    return np.einsum("...ij,...j->...i", kit.trace_map, tangential_component(U, kit.normals))


def transported_trace_smooth(U: np.ndarray, kit: GeometricKit) -> np.ndarray:
    """n_h x (J_phi^-T U x n_h), valid for fields smooth up to Gamma"""
    if kit.normal_t is None:
        raise DegenerateNormal("Geometric kit has no surface data")
    inv_t = np.swapaxes(np.linalg.inv(kit.jacobian), -1, -2)
    return tangential_component(np.einsum("...ij,...j->...i", inv_t, U), kit.normal_t)


def trace_variation(U: np.ndarray, normals: np.ndarray, delta_n: np.ndarray,
                    jacobian_h: np.ndarray) -> np.ndarray:
    """
    First variation of the transported trace

    dn x (U x n) + n x (U x dn) - n x (J_h^T U x n), expanded as
    -n (dn.U) - dn (n.U) - P J_h^T U
    """
    U = np.asarray(U)
    jt_u = np.einsum("...ji,...j->...i", jacobian_h, U)
    return (-normals * _dot(delta_n, U)[..., None]
            - delta_n * _dot(normals, U)[..., None]
            - tangential_component(jt_u, normals))


@dataclass
class TangentialField:
    """Tangential vector data at surface quadrature points with their normals and weights"""
    values: np.ndarray                    # (..., 3) complex
    normals: np.ndarray                   # broadcastable to values
    weights: Optional[np.ndarray] = None  # quadrature weights, shape values.shape[:-1]

    def normal_residual(self) -> float:
        scale = max(float(np.abs(self.values).max(initial=0.0)), 1.0)
        return float(np.abs(_dot(self.values, self.normals)).max(initial=0.0)) / scale

    def is_tangential(self, tolerance: float = TANGENCY_TOLERANCE) -> bool:
        return self.normal_residual() <= tolerance

    def inner(self, other: "TangentialField") -> complex:
        """L2(Gamma) pairing, conjugating the second argument"""
        return complex(np.sum(self.weights * _dot(self.values, np.conj(other.values))))

    def l2_norm(self) -> float:
        return float(np.sqrt(max(self.inner(self).real, 0.0)))

    def rotated(self) -> "TangentialField":
        return TangentialField(tangential_trace(self.values, self.normals), self.normals, self.weights)

    @classmethod
    def from_field(cls, U: np.ndarray, normals: np.ndarray, weights=None) -> "TangentialField":
        return cls(tangential_component(U, normals), normals, weights)


@dataclass
class TraceVariation:
    """Values of the trace variation with the bound constant measured on them"""
    values: np.ndarray
    weights: Optional[np.ndarray] = None

    def l2_norm(self) -> float:
        w = np.ones(self.values.shape[:-1]) if self.weights is None else self.weights
        return float(np.sqrt(np.sum(w * np.sum(np.abs(self.values) ** 2, axis=-1))))

    def bound_constant(self, h_c1_norm: float, u_norm: float) -> float:
        """C in |trace variation| <= C |h|_C1 |U|, measured"""
        if h_c1_norm == 0.0 or u_norm == 0.0:
            return 0.0
        return self.l2_norm() / (h_c1_norm * u_norm)


def variation_of_field(U: np.ndarray, kit: GeometricKit, weights=None) -> TraceVariation:
    """Trace variation of gamma_T U using the kit's reference normals and first variations"""
    values = trace_variation(tangential_component(U, kit.normals), kit.normals, kit.delta_n, kit.jacobian_h)
    return TraceVariation(values, weights)
