# deformations.py - Compactly supported deformation fields with exact Jacobians
"""
Deformation fields h for shape perturbations

Every field is an analytic closure exposing value(x) -> (n, 3) and jacobian(x) -> (n, 3, 3).
Built-ins are cut off smoothly before the artificial boundary so that phi = id + t*h
leaves Gamma_R and the incident load untouched.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


class SmoothCutoff:
    """chi(r) = 1 for r <= r_inner, quintic smoothstep down to 0 at r_outer"""

    def __init__(self, center: Sequence[float], r_inner: float, r_outer: float):
        if not 0.0 <= r_inner < r_outer:
            raise ValueError("Cutoff radii must satisfy 0 <= r_inner < r_outer")
        self.center = np.asarray(center, dtype=float)
        self.r_inner = float(r_inner)
        self.r_outer = float(r_outer)

    def __call__(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (chi, grad chi)"""
        rel = np.asarray(x, dtype=float) - self.center
        r = np.linalg.norm(rel, axis=-1)
        width = self.r_outer - self.r_inner
        s = np.clip((r - self.r_inner) / width, 0.0, 1.0)
        chi = 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)
        dchi = -30.0 * s ** 2 * (1.0 - s) ** 2 / width
        safe_r = np.where(r > 0.0, r, 1.0)
        grad = (dchi / safe_r)[..., None] * rel
        return chi, grad


class DeformationField(ABC):
    """Perturbation direction h in C^1_c(B_R)"""

    name = "deformation"
    support_radius = np.inf

    @abstractmethod
    def value(self, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def jacobian(self, x: np.ndarray) -> np.ndarray:
        pass

    def descriptor(self) -> Dict[str, Any]:
        return {"type": self.name}

    def __add__(self, other: "DeformationField") -> "CombinedDeformation":
        return CombinedDeformation([(1.0, self), (1.0, other)])

    def __mul__(self, scale: float) -> "CombinedDeformation":
        return CombinedDeformation([(float(scale), self)])

    __rmul__ = __mul__

    def __sub__(self, other: "DeformationField") -> "CombinedDeformation":
        return CombinedDeformation([(1.0, self), (-1.0, other)])


class ZeroDeformation(DeformationField):
    name = "zero"
    support_radius = 0.0

    def value(self, x):
        return np.zeros(np.shape(x))

    def jacobian(self, x):
        return np.zeros(np.shape(x) + (3,))


class RadialBump(DeformationField):
    """h = A chi(|x-c|) eta(x) (x-c)/r0 with eta = 1 + tilt*(x-c).axis/r0"""

    name = "radial-bump"

    def __init__(self, amplitude: float = 0.5, center=(0.0, 0.0, 0.0), surface_radius: float = 1.0,
                 r_inner: float = 1.2, r_outer: float = 1.7, tilt: float = 0.3, axis=(0.0, 0.0, 1.0)):
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)
        self.r0 = float(surface_radius)
        self.tilt = float(tilt)
        self.axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
        self.cutoff = SmoothCutoff(center, r_inner, r_outer)
        self.support_radius = float(r_outer)

    def _parts(self, x):
        rel = np.asarray(x, dtype=float) - self.center
        chi, grad_chi = self.cutoff(x)
        eta = 1.0 + self.tilt * (rel @ self.axis) / self.r0
        return rel, chi, grad_chi, eta

    def value(self, x):
        rel, chi, _, eta = self._parts(x)
        return (self.amplitude / self.r0) * (chi * eta)[..., None] * rel

    def jacobian(self, x):
        rel, chi, grad_chi, eta = self._parts(x)
        grad_eta = self.tilt * self.axis / self.r0
        weight = eta[..., None] * grad_chi + chi[..., None] * grad_eta
        jac = (chi * eta)[..., None, None] * np.eye(3) + rel[..., :, None] * weight[..., None, :]
        return (self.amplitude / self.r0) * jac

    def descriptor(self):
        return {"type": self.name, "amplitude": self.amplitude, "center": self.center.tolist(),
                "tilt": self.tilt, "support_radius": self.support_radius}


class TangentialRotation(DeformationField):
    """h = A chi(|x-c|) (w x (x-c)); tangential to every sphere around c"""

    name = "tangential-rotation"

    def __init__(self, amplitude: float = 0.5, center=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0),
                 r_inner: float = 1.2, r_outer: float = 1.7):
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)
        self.axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
        self.cutoff = SmoothCutoff(center, r_inner, r_outer)
        self.support_radius = float(r_outer)

    def value(self, x):
        rel = np.asarray(x, dtype=float) - self.center
        chi, _ = self.cutoff(x)
        return self.amplitude * chi[..., None] * np.cross(self.axis, rel)

    def jacobian(self, x):
        rel = np.asarray(x, dtype=float) - self.center
        chi, grad_chi = self.cutoff(x)
        rot = np.cross(self.axis, rel)
        jac = chi[..., None, None] * _skew(self.axis) + rot[..., :, None] * grad_chi[..., None, :]
        return self.amplitude * jac

    def descriptor(self):
        return {"type": self.name, "amplitude": self.amplitude, "axis": self.axis.tolist(),
                "support_radius": self.support_radius}


class PolynomialDeformation(DeformationField):
    """h_i = a_i + B_ij y_j + C_ijk y_j y_k with y = x - c, optionally multiplied by a cutoff"""

    name = "polynomial"

    def __init__(self, constant, linear, quadratic, center=(0.0, 0.0, 0.0),
                 cutoff: Optional[SmoothCutoff] = None, amplitude: float = 1.0):
        self.constant = np.asarray(constant, dtype=float)
        self.linear = np.asarray(linear, dtype=float)
        self.quadratic = np.asarray(quadratic, dtype=float)
        self.center = np.asarray(center, dtype=float)
        self.cutoff = cutoff
        self.amplitude = float(amplitude)
        self.support_radius = cutoff.r_outer if cutoff is not None else np.inf

    def _poly(self, x):
        y = np.asarray(x, dtype=float) - self.center
        value = (self.constant + np.einsum("ij,...j->...i", self.linear, y)
                 + np.einsum("ijk,...j,...k->...i", self.quadratic, y, y))
        sym = self.quadratic + np.swapaxes(self.quadratic, 1, 2)
        jac = self.linear + np.einsum("ijk,...k->...ij", sym, y)
        return value, jac

    def value(self, x):
        value, _ = self._poly(x)
        if self.cutoff is not None:
            chi, _ = self.cutoff(x)
            value = chi[..., None] * value
        return self.amplitude * value

    def jacobian(self, x):
        value, jac = self._poly(x)
        if self.cutoff is not None:
            chi, grad_chi = self.cutoff(x)
            jac = chi[..., None, None] * jac + value[..., :, None] * grad_chi[..., None, :]
        return self.amplitude * jac


class RandomSmoothDeformation(PolynomialDeformation):
    """Seeded low-order polynomial, cut off before the artificial boundary"""

    name = "random-smooth"

    def __init__(self, seed: int = 0, amplitude: float = 0.5, center=(0.0, 0.0, 0.0),
                 r_inner: float = 1.2, r_outer: float = 1.7):
        rng = np.random.default_rng(seed)
        scale = 1.0 / r_outer
        super().__init__(
            constant=rng.normal(size=3) * 0.5,
            linear=rng.normal(size=(3, 3)) * 0.5 * scale,
            quadratic=rng.normal(size=(3, 3, 3)) * 0.25 * scale ** 2,
            center=center,
            cutoff=SmoothCutoff(center, r_inner, r_outer),
            amplitude=amplitude,
        )
        self.seed = int(seed)

    def descriptor(self):
        return {"type": self.name, "amplitude": self.amplitude, "seed": self.seed,
                "support_radius": self.support_radius}


class CombinedDeformation(DeformationField):
    """Linear combination sum_i w_i h_i"""

    name = "combined"

    def __init__(self, terms: List[Tuple[float, DeformationField]]):
        self.terms = [(float(w), f) for w, f in terms]
        self.support_radius = max((f.support_radius for _, f in self.terms), default=0.0)

    def value(self, x):
        out = np.zeros(np.shape(x))
        for w, f in self.terms:
            out = out + w * f.value(x)
        return out

    def jacobian(self, x):
        out = np.zeros(np.shape(x) + (3,))
        for w, f in self.terms:
            out = out + w * f.jacobian(x)
        return out

    def descriptor(self):
        return {"type": self.name, "terms": [{"weight": w, **f.descriptor()} for w, f in self.terms]}


class NormalPart(DeformationField):
    """(h.n) n with n the normal extension of an analytic surface"""

    name = "normal-part"

    def __init__(self, deformation: DeformationField, surface):
        self.deformation = deformation
        self.surface = surface
        self.support_radius = deformation.support_radius

    def value(self, x):
        n = self.surface.normal(x)
        h_n = np.einsum("...d,...d->...", self.deformation.value(x), n)
        return h_n[..., None] * n

    def jacobian(self, x):
        n = self.surface.normal(x)
        h = self.deformation.value(x)
        jac_h = self.deformation.jacobian(x)
        jac_n = self.surface.normal_jacobian(x)
        h_n = np.einsum("...d,...d->...", h, n)
        grad_hn = np.einsum("...ji,...j->...i", jac_h, n) + np.einsum("...ji,...j->...i", jac_n, h)
        return n[..., :, None] * grad_hn[..., None, :] + h_n[..., None, None] * jac_n

    def descriptor(self):
        return {"type": self.name, "of": self.deformation.descriptor()}


def hadamard_split(deformation: DeformationField, surface) -> Tuple[DeformationField, DeformationField]:
    """h = (h.n) n + h_T"""
    normal = NormalPart(deformation, surface)
    return normal, deformation - normal


def build_deformation(spec: Dict[str, Any], surface_radius: float = 1.0,
                      outer_radius: float = 2.0) -> DeformationField:
    """
    Create a deformation from a config descriptor

    Args:
        spec: dict with type, amplitude and optional center, axis, seed, inner_radius, outer_radius
        surface_radius: radius of the obstacle / interface sphere
        outer_radius: radius (or half-width) of the artificial boundary
    """
    kind = spec.get("type", "radial-bump")
    amplitude = float(spec.get("amplitude", 0.5))
    center = spec.get("center", (0.0, 0.0, 0.0))
    r_inner = spec.get("inner_radius")
    r_outer = spec.get("outer_radius")
    if r_inner is None:
        r_inner = surface_radius + 0.2 * (outer_radius - surface_radius)
    if r_outer is None:
        r_outer = surface_radius + 0.7 * (outer_radius - surface_radius)

    if kind == "zero":
        return ZeroDeformation()
    if kind == "radial-bump":
        return RadialBump(amplitude, center, surface_radius, r_inner, r_outer,
                          tilt=float(spec.get("tilt", 0.3)), axis=spec.get("axis", (0.0, 0.0, 1.0)))
    if kind == "tangential-rotation":
        return TangentialRotation(amplitude, center, spec.get("axis", (0.0, 0.0, 1.0)), r_inner, r_outer)
    if kind == "random-smooth":
        return RandomSmoothDeformation(int(spec.get("seed", 0)), amplitude, center, r_inner, r_outer)
    raise ValueError(f"Unknown deformation type '{kind}'")
