# discretization.py - Lowest-order edge elements and complex sparse assembly
"""
Edge-element discretization of the scattering problems

EdgeSpace holds the lowest-order curl-conforming basis on a tetrahedral mesh with one
complex coefficient per globally oriented edge. The assembly functions build every
sesquilinear form and load of the three problems, optionally with the pulled-back
coefficients of a deformation. ScatteringProblem bundles them for one problem class.

Matrices follow A[i, j] = a(phi_j, phi_i); the basis is real so test conjugation is implicit.
"""

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import bmat, coo_matrix, csr_matrix, diags
from scipy.sparse.linalg import splu

from geometry import (
    FACE_EDGES,
    LOCAL_EDGES,
    REGION_INTERIOR,
    GeometricKit,
    Mesh,
    build_diffeomorphism,
    geometric_kit,
)
from response import BoundaryResponse
from traces import tangential_component
from utils.errors import (
    PolarizationNotTransverse,
    QuadratureFailure,
    SingularExtension,
    UnsupportedOuterBoundary,
)
from utils.quadrature import EDGE_POINTS, EDGE_WEIGHTS, TET_BARYCENTRIC, TET_WEIGHTS, tet_points
from utils.spherical_modes import hankel_ratio_coefficients, real_vsh

logger = logging.getLogger(__name__)

PROBLEMS = ("nibc", "npec", "ntc")
ASSEMBLY_CHUNK = 4096


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class WaveParameters:
    """Wavenumber, impedance, interior material and incident plane wave p exp(i k d.x)"""
    k: float = 1.0
    impedance: complex = 1.0
    mu_interior: complex = 1.0
    eps_interior: complex = 1.0
    direction: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    polarization: Tuple[complex, complex, complex] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("Wavenumber k must be positive")
        if complex(self.impedance).real <= 0:
            raise ValueError("Impedance must have positive real part")
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("Incident direction must be a unit vector")
        self.impedance = complex(self.impedance)
        self.mu_interior = complex(self.mu_interior)
        self.eps_interior = complex(self.eps_interior)

    @property
    def d(self) -> np.ndarray:
        return np.asarray(self.direction, dtype=float)

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.polarization, dtype=complex)

    def check_transverse(self) -> None:
        if abs(np.dot(self.p, self.d)) >= 1e-12:
            raise PolarizationNotTransverse(f"|p.d| = {abs(np.dot(self.p, self.d)):.3e}")

    def incident(self, x: np.ndarray) -> np.ndarray:
        phase = np.exp(1j * self.k * (x @ self.d))
        return phase[..., None] * self.p

    def incident_curl(self, x: np.ndarray) -> np.ndarray:
        return 1j * self.k * np.cross(self.d, self.incident(x))

    def region_values(self, regions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(1/mu_r, eps_r) per tet; exterior values are 1"""
        inside = regions == REGION_INTERIOR
        mu_inv = np.where(inside, 1.0 / self.mu_interior, 1.0 + 0j)
        eps = np.where(inside, self.eps_interior, 1.0 + 0j)
        return mu_inv, eps

    def describe(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "impedance": [self.impedance.real, self.impedance.imag],
            "mu_interior": [self.mu_interior.real, self.mu_interior.imag],
            "eps_interior": [self.eps_interior.real, self.eps_interior.imag],
            "direction": list(map(float, self.direction)),
            "polarization": [[complex(c).real, complex(c).imag] for c in self.polarization],
        }


@dataclass(frozen=True)
class RadiationOperator:
    """Approximation of the exterior map on Gamma_R"""
    variant: str = "silver-mueller-1"
    radius: float = 2.0
    order: int = 0
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.variant not in ("silver-mueller-1", "spectral-dtn"):
            raise ValueError(f"Unknown radiation operator '{self.variant}'")

    def modal_coefficients(self, k: float) -> Tuple[np.ndarray, np.ndarray]:
        return hankel_ratio_coefficients(k, self.radius, self.order)


# ---------------------------------------------------------------------------
# Edge space
# ---------------------------------------------------------------------------

def edge_basis(bary: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """
    Values of the six edge functions lambda_i grad lambda_j - lambda_j grad lambda_i

    Args:
        bary: (n, nq, 4) barycentric coordinates
        grads: (n, 4, 3) barycentric gradients of the containing tets

    Returns:
        (n, nq, 6, 3)
    """
    li = bary[..., LOCAL_EDGES[:, 0]]
    lj = bary[..., LOCAL_EDGES[:, 1]]
    gi = grads[:, LOCAL_EDGES[:, 0]][:, None]
    gj = grads[:, LOCAL_EDGES[:, 1]][:, None]
    return li[..., None] * gj - lj[..., None] * gi


def edge_curls(grads: np.ndarray) -> np.ndarray:
    """(n, 6, 3) constant curls 2 grad lambda_i x grad lambda_j"""
    return 2.0 * np.cross(grads[:, LOCAL_EDGES[:, 0]], grads[:, LOCAL_EDGES[:, 1]])


@dataclass
class BoundaryQuadrature:
    """Three-point rule on a tagged patch with the edge functions of the adjacent tets"""
    tag: str
    points: np.ndarray          # (nf, nq, 3)
    weights: np.ndarray         # (nf, nq)
    normals: np.ndarray         # (nf, 3)
    tets: np.ndarray            # (nf,)
    dofs: np.ndarray            # (nf, 3) face edges
    values: np.ndarray          # (nf, nq, 3, 3) face edge functions
    traces: np.ndarray          # (nf, nq, 3, 3) their tangential components
    curls: np.ndarray           # (nf, 3, 3) face edge curls
    all_dofs: np.ndarray        # (nf, 6)
    all_values: np.ndarray      # (nf, nq, 6, 3)
    all_curls: np.ndarray       # (nf, 6, 3)
    sizes: np.ndarray           # (nf,) size of the adjacent tet
    inner_tets: Optional[np.ndarray] = None
    inner_dofs: Optional[np.ndarray] = None
    inner_values: Optional[np.ndarray] = None
    inner_curls: Optional[np.ndarray] = None

    @property
    def n_faces(self) -> int:
        return int(self.points.shape[0])

    @property
    def point_normals(self) -> np.ndarray:
        return np.broadcast_to(self.normals[:, None, :], self.points.shape)

    @property
    def rotated(self) -> np.ndarray:
        """n x phi_i for the face edges"""
        return np.cross(self.normals[:, None, None, :], self.values)

    def field(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("fqed,fe->fqd", self.all_values, coeffs[self.all_dofs])

    def trace(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("fqed,fe->fqd", self.traces, coeffs[self.dofs])

    def curl(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("fed,fe->fd", self.all_curls, coeffs[self.all_dofs])

    def inner_field(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("fqed,fe->fqd", self.inner_values, coeffs[self.inner_dofs])

    def inner_curl(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("fed,fe->fd", self.inner_curls, coeffs[self.inner_dofs])

    def l2_norm(self, values: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.weights * np.sum(np.abs(values) ** 2, axis=-1))))


class EdgeSpace:
    """Lowest-order Nedelec space: one coefficient per edge, DoF = line integral along the edge"""

    def __init__(self, mesh: Mesh, boundary_tag: Optional[str] = None, threads: int = 1):
        self.mesh = mesh
        self.threads = max(int(threads), 1)
        if boundary_tag is None:
            boundary_tag = "interface" if mesh.has_tag("interface") else "gamma"
        self.boundary_tag = boundary_tag

        self.dofs = mesh.tet_edges
        self.qpoints = tet_points(mesh.tet_vertices())
        self.qweights = mesh.volumes[:, None] * TET_WEIGHTS[None, :]
        bary = np.broadcast_to(TET_BARYCENTRIC, (mesh.n_tets,) + TET_BARYCENTRIC.shape)
        self.basis = edge_basis(bary, mesh.bary_grads)
        self.curls = edge_curls(mesh.bary_grads)
        self._boundaries: Dict[str, BoundaryQuadrature] = {}
        logger.debug(f"EdgeSpace on {mesh.name}: {self.ndofs} DoFs")

    @property
    def ndofs(self) -> int:
        return self.mesh.n_edges

    @cached_property
    def gamma_dofs(self) -> np.ndarray:
        return self.mesh.edge_dofs(self.boundary_tag)

    @cached_property
    def outer_dofs(self) -> np.ndarray:
        return self.mesh.edge_dofs("gammaR")

    def interior_mask(self, exclude: Sequence[str] = ()) -> np.ndarray:
        mask = np.ones(self.ndofs, dtype=bool)
        for tag in exclude:
            mask[self.mesh.edge_dofs(tag)] = False
        return mask

    def boundary(self, tag: Optional[str] = None) -> BoundaryQuadrature:
        tag = tag or self.boundary_tag
        if tag not in self._boundaries:
            self._boundaries[tag] = self._build_boundary(tag)
        return self._boundaries[tag]

    def _build_boundary(self, tag: str) -> BoundaryQuadrature:
        mesh = self.mesh
        patch = mesh.patch(tag)
        points = patch.quadrature_points(mesh)
        normals = patch.normals

        def side(tets):
            bary = mesh.barycentric(points, tets[:, None])
            grads = mesh.bary_grads[tets]
            return mesh.tet_edges[tets], edge_basis(bary, grads), edge_curls(grads)

        all_dofs, all_values, all_curls = side(patch.tets)
        local = FACE_EDGES[patch.local_face]
        values = np.take_along_axis(all_values, local[:, None, :, None], axis=2)
        quad = BoundaryQuadrature(
            tag=tag, points=points, weights=patch.quadrature_weights(), normals=normals, tets=patch.tets,
            dofs=np.take_along_axis(all_dofs, local, axis=1),
            values=values,
            traces=tangential_component(values, normals[:, None, None, :]),
            curls=np.take_along_axis(all_curls, local[:, :, None], axis=1),
            all_dofs=all_dofs, all_values=all_values, all_curls=all_curls,
            sizes=mesh.tet_sizes()[patch.tets],
        )
        if np.all(patch.inner_tets >= 0):
            inner_dofs, inner_values, inner_curls = side(patch.inner_tets)
            quad.inner_tets = patch.inner_tets
            quad.inner_dofs = inner_dofs
            quad.inner_values = inner_values
            quad.inner_curls = inner_curls
        return quad

    # -- evaluation -------------------------------------------------------------

    def values_at_quadrature(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("tqed,te->tqd", self.basis, coeffs[self.dofs])

    def curls_per_tet(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("ted,te->td", self.curls, coeffs[self.dofs])

    def evaluate(self, coeffs: np.ndarray, points: np.ndarray, tets: Optional[np.ndarray] = None) -> np.ndarray:
        points = np.atleast_2d(points)
        if tets is None:
            tets = self.mesh.locate(points)
        bary = self.mesh.barycentric(points, tets)[:, None, :]
        values = edge_basis(bary, self.mesh.bary_grads[tets])[:, 0]
        return np.einsum("ped,pe->pd", values, coeffs[self.mesh.tet_edges[tets]])

    def interpolate(self, field_fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Edge moments int_e E.t ds with the 3-point Gauss rule"""
        start = self.mesh.vertices[self.mesh.edges[:, 0]]
        tangent = self.mesh.vertices[self.mesh.edges[:, 1]] - start
        points = start[:, None, :] + EDGE_POINTS[None, :, None] * tangent[:, None, :]
        values = np.asarray(field_fn(points.reshape(-1, 3))).reshape(points.shape)
        return np.einsum("q,eqd,ed->e", EDGE_WEIGHTS, values, tangent)

    # -- chunked element loops ------------------------------------------------

    def map_elements(self, fn: Callable[[slice], np.ndarray], count: int) -> np.ndarray:
        """Evaluate fn over element slices, in order, on the thread pool"""
        if self.threads <= 1 or count <= ASSEMBLY_CHUNK:
            return fn(slice(0, count))
        slices = [slice(i, min(i + ASSEMBLY_CHUNK, count)) for i in range(0, count, ASSEMBLY_CHUNK)]
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            parts = list(executor.map(fn, slices))
        return np.concatenate(parts)

    def scatter(self, rows: np.ndarray, cols: np.ndarray, local: np.ndarray) -> csr_matrix:
        r = np.broadcast_to(rows[:, :, None], local.shape)
        c = np.broadcast_to(cols[:, None, :], local.shape)
        return coo_matrix((local.ravel(), (r.ravel(), c.ravel())), shape=(self.ndofs, self.ndofs)).tocsr()

    def scatter_vector(self, rows: np.ndarray, local: np.ndarray) -> np.ndarray:
        out = np.zeros(self.ndofs, dtype=complex)
        np.add.at(out, rows.ravel(), local.ravel())
        return out


# ---------------------------------------------------------------------------
# Volume and boundary forms
# ---------------------------------------------------------------------------

def _coefficient_field(space: EdgeSpace, coefficient, metric: Optional[np.ndarray]) -> np.ndarray:
    nt, nq = space.qweights.shape
    if coefficient is None:
        coefficient = 1.0
    coef = np.asarray(coefficient)
    if coef.ndim == 1:
        coef = coef[:, None]
    coef = np.broadcast_to(coef, (nt, nq))
    if metric is None:
        metric = np.broadcast_to(np.eye(3), (nt, nq, 3, 3))
    metric = np.asarray(metric)
    if metric.shape != (nt, nq, 3, 3):
        raise QuadratureFailure(f"Coefficient shape {metric.shape} does not match the 4-point rule")
    field_values = coef[..., None, None] * metric
    if not np.all(np.isfinite(field_values)):
        raise QuadratureFailure("Non-finite coefficient at a quadrature point")
    return field_values


def assemble_curl_curl(space: EdgeSpace, coefficient=None, metric: Optional[np.ndarray] = None) -> csr_matrix:
    """int (curl phi_j)^T C (curl phi_i) with C = coefficient * metric per quadrature point"""
    C = _coefficient_field(space, coefficient, metric)

    def local(s):
        weighted = np.einsum("tq,tqab->tab", space.qweights[s], C[s])
        return np.einsum("tia,tab,tjb->tij", space.curls[s], weighted, space.curls[s])

    return space.scatter(space.dofs, space.dofs, space.map_elements(local, space.mesh.n_tets))


def assemble_mass(space: EdgeSpace, coefficient=None, metric: Optional[np.ndarray] = None) -> csr_matrix:
    """int phi_j^T C phi_i"""
    C = _coefficient_field(space, coefficient, metric)

    def local(s):
        c_phi = np.einsum("tqab,tqjb->tqja", C[s], space.basis[s])
        return np.einsum("tq,tqia,tqja->tij", space.qweights[s], space.basis[s], c_phi)

    return space.scatter(space.dofs, space.dofs, space.map_elements(local, space.mesh.n_tets))


def assemble_mixed_curl(space: EdgeSpace) -> csr_matrix:
    """C[i, j] = int phi_j . curl phi_i"""
    def local(s):
        mean = np.einsum("tq,tqjd->tjd", space.qweights[s], space.basis[s])
        return np.einsum("tid,tjd->tij", space.curls[s], mean)

    return space.scatter(space.dofs, space.dofs, space.map_elements(local, space.mesh.n_tets))


def _mapped(traces: np.ndarray, trace_map: Optional[np.ndarray]) -> np.ndarray:
    if trace_map is None:
        return traces
    return np.einsum("fqab,fqjb->fqja", trace_map, traces)


def assemble_boundary_mass(space: EdgeSpace, tag: Optional[str] = None, weight=None,
                           trace_map: Optional[np.ndarray] = None) -> csr_matrix:
    """int_Gamma weight (T gamma_T phi_j) . (T gamma_T phi_i) ds"""
    quad = space.boundary(tag)
    w = quad.weights if weight is None else quad.weights * np.asarray(weight)
    mapped = _mapped(quad.traces, trace_map)
    local = np.einsum("fq,fqia,fqja->fij", w, mapped, mapped)
    return space.scatter(quad.dofs, quad.dofs, local)


def assemble_boundary_projection(space: EdgeSpace, tag: str, modes: np.ndarray) -> np.ndarray:
    """Q[i, m] = int mode_m . gamma_T phi_i for modes given at the quadrature points (nf, nq, nm, 3)"""
    quad = space.boundary(tag)
    local = np.einsum("fq,fqmd,fqid->fim", quad.weights, modes, quad.traces)
    out = np.zeros((space.ndofs, modes.shape[2]))
    np.add.at(out, quad.dofs, local)
    return out


def _outer_sphere_modes(space: EdgeSpace, op: RadiationOperator) -> Tuple[np.ndarray, np.ndarray, BoundaryQuadrature]:
    quad = space.boundary("gammaR")
    vertices = space.mesh.vertices[np.unique(space.mesh.patch("gammaR").triangles)]
    radii = np.linalg.norm(vertices - np.asarray(op.center), axis=1)
    if np.max(np.abs(radii - op.radius)) > 1e-8 * op.radius:
        raise UnsupportedOuterBoundary("Gamma_R is not a sphere of the configured radius")
    pts = quad.points.reshape(-1, 3)
    # modes on the exact sphere through the quadrature points' directions
    U, V = real_vsh(pts, np.asarray(op.center), op.radius, op.order)
    shape = quad.points.shape[:2] + U.shape[1:]
    return U.reshape(shape), V.reshape(shape), quad


def assemble_radiation(space: EdgeSpace, op: RadiationOperator, k: float) -> csr_matrix:
    """
    ik <Lambda gamma_t E, gamma_T V> on Gamma_R

    silver-mueller-1 gives ik times the tangential mass; spectral-dtn couples all Gamma_R DoFs
    through vector spherical harmonics up to the truncation order.
    """
    if op.variant == "silver-mueller-1":
        return (1j * k) * assemble_boundary_mass(space, "gammaR")
    if op.order == 0:
        _outer_sphere_modes(space, op)
        return csr_matrix((space.ndofs, space.ndofs), dtype=complex)
    U, V, _ = _outer_sphere_modes(space, op)
    a, b = op.modal_coefficients(k)
    return _modal_matrix(space, U, V, 1j * k * b, -1j * k * a)


def assemble_radiation_dual(space: EdgeSpace, op: RadiationOperator, k: float) -> csr_matrix:
    """(i/k) <Lambda^-1 gamma_t Q, gamma_T tau> on Gamma_R"""
    if op.variant == "silver-mueller-1":
        return (-1j / k) * assemble_boundary_mass(space, "gammaR")
    if op.order == 0:
        _outer_sphere_modes(space, op)
        return csr_matrix((space.ndofs, space.ndofs), dtype=complex)
    U, V, _ = _outer_sphere_modes(space, op)
    a, b = op.modal_coefficients(k)
    return _modal_matrix(space, U, V, (1j / k) / a, -(1j / k) / b)


def _modal_matrix(space, U, V, coef_u, coef_v) -> csr_matrix:
    QU = assemble_boundary_projection(space, "gammaR", U)
    QV = assemble_boundary_projection(space, "gammaR", V)
    outer = space.outer_dofs
    if outer.size > 3000:
        logger.warning(f"Dense spectral coupling over {outer.size} Gamma_R DoFs")
    block = (QU[outer] * coef_u) @ QU[outer].T + (QV[outer] * coef_v) @ QV[outer].T
    rows = np.repeat(outer, outer.size)
    cols = np.tile(outer, outer.size)
    return coo_matrix((block.ravel(), (rows, cols)), shape=(space.ndofs, space.ndofs)).tocsr()


def assemble_incident_load(space: EdgeSpace, wave: WaveParameters, op: RadiationOperator) -> np.ndarray:
    """<ik Lambda(gamma_t E^i) - gamma_t(curl E^i), gamma_T V> on Gamma_R"""
    wave.check_transverse()
    quad = space.boundary("gammaR")
    normals = quad.point_normals
    incident = wave.incident(quad.points)
    rotated_curl = np.cross(normals, wave.incident_curl(quad.points))
    integrand = -rotated_curl
    if op.variant == "silver-mueller-1":
        integrand = integrand + 1j * wave.k * tangential_component(incident, normals)
    local = np.einsum("fq,fqd,fqid->fi", quad.weights, integrand, quad.traces)
    load = space.scatter_vector(quad.dofs, local)

    if op.variant == "spectral-dtn" and op.order > 0:
        U, V, _ = _outer_sphere_modes(space, op)
        a, b = op.modal_coefficients(wave.k)
        alpha = np.einsum("fq,fqd,fqmd->m", quad.weights, incident, U)
        beta = np.einsum("fq,fqd,fqmd->m", quad.weights, incident, V)
        QU = assemble_boundary_projection(space, "gammaR", U)
        QV = assemble_boundary_projection(space, "gammaR", V)
        load = load + 1j * wave.k * (QU @ (b * alpha) - QV @ (a * beta))
    return load


def assemble_nonlinear_load(space: EdgeSpace, response: BoundaryResponse, trace: np.ndarray,
                            tag: Optional[str] = None, weight=None, points: Optional[np.ndarray] = None,
                            trace_map: Optional[np.ndarray] = None) -> np.ndarray:
    """int_Gamma g(x(q), trace(q)) . (T gamma_T phi_i) weight ds; x defaults to the quadrature points"""
    quad = space.boundary(tag)
    x = quad.points if points is None else points
    w = quad.weights if weight is None else quad.weights * np.asarray(weight)
    if response.is_zero:
        return np.zeros(space.ndofs, dtype=complex)
    g = response.evaluate(x, trace)
    local = np.einsum("fq,fqd,fqid->fi", w, g, _mapped(quad.traces, trace_map))
    return space.scatter_vector(quad.dofs, local)


def assemble_derivative_blocks(space: EdgeSpace, response: BoundaryResponse, trace: np.ndarray,
                               tag: Optional[str] = None, weight=None, points=None, trace_map=None,
                               rotated_test: bool = False, data_map=None) -> Tuple[csr_matrix, csr_matrix]:
    """
    Matrices of the R-linear map W -> int g_z(x, z; T gamma_T W) . test_i

    Returns (G_re, G_im): columns for real and imaginary unit coefficients of phi_j.
    With rotated_test the test functions are n x phi_i and data_map multiplies g_z first.
    """
    quad = space.boundary(tag)
    x = quad.points if points is None else points
    w = quad.weights if weight is None else quad.weights * np.asarray(weight)
    mapped = _mapped(quad.traces, trace_map)
    test = quad.rotated if rotated_test else mapped
    blocks = []
    for unit in (1.0, 1j):
        if response.field_independent:
            local = np.zeros((quad.n_faces, 3, 3), dtype=complex)
        else:
            dz = response.directional_derivative(x[:, :, None, :], trace[:, :, None, :], unit * mapped)
            if data_map is not None:
                dz = np.einsum("fqab,fqjb->fqja", data_map, dz)
            local = np.einsum("fq,fqja,fqia->fij", w, dz, test)
        blocks.append(space.scatter(quad.dofs, quad.dofs, local))
    return blocks[0], blocks[1]


# ---------------------------------------------------------------------------
# Lifting of tangential data
# ---------------------------------------------------------------------------

class TangentialLift:
    """
    Discrete lifting of rotated-trace data n x w = d on the tagged patches

    Boundary coefficients are the L2(Gamma) projection of d onto the traces of the face
    edges; interior coefficients minimize the curl-curl + mass energy.
    """

    def __init__(self, space: EdgeSpace, tags: Sequence[str] = ()):
        self.space = space
        self.tags = tuple(tags) or (space.boundary_tag,)
        self.boundary_dofs = np.unique(np.concatenate([space.mesh.edge_dofs(t) for t in self.tags]))
        mask = np.ones(space.ndofs, dtype=bool)
        mask[self.boundary_dofs] = False
        self.interior_dofs = np.flatnonzero(mask)

        mass = sum(assemble_boundary_mass(space, t) for t in self.tags)
        self.boundary_mass = mass[self.boundary_dofs][:, self.boundary_dofs].tocsc()
        energy = (assemble_curl_curl(space) + assemble_mass(space)).tocsr()
        self.energy = energy
        try:
            self._mass_lu = splu(self.boundary_mass)
            self._energy_lu = splu(energy[self.interior_dofs][:, self.interior_dofs].tocsc())
        except RuntimeError as e:
            raise SingularExtension(f"Lifting factorization failed: {e}") from e
        self._coupling = energy[self.interior_dofs][:, self.boundary_dofs].tocsc()

    def data_load(self, data: Dict[str, np.ndarray], data_map: Optional[Dict[str, np.ndarray]] = None) -> np.ndarray:
        """b_i = int d . (n x phi_i), d optionally premultiplied per point by data_map"""
        load = np.zeros(self.space.ndofs, dtype=complex)
        for tag, values in data.items():
            quad = self.space.boundary(tag)
            if data_map is not None and tag in data_map:
                values = np.einsum("fqab,fqb->fqa", data_map[tag], values)
            local = np.einsum("fq,fqd,fqid->fi", quad.weights, values, quad.rotated)
            load += self.space.scatter_vector(quad.dofs, local)
        return load

    def project(self, load: np.ndarray) -> np.ndarray:
        rhs = load[self.boundary_dofs]
        return self._mass_lu.solve(rhs.real) + 1j * self._mass_lu.solve(rhs.imag)

    def extend(self, boundary_coeffs: np.ndarray) -> np.ndarray:
        w = np.zeros(self.space.ndofs, dtype=complex)
        w[self.boundary_dofs] = boundary_coeffs
        rhs = -(self._coupling @ boundary_coeffs)
        w[self.interior_dofs] = self._energy_lu.solve(rhs.real) + 1j * self._energy_lu.solve(rhs.imag)
        if not np.all(np.isfinite(w)):
            raise SingularExtension("Lift produced non-finite values")
        return w

    def __call__(self, data: Dict[str, np.ndarray]) -> np.ndarray:
        return self.extend(self.project(self.data_load(data)))

    def energy_norm(self, w: np.ndarray) -> float:
        return float(np.sqrt(max(np.real(np.vdot(w, self.energy @ w)), 0.0)))


def lift_tangential_data(space: EdgeSpace, data: np.ndarray, tag: Optional[str] = None) -> np.ndarray:
    """Lift rotated-trace data given at the quadrature points of one patch"""
    tag = tag or space.boundary_tag
    return TangentialLift(space, (tag,))({tag: data})


# ---------------------------------------------------------------------------
# Continuous piecewise-linear projection (region-wise)
# ---------------------------------------------------------------------------

class P1Projection:
    """L2 projection of quadrature data onto continuous P1 fields, separately per material region"""

    def __init__(self, space: EdgeSpace):
        self.space = space
        mesh = space.mesh
        self._regions = []
        local_mass = (np.ones((4, 4)) + np.eye(4)) / 20.0
        for region in np.unique(mesh.tet_regions):
            tets = np.flatnonzero(mesh.tet_regions == region)
            nodes, local = np.unique(mesh.tets[tets], return_inverse=True)
            local = local.reshape(-1, 4)
            vals = mesh.volumes[tets][:, None, None] * local_mass[None]
            rows = np.repeat(local, 4, axis=1).ravel()
            cols = np.tile(local, (1, 4)).ravel()
            mass = coo_matrix((vals.ravel(), (rows, cols)), shape=(nodes.size,) * 2).tocsc()
            self._regions.append((tets, nodes.size, local, splu(mass)))

    def project(self, values: np.ndarray) -> "ProjectedField":
        """values: (nt, nq, ...) at the tet quadrature points"""
        space = self.space
        trailing = values.shape[2:]
        flat = values.reshape(values.shape[:2] + (-1,))
        tet_nodal = np.zeros((space.mesh.n_tets, 4, flat.shape[-1]), dtype=complex)
        for tets, n_nodes, local, lu in self._regions:
            contrib = np.einsum("tq,qv,tqc->tvc", space.qweights[tets], TET_BARYCENTRIC, flat[tets])
            load = np.zeros((n_nodes, flat.shape[-1]), dtype=complex)
            np.add.at(load, local, contrib)
            nodal = lu.solve(np.ascontiguousarray(load.real)) + 1j * lu.solve(np.ascontiguousarray(load.imag))
            tet_nodal[tets] = nodal[local]
        return ProjectedField(space.mesh, tet_nodal.reshape((space.mesh.n_tets, 4) + trailing))


@dataclass
class ProjectedField:
    """Per-tet nodal values of a region-wise continuous P1 field"""
    mesh: Mesh
    tet_nodal: np.ndarray        # (nt, 4, ...)

    def value_at(self, points: np.ndarray, tets: np.ndarray) -> np.ndarray:
        bary = self.mesh.barycentric(points, tets)
        return np.einsum("...v,...vc->...c", bary, self.tet_nodal[tets])

    def gradient(self, tets: Optional[np.ndarray] = None) -> np.ndarray:
        """(n, 3, 3) with grad[c, j] = d_j f_c"""
        if tets is None:
            tets = np.arange(self.mesh.n_tets)
        return np.einsum("tvc,tvj->tcj", self.tet_nodal[tets], self.mesh.bary_grads[tets])


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

@dataclass
class AssembledSystem:
    """Sparse operator of one form with its load"""
    matrix: csr_matrix
    load: np.ndarray
    form: str
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def ndofs(self) -> int:
        return int(self.matrix.shape[0])

    def dump(self, directory, prefix: Optional[str] = None) -> Dict[str, str]:
        """Coordinate text export: matrix rows 'row col re im', vector rows 'index re im'"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        prefix = prefix or self.form
        coo = self.matrix.tocoo()
        matrix_path = directory / f"{prefix}_matrix.txt"
        vector_path = directory / f"{prefix}_load.txt"
        pd.DataFrame({"row": coo.row, "col": coo.col, "re": coo.data.real, "im": coo.data.imag}).sort_values(
            ["row", "col"]).to_csv(matrix_path, sep=" ", header=False, index=False, float_format="%.17g")
        pd.DataFrame({"index": np.arange(self.load.size), "re": self.load.real, "im": self.load.imag}).to_csv(
            vector_path, sep=" ", header=False, index=False, float_format="%.17g")
        return {"matrix": str(matrix_path), "load": str(vector_path)}


@dataclass
class PulledBackGeometry:
    """Geometric kits of phi = id + t*h at the volume and Gamma quadrature points"""
    deformation: Any
    t: float
    volume: GeometricKit
    surface: GeometricKit


def real_block(matrix) -> csr_matrix:
    """[[Re A, -Im A], [Im A, Re A]] acting on [Re x; Im x]"""
    re = csr_matrix(matrix.real)
    im = csr_matrix(matrix.imag)
    return bmat([[re, -im], [im, re]], format="csr")


def derivative_block(g_re, g_im) -> csr_matrix:
    return bmat([[csr_matrix(g_re.real), csr_matrix(g_im.real)],
                 [csr_matrix(g_re.imag), csr_matrix(g_im.imag)]], format="csr")


def split(vector: np.ndarray) -> np.ndarray:
    return np.concatenate([vector.real, vector.imag])


def join(vector: np.ndarray) -> np.ndarray:
    half = vector.size // 2
    return vector[:half] + 1j * vector[half:]


class ScatteringProblem:
    """
    One nonlinear scattering problem on an edge space

    Reference forms are assembled once; pulled-back forms are assembled per deformation.
    """

    def __init__(self, space: EdgeSpace, wave: WaveParameters, response: BoundaryResponse,
                 radiation: RadiationOperator, kind: str = "nibc"):
        if kind not in PROBLEMS:
            raise ValueError(f"Unknown problem '{kind}'")
        self.space = space
        self.wave = wave
        self.response = response
        self.radiation = radiation
        self.kind = kind
        self.tag = space.boundary_tag
        mu_inv, eps = wave.region_values(space.mesh.tet_regions)
        if kind != "ntc":
            mu_inv = np.ones_like(mu_inv)
            eps = np.ones_like(eps)
        self.mu_inv = mu_inv
        self.eps = eps

    # -- cached reference pieces ----------------------------------------------

    @cached_property
    def curl_curl(self) -> csr_matrix:
        return assemble_curl_curl(self.space, self.mu_inv)

    @cached_property
    def mass(self) -> csr_matrix:
        return assemble_mass(self.space, self.eps)

    @cached_property
    def plain_mass(self) -> csr_matrix:
        return assemble_mass(self.space)

    @cached_property
    def mass_solver(self):
        try:
            return splu(self.plain_mass.tocsc())
        except RuntimeError as e:
            raise QuadratureFailure(f"Edge mass matrix is singular: {e}") from e

    @cached_property
    def plain_curl_curl(self) -> csr_matrix:
        return assemble_curl_curl(self.space)

    @cached_property
    def boundary_mass(self) -> csr_matrix:
        return assemble_boundary_mass(self.space, self.tag)

    @cached_property
    def radiation_matrix(self) -> csr_matrix:
        return assemble_radiation(self.space, self.radiation, self.wave.k)

    @cached_property
    def radiation_dual(self) -> csr_matrix:
        return assemble_radiation_dual(self.space, self.radiation, self.wave.k)

    @cached_property
    def mixed_curl(self) -> csr_matrix:
        return assemble_mixed_curl(self.space)

    @cached_property
    def incident_load(self) -> np.ndarray:
        return assemble_incident_load(self.space, self.wave, self.radiation)

    @cached_property
    def norm_matrix(self) -> csr_matrix:
        """X-norm: curl-curl + mass + L2(Gamma) trace"""
        return (self.plain_curl_curl + self.plain_mass + self.boundary_mass).tocsr()

    @cached_property
    def p1_projection(self) -> P1Projection:
        return P1Projection(self.space)

    @cached_property
    def lift(self) -> TangentialLift:
        return TangentialLift(self.space, (self.tag,))

    @cached_property
    def interior_mask(self) -> np.ndarray:
        """DoFs not on Gamma (the NPEC unknowns)"""
        return self.space.interior_mask((self.tag,))

    def x_norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(np.real(np.vdot(v, self.norm_matrix @ v)), 0.0)))

    def hcurl_norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(np.real(np.vdot(v, (self.plain_curl_curl + self.plain_mass) @ v)), 0.0)))

    def with_response(self, response: BoundaryResponse) -> "ScatteringProblem":
        """Same problem with another response; the assembled reference forms are shared"""
        other = copy.copy(self)
        other.response = response
        return other

    # -- geometry -----------------------------------------------------------------

    def pulled_back(self, deformation, t: float) -> Optional[PulledBackGeometry]:
        """Kits of phi = id + t*h; None for t = 0 (the reference forms)"""
        if t == 0.0:
            return None
        space = self.space
        quad = space.boundary(self.tag)
        sample = np.concatenate([space.qpoints.reshape(-1, 3), space.mesh.vertices])
        collar = None
        if space.mesh.has_tag("gammaR"):
            collar = np.concatenate([space.boundary("gammaR").points.reshape(-1, 3),
                                     space.mesh.vertices[np.unique(space.mesh.patch("gammaR").triangles)]])
        build_diffeomorphism(deformation, t, sample, collar)
        volume = geometric_kit(deformation, t, space.qpoints)
        surface = geometric_kit(deformation, t, quad.points, quad.normals[:, None, :])
        return PulledBackGeometry(deformation, float(t), volume, surface)

    # -- forms ------------------------------------------------------------------------

    def volume_part(self, geometry: Optional[PulledBackGeometry] = None) -> csr_matrix:
        k2 = self.wave.k ** 2
        if geometry is None:
            return (self.curl_curl - k2 * self.mass).tocsr()
        K = assemble_curl_curl(self.space, self.mu_inv, geometry.volume.M)
        M = assemble_mass(self.space, self.eps, geometry.volume.N)
        return (K - k2 * M).tocsr()

    def impedance_part(self, geometry: Optional[PulledBackGeometry] = None) -> csr_matrix:
        coef = 1j * self.wave.k * self.wave.impedance
        if geometry is None:
            return coef * self.boundary_mass
        return coef * assemble_boundary_mass(self.space, self.tag, geometry.surface.omega,
                                             geometry.surface.trace_map)

    def linear_matrix(self, geometry: Optional[PulledBackGeometry] = None) -> csr_matrix:
        """NIBC A_l, NTC A_l^tr, or the PEC operator A_0 (Gamma rows are replaced by the solver)"""
        matrix = self.volume_part(geometry) + self.radiation_matrix
        if self.kind == "nibc":
            matrix = matrix + self.impedance_part(geometry)
        return matrix.tocsr()

    def system(self, geometry: Optional[PulledBackGeometry] = None) -> AssembledSystem:
        form = {"nibc": "nibc_linear", "ntc": "ntc_linear", "npec": "pec"}[self.kind]
        if geometry is not None:
            form += "_pulled_back"
        return AssembledSystem(self.linear_matrix(geometry), self.incident_load, form,
                               {"ndofs": self.space.ndofs, "t": 0.0 if geometry is None else geometry.t})

    def surface_points(self, geometry: Optional[PulledBackGeometry] = None) -> np.ndarray:
        quad = self.space.boundary(self.tag)
        return quad.points if geometry is None else geometry.surface.mapped_points

    def gamma_trace(self, E: np.ndarray, geometry: Optional[PulledBackGeometry] = None) -> np.ndarray:
        """gamma_T E, or the transported trace P_h J^-T gamma_T E"""
        trace = self.space.boundary(self.tag).trace(E)
        if geometry is None:
            return trace
        return np.einsum("fqab,fqb->fqa", geometry.surface.trace_map, trace)

    def nonlinear_load(self, E: np.ndarray, geometry: Optional[PulledBackGeometry] = None) -> np.ndarray:
        """int g(x, gamma_T E) . gamma_T phi_i (pulled back: at phi(x), weighted by omega)"""
        if geometry is None:
            return assemble_nonlinear_load(self.space, self.response, self.gamma_trace(E), self.tag)
        kit = geometry.surface
        return assemble_nonlinear_load(self.space, self.response, self.gamma_trace(E, geometry), self.tag,
                                       weight=kit.omega, points=kit.mapped_points, trace_map=kit.trace_map)

    def boundary_datum(self, E: np.ndarray, geometry: Optional[PulledBackGeometry] = None) -> np.ndarray:
        """NPEC data at the quadrature points: g, or omega J^-1 g(phi(x), transported trace)"""
        g = self.response.evaluate(self.surface_points(geometry), self.gamma_trace(E, geometry))
        if geometry is None:
            return g
        return np.einsum("fqab,fqb->fqa", geometry.surface.data_map, g)

    def derivative_blocks(self, E: np.ndarray, geometry: Optional[PulledBackGeometry] = None,
                          rotated_test: bool = False):
        trace = self.gamma_trace(E, geometry)
        if geometry is None:
            return assemble_derivative_blocks(self.space, self.response, trace, self.tag,
                                              rotated_test=rotated_test)
        kit = geometry.surface
        return assemble_derivative_blocks(
            self.space, self.response, trace, self.tag,
            weight=None if rotated_test else kit.omega, points=kit.mapped_points, trace_map=kit.trace_map,
            rotated_test=rotated_test, data_map=kit.data_map if rotated_test else None,
        )

    def npec_boundary_operator(self, E: np.ndarray, geometry: Optional[PulledBackGeometry] = None) -> csr_matrix:
        """A_0 with Gamma rows replaced by M_Gamma - G_z (real-block), the linearized NPEC map"""
        mask = diags(self.interior_mask.astype(float))
        interior_rows = real_block(mask @ self.linear_matrix(geometry))
        g_re, g_im = self.derivative_blocks(E, geometry, rotated_test=True)
        return (interior_rows + real_block(self.boundary_mass) - derivative_block(g_re, g_im)).tocsr()

    def residual(self, E: np.ndarray, geometry: Optional[PulledBackGeometry] = None) -> float:
        """Relative residual of the full nonlinear discrete equations"""
        F = self.incident_load
        scale = max(np.linalg.norm(F), 1e-300)
        A = self.linear_matrix(geometry)
        if self.kind == "npec":
            interior = self.interior_mask
            r_int = (A @ E - F)[interior]
            b = self.lift.data_load({self.tag: self.boundary_datum(E, geometry)})
            r_bnd = (self.boundary_mass @ E - b)[self.space.gamma_dofs]
            return float(np.sqrt(np.linalg.norm(r_int) ** 2 + np.linalg.norm(r_bnd) ** 2) / scale)
        r = A @ E - F - self.nonlinear_load(E, geometry)
        return float(np.linalg.norm(r) / scale)

    def describe(self) -> Dict[str, Any]:
        return {
            "problem": self.kind,
            "boundary_tag": self.tag,
            "ndofs": self.space.ndofs,
            "gamma_dofs": int(self.space.gamma_dofs.size),
            "outer_dofs": int(self.space.outer_dofs.size),
            "radiation": {"variant": self.radiation.variant, "radius": self.radiation.radius,
                          "order": self.radiation.order},
            "wave": self.wave.describe(),
            "response": self.response.describe(),
        }


# ---------------------------------------------------------------------------
# Manufactured linear solution
# ---------------------------------------------------------------------------

def manufactured_solution_error(space: EdgeSpace, k: float, field_fn, curl_fn, curl_curl_fn) -> Dict[str, float]:
    """
    Solve curl curl E - k^2 E = f with n x E prescribed on every tagged boundary

    Returns the H(curl) error of the discrete solution against the exact field.
    """
    tags = [tag for tag in ("gamma", "gammaR") if space.mesh.has_tag(tag)]
    K = assemble_curl_curl(space)
    M = assemble_mass(space)
    A = (K - k ** 2 * M).tocsr()
    source = curl_curl_fn(space.qpoints) - k ** 2 * field_fn(space.qpoints)
    load = space.scatter_vector(space.dofs, np.einsum("tq,tqd,tqed->te", space.qweights, source, space.basis))

    lift = TangentialLift(space, tags)
    data = {tag: np.cross(space.boundary(tag).point_normals, field_fn(space.boundary(tag).points)) for tag in tags}
    boundary_coeffs = lift.project(lift.data_load(data))
    E = np.zeros(space.ndofs, dtype=complex)
    E[lift.boundary_dofs] = boundary_coeffs
    interior = lift.interior_dofs
    rhs = load[interior] - A[interior][:, lift.boundary_dofs] @ boundary_coeffs
    try:
        lu = splu(A[interior][:, interior].tocsc())
    except RuntimeError as e:
        raise SingularExtension(f"Manufactured system is singular: {e}") from e
    E[interior] = lu.solve(rhs.real) + 1j * lu.solve(rhs.imag)

    err_values = space.values_at_quadrature(E) - field_fn(space.qpoints)
    err_curls = space.curls_per_tet(E)[:, None, :] - curl_fn(space.qpoints)
    l2 = np.sum(space.qweights * np.sum(np.abs(err_values) ** 2, axis=-1))
    curl = np.sum(space.qweights * np.sum(np.abs(err_curls) ** 2, axis=-1))
    return {
        "mesh_size": space.mesh.mesh_size(),
        "ndofs": space.ndofs,
        "l2_error": float(np.sqrt(l2)),
        "hcurl_error": float(np.sqrt(l2 + curl)),
    }
