# sensitivity.py - Material and shape derivatives of the nonlinear scattering solutions
"""
Shape sensitivity of the scattering problems

The material derivative W solves the R-linearized problem A_hat(W, V) = L_h(V), where L_h is
minus the t-derivative of the pulled-back residual at t = 0. The shape derivative is
dE = W - (J_h^T E + (h.grad) E). Boundary data of the shape BVP are evaluated pointwise
on Gamma and checked against dE.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.sparse import bmat, csr_matrix
from scipy.sparse.linalg import splu

from discretization import (
    EdgeSpace,
    PulledBackGeometry,
    ScatteringProblem,
    assemble_curl_curl,
    assemble_mass,
    derivative_block,
    join,
    real_block,
    split,
)
from geometry import (
    LOCAL_EDGES,
    REGION_EXTERIOR,
    REGION_INTERIOR,
    AnalyticSurface,
    Diffeomorphism,
    GeometricKit,
    geometric_kit,
    surface_from_patch,
)
from solver import FixedPointConfig, SolveResult, discrete_curl, factorize, solve_problem, solve_real
from traces import tangential_component, trace_variation
from utils.errors import MissingCurvature, NotConverged, SingularLinearizedSystem
from utils.quadrature import EDGE_POINTS, EDGE_WEIGHTS
from utils.rates import fit_loglog_slope, is_monotone_decreasing

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-6
HADAMARD_SNAP = 1e-12


def _dot(a, b):
    return np.einsum("...d,...d->...", a, b)


def _matvec(A, v):
    return np.einsum("...ij,...j->...i", A, v)


# ---------------------------------------------------------------------------
# Linearized systems
# ---------------------------------------------------------------------------

class LinearizedSystem:
    """
    R-linear operator in split real/imaginary form

    The unknown is [Re x; Im x] for a complex vector x of size n_complex.
    """

    def __init__(self, matrix: csr_matrix, form: str, n_complex: int):
        self.matrix = matrix.tocsr()
        self.form = form
        self.n_complex = int(n_complex)

    @classmethod
    def for_problem(cls, problem: ScatteringProblem, E: np.ndarray,
                    geometry: Optional[PulledBackGeometry] = None) -> "LinearizedSystem":
        """A_l - G_z for NIBC/NTC; A_0 off Gamma with M_Gamma - G_z(n x .) on Gamma for NPEC"""
        if problem.kind == "npec":
            return cls(problem.npec_boundary_operator(E, geometry), "npec_primal", problem.space.ndofs)
        g_re, g_im = problem.derivative_blocks(E, geometry)
        matrix = real_block(problem.linear_matrix(geometry)) - derivative_block(g_re, g_im)
        return cls(matrix, f"{problem.kind}_linearized", problem.space.ndofs)

    @classmethod
    def mixed(cls, problem: ScatteringProblem, E: np.ndarray) -> "LinearizedSystem":
        """
        Linearized mixed PEC system in (W, P)

        tau rows: -(W, curl tau) + g_z terms + (P, tau) + (i/k)<Lambda^-1 P, tau>_R
        nu rows:  (curl P, nu) - k^2 (W, nu)
        """
        n = problem.space.ndofs
        k2 = problem.wave.k ** 2
        C = problem.mixed_curl
        M = problem.plain_mass
        Z = bmat([[-C, M + problem.radiation_dual], [-k2 * M, C.T]], format="csr").astype(complex)
        g_re, g_im = problem.derivative_blocks(E)
        zero = csr_matrix((n, n))
        g_re = bmat([[g_re, zero], [zero, zero]], format="csr")
        g_im = bmat([[g_im, zero], [zero, zero]], format="csr")
        return cls(real_block(Z) + derivative_block(g_re, g_im), "npec_mixed", 2 * n)

    @cached_property
    def factorization(self):
        try:
            return splu(self.matrix.tocsc())
        except RuntimeError as e:
            raise SingularLinearizedSystem(f"{self.form}: {e}") from e

    def apply(self, x: np.ndarray) -> np.ndarray:
        return join(self.matrix @ split(x))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        solution = self.factorization.solve(split(np.asarray(rhs, dtype=complex)))
        if not np.all(np.isfinite(solution)):
            raise SingularLinearizedSystem(f"{self.form}: non-finite solution")
        return join(solution)


@dataclass
class MaterialKits:
    """First-order geometric variations of h at the volume and Gamma quadrature points"""
    volume: GeometricKit
    surface: GeometricKit


def material_kits(problem: ScatteringProblem, deformation) -> MaterialKits:
    space = problem.space
    quad = space.boundary(problem.tag)
    return MaterialKits(
        volume=geometric_kit(deformation, 0.0, space.qpoints),
        surface=geometric_kit(deformation, 0.0, quad.points, quad.normals[:, None, :]),
    )


@dataclass
class MixedRHS:
    tau: np.ndarray
    nu: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.tau, self.nu])


@dataclass
class TransportTerm:
    """J_h^T E + (h.grad) E at the volume quadrature points and its edge moments"""
    values: np.ndarray
    dofs: np.ndarray


@dataclass
class SensitivityResult:
    problem: str
    deformation: Dict[str, Any]
    W: np.ndarray
    transport: TransportTerm
    delta_dofs: np.ndarray
    delta_values: np.ndarray
    P: Optional[np.ndarray] = None
    W_mixed: Optional[np.ndarray] = None
    delta_Q: Optional[np.ndarray] = None
    boundary_data: Optional["ShapeBoundaryData"] = None
    delta_regions: Optional["RegionShapeDerivative"] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Material right-hand sides
# ---------------------------------------------------------------------------

def _require_converged(problem: ScatteringProblem, E: np.ndarray, tolerance: float) -> None:
    residual = problem.residual(E)
    if residual > tolerance:
        raise NotConverged(f"{problem.kind} solution residual {residual:.3e} exceeds {tolerance:.1e}")


def volume_material_terms(problem: ScatteringProblem, E: np.ndarray, kits: MaterialKits) -> np.ndarray:
    """-(M_dot curl E, curl V) + k^2 (N_dot E, V) with the problem's material coefficients"""
    K_dot = assemble_curl_curl(problem.space, problem.mu_inv, kits.volume.M_dot)
    M_dot = assemble_mass(problem.space, problem.eps, kits.volume.N_dot)
    return -(K_dot @ E) + problem.wave.k ** 2 * (M_dot @ E)


class _BoundaryVariation:
    """Pointwise Gamma data shared by the boundary terms of every material right-hand side"""

    def __init__(self, problem: ScatteringProblem, E: np.ndarray, kits: MaterialKits):
        quad = problem.space.boundary(problem.tag)
        kit = kits.surface
        self.quad = quad
        self.kit = kit
        normals = quad.point_normals
        self.trace = quad.trace(E)
        self.trace_dot = trace_variation(self.trace, normals, kit.delta_n, kit.jacobian_h)
        self.test_dot = trace_variation(quad.traces, normals[:, :, None, :], kit.delta_n[:, :, None, :],
                                        kit.jacobian_h[:, :, None])
        response = problem.response
        self.active = not response.is_zero
        if self.active:
            self.g = response.evaluate(quad.points, self.trace)
            self.spatial = response.spatial_gradient_action(quad.points, self.trace, kit.h_values)
            self.g_dot = response.directional_derivative(quad.points, self.trace, self.trace_dot)

    def integrate(self, space: EdgeSpace, values: np.ndarray, test: np.ndarray) -> np.ndarray:
        local = np.einsum("fq,fqd,fqid->fi", self.quad.weights, values, test)
        return space.scatter_vector(self.quad.dofs, local)

    def impedance_terms(self, space: EdgeSpace) -> np.ndarray:
        """int omega_dot zE.gamma V + zE_dot.gamma V + zE.gamma_dot V"""
        first = self.kit.omega_dot[..., None] * self.trace + self.trace_dot
        return (self.integrate(space, first, self.quad.traces)
                + self.integrate(space, self.trace, self.test_dot))

    def response_terms(self, space: EdgeSpace) -> np.ndarray:
        """int [omega_dot g + grad_x g.h + g_z(zE_dot)].gamma V + g.gamma_dot V"""
        if not self.active:
            return np.zeros(space.ndofs, dtype=complex)
        first = self.kit.omega_dot[..., None] * self.g + self.spatial + self.g_dot
        return (self.integrate(space, first, self.quad.traces)
                + self.integrate(space, self.g, self.test_dot))


def assemble_material_rhs_nibc(problem: ScatteringProblem, E: np.ndarray, deformation,
                               kits: Optional[MaterialKits] = None,
                               tolerance: float = RESIDUAL_TOLERANCE) -> np.ndarray:
    """
    L_h for the impedance problem

    Returns the vector L_i = L_h(phi_i), so that A_hat W = L.
    """
    _require_converged(problem, E, tolerance)
    kits = kits or material_kits(problem, deformation)
    boundary = _BoundaryVariation(problem, E, kits)
    coef = 1j * problem.wave.k * problem.wave.impedance
    return (volume_material_terms(problem, E, kits)
            - coef * boundary.impedance_terms(problem.space)
            + boundary.response_terms(problem.space))


def assemble_material_rhs_ntc(problem: ScatteringProblem, E: np.ndarray, deformation,
                              kits: Optional[MaterialKits] = None,
                              tolerance: float = RESIDUAL_TOLERANCE) -> np.ndarray:
    """L_h for the transmission problem: weighted volume terms and the interface g-variations"""
    _require_converged(problem, E, tolerance)
    kits = kits or material_kits(problem, deformation)
    boundary = _BoundaryVariation(problem, E, kits)
    return volume_material_terms(problem, E, kits) + boundary.response_terms(problem.space)


def assemble_material_rhs_npec(problem: ScatteringProblem, E: np.ndarray, deformation,
                               kits: Optional[MaterialKits] = None,
                               tolerance: float = RESIDUAL_TOLERANCE) -> np.ndarray:
    """
    Primal L_h for the lifting formulation

    Rows off Gamma carry the volume terms; Gamma rows carry the variation of the
    rotated-trace data, int [(omega_dot - J_h) g + grad_x g.h + g_z(zE_dot)].(n x phi_i).
    """
    _require_converged(problem, E, tolerance)
    kits = kits or material_kits(problem, deformation)
    space = problem.space
    rhs = np.where(problem.interior_mask, volume_material_terms(problem, E, kits), 0.0)
    boundary = _BoundaryVariation(problem, E, kits)
    if boundary.active:
        kit = kits.surface
        data_dot = (kit.omega_dot[..., None] * boundary.g - _matvec(kit.jacobian_h, boundary.g)
                    + boundary.spatial + boundary.g_dot)
        rhs = rhs + boundary.integrate(space, data_dot, boundary.quad.rotated)
    return rhs


def assemble_material_rhs_mixed(problem: ScatteringProblem, E: np.ndarray, Q: np.ndarray, deformation,
                                kits: Optional[MaterialKits] = None,
                                tolerance: float = RESIDUAL_TOLERANCE) -> MixedRHS:
    """
    Right-hand side of the linearized mixed PEC system over (tau, nu)

    tau: -(N_dot Q, tau) - int [grad_x g.h + g_z(zE_dot)].gamma tau - int g.gamma_dot tau
         - int omega_dot g.gamma tau
    nu:  k^2 (N_dot E, nu)
    """
    _require_converged(problem, E, tolerance)
    kits = kits or material_kits(problem, deformation)
    space = problem.space
    N_dot = assemble_mass(space, None, kits.volume.N_dot)
    boundary = _BoundaryVariation(problem, E, kits)
    tau = -(N_dot @ Q) - boundary.response_terms(space)
    nu = problem.wave.k ** 2 * (N_dot @ E)
    return MixedRHS(tau, nu)


def assemble_material_rhs(problem: ScatteringProblem, E: np.ndarray, deformation,
                          kits: Optional[MaterialKits] = None, tolerance: float = RESIDUAL_TOLERANCE) -> np.ndarray:
    builder = {
        "nibc": assemble_material_rhs_nibc,
        "npec": assemble_material_rhs_npec,
        "ntc": assemble_material_rhs_ntc,
    }[problem.kind]
    return builder(problem, E, deformation, kits, tolerance)


def solve_material(linearized: LinearizedSystem, rhs) -> np.ndarray:
    """Solve A_hat W = L_h; a MixedRHS returns the stacked (W, P)"""
    if isinstance(rhs, MixedRHS):
        rhs = rhs.stacked()
    return linearized.solve(rhs)


def mixed_identity_residual(problem: ScatteringProblem, W: np.ndarray, P: np.ndarray, Q: np.ndarray,
                            deformation, kits: Optional[MaterialKits] = None) -> Dict[str, float]:
    """
    Weak residual of P + N_dot Q - curl W on the DoFs off every boundary, in the dual mass norm
    """
    space = problem.space
    kits = kits or material_kits(problem, deformation)
    N_dot = assemble_mass(space, None, kits.volume.N_dot)
    M = problem.plain_mass
    residual = M @ P + N_dot @ Q - problem.mixed_curl @ W
    interior = space.interior_mask([t for t in ("gamma", "gammaR", "interface") if space.mesh.has_tag(t)])
    M_II = M[interior][:, interior]
    r = residual[interior]
    dual = float(np.sqrt(max(np.real(np.vdot(r, solve_real(factorize(M_II, "interior mass"), r))), 0.0)))
    scale = (np.sqrt(max(np.real(np.vdot(P, M @ P)), 0.0))
             + np.sqrt(max(np.real(np.vdot(W, problem.plain_curl_curl @ W)), 0.0)))
    return {"residual": dual, "scale": float(scale), "relative": dual / scale if scale > 0 else 0.0}


# ---------------------------------------------------------------------------
# Pulled-back solves and finite-difference oracles
# ---------------------------------------------------------------------------

def pullback_solve(problem: ScatteringProblem, deformation, t: float,
                   config: Optional[FixedPointConfig] = None,
                   initial: Optional[np.ndarray] = None) -> SolveResult:
    """Solve the transformed problem for phi = id + t*h on the reference mesh"""
    geometry = problem.pulled_back(deformation, t)
    return solve_problem(problem, config, geometry, initial)


def pulled_back_residual(problem: ScatteringProblem, E: np.ndarray,
                         geometry: Optional[PulledBackGeometry]) -> np.ndarray:
    """Residual vector of the (pulled-back) nonlinear discrete equations at E"""
    F = problem.incident_load
    A = problem.linear_matrix(geometry)
    if problem.kind == "npec":
        r = np.where(problem.interior_mask, A @ E - F, 0.0)
        data = problem.boundary_datum(E, geometry)
        return r + problem.boundary_mass @ E - problem.lift.data_load({problem.tag: data})
    return A @ E - F - problem.nonlinear_load(E, geometry)


def rhs_fd_check(problem: ScatteringProblem, E: np.ndarray, deformation, rhs: np.ndarray,
                 t_grid: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4), samples: int = 5,
                 seed: int = 0) -> Dict[str, Any]:
    """
    |L_h(V) + (R_t(E; V) - R_0(E; V)) / t| over t for random test vectors V

    R_t is the pulled-back residual; the difference quotient approaches -L_h at rate O(t).
    """
    rng = np.random.default_rng(seed)
    tests = rng.normal(size=(samples, problem.space.ndofs))
    base = pulled_back_residual(problem, E, None)
    errors = np.zeros((len(t_grid), samples))
    for i, t in enumerate(t_grid):
        quotient = (pulled_back_residual(problem, E, problem.pulled_back(deformation, t)) - base) / t
        errors[i] = np.abs(tests @ (rhs + quotient))
    fits = [fit_loglog_slope(t_grid, errors[:, s]) for s in range(samples)]
    slopes = [f["slope"] for f in fits if f["slope"] is not None]
    return {
        "t_grid": [float(t) for t in t_grid],
        "errors": errors.max(axis=1).tolist(),
        "slopes": slopes,
        "min_slope": min(slopes) if slopes else None,
        "exact_zero": all(f["exact_zero"] for f in fits),
    }


def _warm_caches(problem: ScatteringProblem) -> None:
    """Build the shared reference pieces once, before worker threads read them"""
    _ = problem.incident_load, problem.norm_matrix, problem.radiation_matrix
    if problem.kind == "npec":
        _ = problem.lift


def material_fd_check(problem: ScatteringProblem, E: np.ndarray, W: np.ndarray, deformation,
                      t_grid: Sequence[float], config: Optional[FixedPointConfig] = None,
                      threads: int = 1) -> Dict[str, Any]:
    """
    Remainders |E_t - E - tW|_X and |E_t - E|_X over the t-grid

    The pulled-back solves are independent and run on the thread pool; results are gathered
    in grid order.
    """
    _warm_caches(problem)

    def run(t):
        return pullback_solve(problem, deformation, t, config, initial=E).E

    with ThreadPoolExecutor(max_workers=max(int(threads), 1)) as executor:
        solutions = list(executor.map(run, t_grid))

    remainders = [problem.x_norm(Et - E - t * W) for t, Et in zip(t_grid, solutions)]
    differences = [problem.x_norm(Et - E) for Et in solutions]
    scaled = [r / t for r, t in zip(remainders, t_grid)]
    remainder_fit = fit_loglog_slope(t_grid, remainders)
    consistency_fit = fit_loglog_slope(t_grid, differences)
    logger.info(f"{problem.kind} FD check: remainder slope {remainder_fit['slope']}, "
                f"consistency slope {consistency_fit['slope']}")
    return {
        "t_grid": [float(t) for t in t_grid],
        "remainders": remainders,
        "scaled_remainders": scaled,
        "scaled_monotone": is_monotone_decreasing(scaled),
        "remainder_slope": remainder_fit["slope"],
        "remainder_fit_residual": remainder_fit["fit_residual"],
        "consistency": differences,
        "consistency_slope": consistency_fit["slope"],
        "consistency_fit_residual": consistency_fit["fit_residual"],
        "exact_zero": remainder_fit["exact_zero"],
    }


def deformed_mesh_check(problem: ScatteringProblem, deformation, t: float,
                        config: Optional[FixedPointConfig] = None,
                        reference: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """
    Move the mesh nodes by t*h, solve there and compare with the pulled-back solve

    Edge DoFs are line integrals, which the covariant Piola transform preserves, so the
    two DoF vectors are directly comparable.
    """
    phi = Diffeomorphism(deformation, t)
    mesh = problem.space.mesh.deformed(phi)
    space = EdgeSpace(mesh, problem.tag, problem.space.threads)
    moved = ScatteringProblem(space, problem.wave, problem.response, problem.radiation, problem.kind)
    on_mesh = solve_problem(moved, config).E
    pulled = reference if reference is not None else pullback_solve(problem, deformation, t, config).E
    gap = problem.x_norm(on_mesh - pulled)
    scale = problem.x_norm(pulled)
    return {"t": float(t), "difference": gap, "relative": gap / scale if scale > 0 else 0.0,
            "mesh_size": mesh.mesh_size()}


# ---------------------------------------------------------------------------
# Shape derivative recovery
# ---------------------------------------------------------------------------

def transport_term(problem: ScatteringProblem, E: np.ndarray, deformation,
                   kits: Optional[MaterialKits] = None, region: Optional[int] = None) -> TransportTerm:
    """
    Lie transport J_h^T E + (h.grad) E = grad(h.E) + curl E x h of E along h

    The edge moments are what W differentiates: d/dt of int E.t over the moved edge is
    [h.E] between the end points plus int (curl E x h).t. End values of E and the curl along
    the edge come from the region-wise P1 projections; region restricts the moments to the
    tets of one material region, otherwise copies on a shared edge are averaged.
    """
    space = problem.space
    mesh = space.mesh
    kits = kits or material_kits(problem, deformation)
    kit = kits.volume
    projection = problem.p1_projection
    E_values = space.values_at_quadrature(E)
    E_field = projection.project(E_values)
    values = (np.einsum("tqji,tqj->tqi", kit.jacobian_h, E_values)
              + np.einsum("tcj,tqj->tqc", E_field.gradient(), kit.h_values))

    curl = np.broadcast_to(space.curls_per_tet(E)[:, None, :], E_values.shape)
    C_field = projection.project(np.ascontiguousarray(curl))

    tets = np.arange(mesh.n_tets) if region is None else np.flatnonzero(mesh.tet_regions == region)
    first, second = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
    corners = mesh.vertices[mesh.tets[tets]]
    hE = np.einsum("tvd,tvd->tv", deformation.value(corners), E_field.tet_nodal[tets])
    start = corners[:, first]
    tangent = corners[:, second] - start
    s = EDGE_POINTS[None, None, :, None]
    points = start[:, :, None, :] + s * tangent[:, :, None, :]
    C_nodal = C_field.tet_nodal[tets]
    C_points = (1.0 - s) * C_nodal[:, first][:, :, None, :] + s * C_nodal[:, second][:, :, None, :]
    moments = (hE[:, second] - hE[:, first]
               + np.einsum("q,teqd,ted->te", EDGE_WEIGHTS, np.cross(C_points, deformation.value(points)), tangent))

    edges = mesh.tet_edges[tets]
    total = np.zeros(space.ndofs, dtype=complex)
    count = np.zeros(space.ndofs)
    np.add.at(total, edges, moments)
    np.add.at(count, edges, 1.0)
    dofs = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return TransportTerm(values, dofs)


def recover_shape_derivative(problem: ScatteringProblem, W: np.ndarray, E: np.ndarray, deformation,
                             kits: Optional[MaterialKits] = None):
    """dE = W - transport, as quadrature values and as an edge DoF vector"""
    transport = transport_term(problem, E, deformation, kits)
    delta_values = problem.space.values_at_quadrature(W) - transport.values
    return W - transport.dofs, delta_values, transport


@dataclass
class RegionShapeDerivative:
    """dE on each side of the interface; W is shared, the transport is taken from one region"""
    exterior: np.ndarray
    interior: np.ndarray


def recover_region_shape_derivative(problem: ScatteringProblem, W: np.ndarray, E: np.ndarray, deformation,
                                    kits: Optional[MaterialKits] = None) -> RegionShapeDerivative:
    """Broken dE of the transmission problem, whose tangential trace jumps across the interface"""
    kits = kits or material_kits(problem, deformation)
    return RegionShapeDerivative(
        exterior=W - transport_term(problem, E, deformation, kits, REGION_EXTERIOR).dofs,
        interior=W - transport_term(problem, E, deformation, kits, REGION_INTERIOR).dofs,
    )


# ---------------------------------------------------------------------------
# Hadamard boundary data
# ---------------------------------------------------------------------------

@dataclass
class SurfaceData:
    """Normals, shape operator and additive curvature at the Gamma quadrature points"""
    normals: np.ndarray
    shape_operator: np.ndarray
    curvature: np.ndarray
    source: str


def surface_data(problem: ScatteringProblem, surface: Optional[AnalyticSurface] = None,
                 allow_fit: bool = False) -> SurfaceData:
    quad = problem.space.boundary(problem.tag)
    if surface is not None:
        return SurfaceData(surface.normal(quad.points), surface.shape_operator(quad.points),
                           surface.additive_curvature(quad.points), surface.kind)
    if not allow_fit:
        raise MissingCurvature("No analytic surface and the Weingarten fit is disabled")
    discrete = surface_from_patch(problem.space.mesh, problem.space.mesh.patch(problem.tag))
    S = np.broadcast_to(discrete.weingarten()[:, None], quad.points.shape + (3,))
    return SurfaceData(quad.point_normals, S, np.trace(S, axis1=-2, axis2=-1), "weingarten-fit")


@dataclass
class NormalData:
    """h_n and grad_G h_n at the Gamma quadrature points"""
    h_n: np.ndarray
    grad_h_n: np.ndarray


def normal_data(problem: ScatteringProblem, deformation, surf: SurfaceData,
                snap: float = HADAMARD_SNAP) -> NormalData:
    """
    h_n = h.n and grad_G h_n = P (J_h^T n + S h)

    Values below snap times the deformation scale are round-off and are set to zero.
    """
    points = problem.space.boundary(problem.tag).points
    h = deformation.value(points)
    J_h = deformation.jacobian(points)
    n = surf.normals
    h_n = _dot(h, n)
    grad = tangential_component(np.einsum("...ji,...j->...i", J_h, n) + _matvec(surf.shape_operator, h), n)
    scale = max(float(np.abs(h).max(initial=0.0)), float(np.abs(J_h).max(initial=0.0)), 1e-300)
    h_n = np.where(np.abs(h_n) <= snap * scale, 0.0, h_n)
    grad = np.where(np.linalg.norm(grad, axis=-1, keepdims=True) <= snap * scale, 0.0, grad)
    return NormalData(h_n, grad)


@dataclass
class ShapeBoundaryData:
    """
    Data of the shape BVP at the Gamma quadrature points

    The full right side is -Curl_G(curl_scalar) + rest; curl_scalar is kept apart so the
    direct solve can integrate it by parts.
    """
    problem: str
    curl_scalar: np.ndarray
    rest: np.ndarray
    pointwise: np.ndarray
    jump: Optional[np.ndarray] = None

    def l2_norm(self, weights: np.ndarray) -> float:
        return float(np.sqrt(np.sum(weights * np.sum(np.abs(self.pointwise) ** 2, axis=-1))))


def _surface_pointwise(problem: ScatteringProblem, scalar: np.ndarray, operator: str) -> np.ndarray:
    """grad_G or Curl_G of scalar quadrature data through the P1 surface projection, one value per face"""
    if not np.any(scalar):
        return np.zeros(scalar.shape + (3,), dtype=complex)
    discrete = surface_from_patch(problem.space.mesh, problem.space.mesh.patch(problem.tag))
    nodal = discrete.project_quadrature_values(scalar)
    per_face = discrete.gradient(nodal) if operator == "gradient" else discrete.vector_curl(nodal)
    return np.broadcast_to(per_face[:, None, :], scalar.shape + (3,)).astype(complex)


def _surface_curl_pointwise(problem: ScatteringProblem, scalar: np.ndarray) -> np.ndarray:
    return _surface_pointwise(problem, scalar, "curl")


def normal_derivative(problem: ScatteringProblem, E: np.ndarray, surf: SurfaceData) -> np.ndarray:
    """
    d_n gamma_T E on the side the normal points into

    Uses n x curl E = grad_G E_n - d_n E_T - S E_T, so only the owner tet's curl and the
    surface gradient of the normal trace enter.
    """
    quad = problem.space.boundary(problem.tag)
    n = surf.normals
    E_out = quad.field(E)
    curl_out = np.broadcast_to(quad.curl(E)[:, None, :], E_out.shape)
    grad_En = _surface_pointwise(problem, _dot(E_out, n), "gradient")
    return tangential_component(grad_En - _matvec(surf.shape_operator, tangential_component(E_out, n))
                                - np.cross(n, curl_out), n)


def shape_boundary_data(problem: ScatteringProblem, E: np.ndarray, normal: NormalData,
                        surf: SurfaceData) -> ShapeBoundaryData:
    """
    Hadamard boundary data of the shape BVP, a function of (h_n, grad_G h_n) only

    nibc: n x curl dE + ik lambda gamma_T dE - g_z(gamma_T dE) = data
    npec: n x dE - g_z(gamma_T dE) = data
    ntc:  [mu^-1 n x curl dE] - g_z = data, with the jump [n x dE] returned alongside
    """
    space = problem.space
    quad = space.boundary(problem.tag)
    response = problem.response
    n = surf.normals
    S = surf.shape_operator
    curvature = surf.curvature
    h_n = normal.h_n
    grad_hn = normal.grad_h_n
    k2 = problem.wave.k ** 2

    E_out = quad.field(E)
    curl_out = np.broadcast_to(quad.curl(E)[:, None, :], E_out.shape)
    E_n = _dot(E_out, n)
    zE = tangential_component(E_out, n)
    dn_zE = normal_derivative(problem, E, surf)

    # response groups h_n (d_n g - S g) + h_n curvature g + g_z(E_n grad h_n)
    g_terms = np.zeros_like(zE)
    jump_n = E_n
    if problem.kind == "ntc":
        E_in = quad.inner_field(E)
        curl_in = np.broadcast_to(quad.inner_curl(E)[:, None, :], E_in.shape)
        jump_n = E_n - _dot(E_in, n)
    if not response.is_zero:
        g = response.evaluate(quad.points, zE)
        d_n_g = response.spatial_gradient_action(quad.points, zE, n) + response.directional_derivative(
            quad.points, zE, dn_zE)
        g_terms = (h_n[..., None] * (d_n_g - _matvec(S, g)) + (h_n * curvature)[..., None] * g
                   + response.directional_derivative(quad.points, zE, jump_n[..., None] * grad_hn))

    jump = None
    if problem.kind == "nibc":
        coef = 1j * problem.wave.k * problem.wave.impedance
        curl_scalar = h_n * _dot(n, curl_out)
        rest = (-(h_n * k2)[..., None] * zE
                - coef * (E_n[..., None] * grad_hn + h_n[..., None] * (dn_zE - _matvec(S, zE)))
                - coef * (h_n * curvature)[..., None] * zE
                + g_terms)
    elif problem.kind == "npec":
        curl_scalar = h_n * E_n
        rest = -h_n[..., None] * tangential_component(curl_out, n) + g_terms
    else:
        mu_out = 1.0
        mu_in = 1.0 / problem.wave.mu_interior
        eps_jump = 1.0 - problem.wave.eps_interior
        curl_scalar = h_n * (mu_out * _dot(n, curl_out) - mu_in * _dot(n, curl_in))
        rest = -(h_n * k2 * eps_jump)[..., None] * zE + g_terms
        jump = (-_surface_curl_pointwise(problem, h_n * jump_n)
                - h_n[..., None] * tangential_component(curl_out - curl_in, n))

    pointwise = -_surface_curl_pointwise(problem, curl_scalar) + rest
    return ShapeBoundaryData(problem.kind, curl_scalar, rest, pointwise, jump)


def shape_load(problem: ScatteringProblem, data: ShapeBoundaryData) -> np.ndarray:
    """
    Load of the direct shape BVP

    nibc: int curl_scalar (n . curl phi_i) + rest . gamma_T phi_i (Curl_G integrated by parts)
    npec: int data . (n x phi_i) on the Gamma rows
    """
    space = problem.space
    quad = space.boundary(problem.tag)
    if problem.kind == "nibc":
        n_curl = np.einsum("fd,fid->fi", quad.normals, quad.curls)
        local = np.einsum("fq,fq,fi->fi", quad.weights, data.curl_scalar, n_curl)
        local = local + np.einsum("fq,fqd,fqid->fi", quad.weights, data.rest, quad.traces)
    elif problem.kind == "npec":
        local = np.einsum("fq,fqd,fqid->fi", quad.weights, data.pointwise, quad.rotated)
    else:
        raise ValueError("The transmission shape BVP is checked through its jump conditions only")
    return space.scatter_vector(quad.dofs, local)


def solve_shape_bvp(problem: ScatteringProblem, E: np.ndarray, data: ShapeBoundaryData,
                    linearized: Optional[LinearizedSystem] = None) -> np.ndarray:
    """Direct solve of the shape BVP with the g_z term in the operator and all h_n terms in the load"""
    linearized = linearized or LinearizedSystem.for_problem(problem, E)
    return linearized.solve(shape_load(problem, data))


def verify_shape_bvp(problem: ScatteringProblem, E: np.ndarray, delta, data: ShapeBoundaryData,
                     linearized: Optional[LinearizedSystem] = None) -> Dict[str, Any]:
    """
    Residuals of dE in the shape BVP

    nibc/npec: Gamma rows in the dual L2(Gamma) norm, remaining rows in the dual H(curl) norm,
    both relative to the load, plus the pointwise L2(Gamma) mismatch of the boundary condition.
    ntc: L2(Gamma) mismatch of the tangential jump condition; delta is the RegionShapeDerivative,
    each side traced from its own region.
    """
    space = problem.space
    quad = space.boundary(problem.tag)
    if problem.kind == "ntc":
        if not isinstance(delta, RegionShapeDerivative):
            raise ValueError("The transmission jump needs dE on each side of the interface")
        delta_out = quad.field(delta.exterior)
        delta_in = quad.inner_field(delta.interior)
        normals = quad.point_normals
        jump = np.cross(normals, delta_out - delta_in)
        mismatch = quad.l2_norm(jump - data.jump)
        scale = quad.l2_norm(data.jump)
        return {"problem": "ntc", "jump_residual": mismatch, "jump_scale": scale,
                "relative": mismatch / scale if scale > 0 else mismatch}

    linearized = linearized or LinearizedSystem.for_problem(problem, E)
    load = shape_load(problem, data)
    residual = linearized.apply(delta) - load
    B = space.gamma_dofs
    interior = np.ones(space.ndofs, dtype=bool)
    interior[B] = False

    M_BB = problem.boundary_mass[B][:, B]
    energy = (problem.plain_curl_curl + problem.plain_mass)[interior][:, interior]
    mass_lu = factorize(M_BB, "boundary mass")
    energy_lu = factorize(energy, "interior Gram")

    def dual(lu, r):
        return float(np.sqrt(max(np.real(np.vdot(r, solve_real(lu, r))), 0.0)))

    scale = dual(mass_lu, load[B]) + dual(energy_lu, load[interior])
    boundary_dual = dual(mass_lu, residual[B])
    volume_dual = dual(energy_lu, residual[interior])

    # pointwise boundary condition on the per-tet curl of dE
    normals = quad.point_normals
    z_delta = quad.trace(delta)
    lhs = -problem.response.directional_derivative(quad.points, quad.trace(E), z_delta) \
        if not problem.response.is_zero else np.zeros_like(z_delta)
    if problem.kind == "nibc":
        curl_delta = np.broadcast_to(quad.curl(delta)[:, None, :], z_delta.shape)
        lhs = lhs + np.cross(normals, curl_delta) + 1j * problem.wave.k * problem.wave.impedance * z_delta
    else:
        lhs = lhs + np.cross(normals, quad.field(delta))
    pointwise = quad.l2_norm(lhs - data.pointwise)
    data_norm = quad.l2_norm(data.pointwise)
    return {
        "problem": problem.kind,
        "boundary_dual": boundary_dual,
        "volume_dual": volume_dual,
        "relative": (boundary_dual + volume_dual) / scale if scale > 0 else boundary_dual + volume_dual,
        "boundary_l2": pointwise,
        "boundary_l2_relative": pointwise / data_norm if data_norm > 0 else pointwise,
    }


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def compute_sensitivity(problem: ScatteringProblem, solution: SolveResult, deformation,
                        surface: Optional[AnalyticSurface] = None, allow_fit: bool = False,
                        linearized: Optional[LinearizedSystem] = None,
                        with_mixed: bool = True) -> SensitivityResult:
    """Material derivative, shape derivative and boundary data for one deformation"""
    E = solution.E
    kits = material_kits(problem, deformation)
    linearized = linearized or LinearizedSystem.for_problem(problem, E)
    W = solve_material(linearized, assemble_material_rhs(problem, E, deformation, kits))
    delta_dofs, delta_values, transport = recover_shape_derivative(problem, W, E, deformation, kits)

    result = SensitivityResult(
        problem=problem.kind, deformation=deformation.descriptor(), W=W, transport=transport,
        delta_dofs=delta_dofs, delta_values=delta_values,
    )
    if problem.kind == "ntc":
        result.delta_regions = recover_region_shape_derivative(problem, W, E, deformation, kits)
    if problem.kind == "npec":
        Q = solution.Q if solution.Q is not None else discrete_curl(problem, E)
        result.delta_Q = discrete_curl(problem, delta_dofs)
        if with_mixed:
            mixed = LinearizedSystem.mixed(problem, E)
            stacked = solve_material(mixed, assemble_material_rhs_mixed(problem, E, Q, deformation, kits))
            n = problem.space.ndofs
            result.W_mixed, result.P = stacked[:n], stacked[n:]
            result.diagnostics["mixed_identity"] = mixed_identity_residual(
                problem, result.W_mixed, result.P, Q, deformation, kits)

    surf = surface_data(problem, surface, allow_fit)
    result.boundary_data = shape_boundary_data(problem, E, normal_data(problem, deformation, surf), surf)
    logger.info(f"{problem.kind} sensitivity for {deformation.name}: |W|_X = {problem.x_norm(W):.4e}, "
                f"|dE|_X = {problem.x_norm(delta_dofs):.4e}")
    return result


def additivity_gap(linearized: LinearizedSystem, problem: ScatteringProblem, E: np.ndarray,
                   first, second) -> float:
    """|W(h1 + h2) - W(h1) - W(h2)|_X relative to |W(h1 + h2)|_X"""
    solves: List[np.ndarray] = []
    for h in (first, second, first + second):
        solves.append(solve_material(linearized, assemble_material_rhs(problem, E, h)))
    gap = problem.x_norm(solves[2] - solves[0] - solves[1])
    scale = problem.x_norm(solves[2])
    return gap / scale if scale > 0 else gap
