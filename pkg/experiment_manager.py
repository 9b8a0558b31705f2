# experiment_manager.py
"""
Experiment Manager
Builds meshes, problems and solutions from a RunConfig and runs the solve, geomcheck,
derive and verify commands. Each command returns a result dict and writes report.json
plus CSV tables to the output directory.
"""

import dataclasses
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from check_mesh import check_bundle
from create_mesh import MeshBundle, load_mesh_bundle
from deformations import DeformationField, build_deformation, hadamard_split
from discretization import EdgeSpace, RadiationOperator, ScatteringProblem, WaveParameters
from geometry import AnalyticSurface
from response import BoundaryResponse, SaturatingResponse, ZeroResponse, build_response, estimate_lipschitz
from sensitivity import (
    LinearizedSystem,
    assemble_material_rhs,
    compute_sensitivity,
    deformed_mesh_check,
    material_fd_check,
    rhs_fd_check,
    solve_shape_bvp,
    verify_shape_bvp,
)
from solver import FixedPointConfig, SolveResult, StabilityEstimate, critical_beta, estimate_stability, solve_problem
from utils.errors import EXIT_CRITERIA, EXIT_OK, MaxwellShapeError, exit_code_for
from utils.report_writer import INFO, Report, dump_systems
from utils.run_config import RunConfig, config_to_dict
from utils.settings import get_settings
import verification_suites as suites

logger = logging.getLogger(__name__)

ADDITIVITY_TOLERANCE = 1e-10
RHS_FD_SLOPE = 0.9


class ExperimentManager:
    """Runs the CLI commands for one configuration; meshes, problems and solutions are cached per level"""

    def __init__(self, config: RunConfig, out_dir: Optional[str] = None, seed: Optional[int] = None,
                 threads: Optional[int] = None):
        settings = get_settings()
        self.config = config
        self.seed = int(config.seed if seed is None else seed)
        self.threads = int(threads or settings.threads)
        self.out_dir = Path(out_dir or config.output_dir or settings.runs_dir / config.problem)
        self.solver_config = FixedPointConfig(**config.solver.model_dump())
        self.tight_solver_config = FixedPointConfig(
            max_iters=max(config.solver.max_iters, 500),
            abs_tol=min(config.solver.abs_tol, 1e-14),
            rel_tol=min(config.solver.rel_tol, 1e-12),
            damping=config.solver.damping,
        )
        self._bundles: Dict[Tuple[str, int], MeshBundle] = {}
        self._problems: Dict[Tuple[str, int], ScatteringProblem] = {}
        self._nonlinear: Dict[Tuple[str, int], ScatteringProblem] = {}
        self._stability: Dict[Tuple[str, int], StabilityEstimate] = {}
        self._solutions: Dict[Tuple[str, int], SolveResult] = {}
        logger.info(f"Experiment manager for {config.problem}: out={self.out_dir}, seed={self.seed}, "
                    f"threads={self.threads}")

    # -- building blocks ----------------------------------------------------------

    @property
    def nonlinear_vacuous(self) -> bool:
        return self.config.response.type == "zero"

    def _key(self, kind: Optional[str], level: Optional[int]) -> Tuple[str, int]:
        return (kind or self.config.problem, self.config.mesh.level if level is None else int(level))

    def bundle(self, kind: Optional[str] = None, level: Optional[int] = None) -> MeshBundle:
        """Interface mesh (ball) for ntc, obstacle mesh otherwise; a mesh file only serves the configured run"""
        key = self._key(kind, level)
        if key not in self._bundles:
            mesh = self.config.mesh
            configured = key == self._key(None, None)
            if key[0] == "ntc":
                builtin = "ball"
            elif mesh.builtin in (None, "ball"):
                builtin = "spherical-shell"
            else:
                builtin = mesh.builtin
            path = mesh.path if configured else None
            self._bundles[key] = load_mesh_bundle(builtin, key[1], path, mesh.inner_radius, mesh.outer_radius)
            logger.info(f"Mesh for {key[0]} level {key[1]}: {self._bundles[key].mesh.summary()}")
        return self._bundles[key]

    def surface(self, kind: Optional[str] = None, level: Optional[int] = None) -> AnalyticSurface:
        return self.bundle(kind, level).surface

    def wave(self) -> WaveParameters:
        spec = self.config.wave
        wave = WaveParameters(spec.k, spec.impedance, spec.mu_interior, spec.eps_interior,
                              tuple(spec.direction), tuple(spec.polarization))
        wave.check_transverse()
        return wave

    def problem(self, kind: Optional[str] = None, level: Optional[int] = None) -> ScatteringProblem:
        """Reference problem with the zero response; nonlinear variants share its assembled forms"""
        key = self._key(kind, level)
        if key not in self._problems:
            bundle = self.bundle(*key)
            space = EdgeSpace(bundle.mesh, bundle.boundary_tag, threads=self.threads)
            radiation = RadiationOperator(self.config.radiation.variant, bundle.outer_radius,
                                          self.config.radiation.order)
            self._problems[key] = ScatteringProblem(space, self.wave(), ZeroResponse(bundle.surface),
                                                    radiation, key[0])
        return self._problems[key]

    def stability(self, kind: Optional[str] = None, level: Optional[int] = None) -> StabilityEstimate:
        key = self._key(kind, level)
        if key not in self._stability:
            self._stability[key] = estimate_stability(self.problem(*key), seed=self.seed)
        return self._stability[key]

    def critical_beta(self, kind: Optional[str] = None, level: Optional[int] = None) -> float:
        spec = self.config.response
        sup = abs(spec.a_const) * (1.0 + abs(spec.a_tilt))
        return critical_beta(self.stability(kind, level), sup)

    def saturating(self, kind: Optional[str], level: Optional[int], beta: complex) -> SaturatingResponse:
        spec = self.config.response
        return SaturatingResponse(self.surface(kind, level), beta, spec.a_const, spec.a_tilt)

    def response(self, kind: Optional[str] = None, level: Optional[int] = None) -> BoundaryResponse:
        """Configured response; an unset saturation strength is a fraction of the critical value"""
        spec = self.config.response
        beta = spec.beta
        if beta is None:
            beta = (self.config.verify.critical_fraction * self.critical_beta(kind, level)
                    if spec.type == "saturating" else 0.1)
        return build_response(self.config.response_spec(beta), self.surface(kind, level))

    def nonlinear_problem(self, kind: Optional[str] = None, level: Optional[int] = None) -> ScatteringProblem:
        key = self._key(kind, level)
        if key not in self._nonlinear:
            self._nonlinear[key] = self.problem(*key).with_response(self.response(*key))
        return self._nonlinear[key]

    def solution(self, kind: Optional[str] = None, level: Optional[int] = None) -> SolveResult:
        """Converged solution of the configured response, solved to round-off for derivative checks"""
        key = self._key(kind, level)
        if key not in self._solutions:
            self._solutions[key] = solve_problem(self.nonlinear_problem(*key), self.tight_solver_config)
        return self._solutions[key]

    def deformation(self, kind: Optional[str] = None, level: Optional[int] = None,
                    deformation_type: Optional[str] = None) -> DeformationField:
        bundle = self.bundle(kind, level)
        spec = self.config.deformation_spec()
        if deformation_type is not None:
            spec["type"] = deformation_type
        return build_deformation(spec, surface_radius=bundle.inner_radius, outer_radius=bundle.outer_radius)

    # -- command plumbing ---------------------------------------------------------------

    def _run(self, command: str, body: Callable[[Report], None]) -> Dict[str, Any]:
        report = Report(command, self.config.problem, config_to_dict(self.config), self.seed)
        logger.info(f"Running {command} for {self.config.problem}")
        try:
            body(report)
        except MaxwellShapeError as e:
            logger.error(f"{command} failed: {type(e).__name__}: {e}")
            report.add_section("error", {"type": type(e).__name__, "message": str(e)})
            self._write(report)
            return {"success": False, "error": f"{type(e).__name__}: {e}", "exit_code": exit_code_for(e),
                    "report": report}

        self._write(report)
        if report.passed:
            return {"success": True, "error": None, "exit_code": EXIT_OK, "report": report}
        failed = ", ".join(report.failed_criteria())
        return {"success": False, "error": f"Failed criteria: {failed}", "exit_code": EXIT_CRITERIA,
                "report": report}

    def _write(self, report: Report) -> None:
        try:
            report.write(self.out_dir)
        except OSError as e:
            logger.error(f"Could not write report to {self.out_dir}: {e}")
            raise

    def _mesh_rows(self, report: Report, bundle: MeshBundle) -> None:
        result = check_bundle(bundle)
        for name, ok in result["checks"].items():
            report.check("MESH", name, ok)
        report.add_section("mesh", {**bundle.descriptor(),
                                    **{k: v for k, v in result.items() if k not in ("checks", "summary", "passed")}})

    def _trace_norms(self, problem: ScatteringProblem, E: np.ndarray) -> Dict[str, float]:
        quad = problem.space.boundary(problem.tag)
        trace = quad.trace(E)
        return {
            "x_norm": problem.x_norm(E),
            "hcurl_norm": problem.hcurl_norm(E),
            "gamma_T_l2": quad.l2_norm(trace),
            "n_cross_E_l2": quad.l2_norm(np.cross(quad.point_normals, quad.field(E))),
            "g_l2": quad.l2_norm(problem.response.evaluate(quad.points, trace)),
        }

    def _lipschitz_row(self, report: Report, problem: ScatteringProblem) -> Dict[str, Any]:
        """Sampled Lipschitz ratio of g on the Gamma quadrature points against the declared L_g"""
        points = problem.space.boundary(problem.tag).points.reshape(-1, 3)
        rng = np.random.default_rng(self.seed)
        z1, z2 = (rng.normal(size=points.shape) + 1j * rng.normal(size=points.shape) for _ in range(2))
        sampled = estimate_lipschitz(problem.response, points, z1, z2)
        report.check("SOLVE", "sampled Lipschitz ratio within declared L_g", not sampled["exceeds_declared"],
                     sampled["estimate"], sampled["declared"])
        report.add_section("lipschitz", sampled)
        return sampled

    # -- commands -------------------------------------------------------------------------

    def solve(self) -> Dict[str, Any]:
        return self._run("solve", self._solve)

    def geomcheck(self) -> Dict[str, Any]:
        return self._run("geomcheck", self._geomcheck)

    def derive(self) -> Dict[str, Any]:
        return self._run("derive", self._derive)

    def verify(self) -> Dict[str, Any]:
        return self._run("verify", self._verify)

    def _solve(self, report: Report) -> None:
        bundle = self.bundle()
        self._mesh_rows(report, bundle)
        problem = self.nonlinear_problem()

        # admissibility of the configured deformation over the whole t-grid
        deformation = self.deformation()
        problem.pulled_back(deformation, max(self.config.t_grid))
        report.add_section("deformation", {**deformation.descriptor(), "admissible_up_to": max(self.config.t_grid)})

        estimate = None
        if not (problem.response.is_zero or problem.response.field_independent):
            estimate = dataclasses.replace(self.stability(), lipschitz=problem.response.lipschitz)
            report.add_section("stability", estimate.summary())
            self._lipschitz_row(report, problem)

        result = solve_problem(problem, self.solver_config)
        diagnostics = result.diagnostics
        if estimate is not None:
            diagnostics.surrogate = estimate.contraction
        report.add_section("problem", problem.describe())
        report.add_section("solve", diagnostics.summary())
        report.add_section("trace_norms", self._trace_norms(problem, result.E))
        report.add_table("iterations", diagnostics.to_frame())

        report.check("SOLVE", "fixed point converged", diagnostics.converged, diagnostics.iterations,
                     self.solver_config.max_iters)
        if problem.response.is_zero or problem.response.field_independent:
            report.check("SOLVE", "field-independent response converges in one iteration",
                         diagnostics.iterations == 1, diagnostics.iterations, 1)
        elif diagnostics.rho_hat is not None:
            report.check("SOLVE", "median increment ratio below one", diagnostics.rho_hat < 1.0,
                         diagnostics.rho_hat, 1.0, surrogate=diagnostics.surrogate)
        else:
            report.add_row("SOLVE", "median increment ratio", INFO, None, note="too few iterations to estimate")

        if self.config.dump_system:
            report.artifacts.update(dump_systems({problem.kind: problem.system()}, self.out_dir))

    def _geomcheck(self, report: Report) -> None:
        bundle = self.bundle()
        self._mesh_rows(report, bundle)
        rng = np.random.default_rng(self.seed)
        deformation = self.deformation()
        verify = self.config.verify

        mesh = bundle.mesh
        centroids = mesh.vertices[mesh.tets].mean(axis=1)
        stride = max(1, len(centroids) // 2000)
        quad = self.problem().space.boundary(bundle.boundary_tag)
        surface_points = bundle.surface.project(quad.points.reshape(-1, 3))
        wave = self.wave()

        report.add_section("deformation", deformation.descriptor())
        suites.guarded(report, "C1", "geometric expansions", suites.expansion_suite, deformation, bundle.surface,
                       centroids[::stride], surface_points, verify.geometry_t_grid, wave.incident)
        suites.guarded(report, "C1", "flat faces", suites.flat_face_suite, deformation, bundle.inner_radius, rng)
        suites.guarded(report, "C2", "Piola curl identity", suites.piola_suite, rng, verify.piola_samples)

    def _derive(self, report: Report) -> None:
        kind = self.config.problem
        problem = self.nonlinear_problem()
        solution = self.solution()
        surface = self.surface()
        deformation = self.deformation()
        report.add_section("problem", problem.describe())
        report.add_section("solve", solution.diagnostics.summary())

        linearized = LinearizedSystem.for_problem(problem, solution.E)
        normal_part, tangential_part = hadamard_split(deformation, surface)
        parts = {"full": deformation, "normal": normal_part, "tangential": tangential_part}
        results = {
            name: compute_sensitivity(problem, solution, h, surface, linearized=linearized,
                                      with_mixed=(kind == "npec" and name == "full"))
            for name, h in parts.items()
        }
        quad = problem.space.boundary(problem.tag)
        report.add_table("hadamard_split", pd.DataFrame([{
            "part": name,
            "material_norm": problem.x_norm(r.W),
            "shape_norm": problem.x_norm(r.delta_dofs),
            "transport_norm": problem.x_norm(r.transport.dofs),
            "boundary_data_l2": quad.l2_norm(r.boundary_data.pointwise),
        } for name, r in results.items()]))

        full = results["full"]
        scale = max(problem.x_norm(full.W), 1e-300)
        gap = problem.x_norm(full.W - results["normal"].W - results["tangential"].W) / scale
        report.check("LIN", "material derivative is additive in h", gap < ADDITIVITY_TOLERANCE, gap,
                     ADDITIVITY_TOLERANCE)

        data = results["tangential"].boundary_data
        zero = bool(np.all(data.pointwise == 0) and np.all(data.curl_scalar == 0) and np.all(data.rest == 0)
                    and (data.jump is None or np.all(data.jump == 0)))
        report.check("C7", "tangential part: boundary data exactly zero", zero,
                     float(np.abs(data.pointwise).max(initial=0.0)), 0.0)
        ratio = problem.x_norm(results["tangential"].delta_dofs) / max(problem.x_norm(results["tangential"].W), 1e-300)
        report.add_row("C7", "tangential part: shape over material derivative", INFO, ratio,
                       note="decays under refinement, see verify")

        fd = material_fd_check(problem, solution.E, full.W, deformation, self.config.t_grid,
                               self.tight_solver_config, self.threads)
        fit = {"t_grid": fd["t_grid"], "errors": fd["remainders"], "slope": fd["remainder_slope"],
               "fit_residual": fd["remainder_fit_residual"], "exact_zero": fd["exact_zero"]}
        suites.slope_row(report, "C5", "material derivative remainder", fit, suites.FD_SLOPE)
        report.check("C5", "scaled remainder decreases", fd["exact_zero"] or fd["scaled_monotone"],
                     fd["scaled_remainders"], "decreasing")
        report.add_table("fd", pd.DataFrame({"t": fd["t_grid"], "remainder": fd["remainders"],
                                             "scaled_remainder": fd["scaled_remainders"],
                                             "difference": fd["consistency"]}))

        rhs = rhs_fd_check(problem, solution.E, deformation, assemble_material_rhs(problem, solution.E, deformation),
                           seed=self.seed)
        if rhs["exact_zero"]:
            report.add_row("C5", "linearized right side against pulled-back residuals", INFO, 0.0,
                           note="exact zero")
        else:
            report.check("C5", "linearized right side against pulled-back residuals",
                         rhs["min_slope"] is not None and rhs["min_slope"] >= RHS_FD_SLOPE,
                         rhs["min_slope"], RHS_FD_SLOPE)
        report.add_section("rhs_fd", rhs)

        if kind == "npec":
            identity = full.diagnostics["mixed_identity"]
            report.check("C6", "linearized identity P + N_dot Q = curl W",
                         identity["relative"] < suites.MIXED_TOLERANCE, identity["relative"], suites.MIXED_TOLERANCE)

        delta = full.delta_regions if kind == "ntc" else full.delta_dofs
        bvp = verify_shape_bvp(problem, solution.E, delta, full.boundary_data, linearized)
        report.add_section("shape_bvp", bvp)
        if kind != "ntc":
            direct = solve_shape_bvp(problem, solution.E, full.boundary_data, linearized)
            gap = problem.hcurl_norm(direct - full.delta_dofs) / max(problem.hcurl_norm(direct), 1e-300)
            report.add_row("C8", "recovered against direct shape derivative", INFO, gap,
                           suites.BVP_AGREEMENT, level=self.config.mesh.level)

        moved = deformed_mesh_check(problem, deformation, self.config.t_grid[-1], self.tight_solver_config)
        report.add_row("MESH", "deformed mesh against pulled-back solve", INFO, moved["relative"], **moved)

    def _verify(self, report: Report) -> None:
        self._geomcheck(report)
        kind = self.config.problem
        verify = self.config.verify
        level = verify.fd_level
        levels = verify.refinement_levels

        suites.guarded(report, "C3", "fixed point", suites.fixed_point_suite, self, level)
        suites.guarded(report, "C4", "contraction", suites.contraction_suite, self, kind, level)
        suites.guarded(report, "C5", "material derivative", suites.material_fd_suite, self, kind, level,
                       verify.fd_t_grid)
        suites.guarded(report, "C6", "mixed identity", suites.mixed_identity_suite, self, level)
        suites.guarded(report, "C7", "Hadamard structure", suites.hadamard_suite, self, kind, levels)
        suites.guarded(report, "C8", "shape BVP", suites.bvp_crosscheck_suite, self, levels[-2:])
        if kind == "ntc":
            suites.guarded(report, "C8", "shape jump", suites.bvp_crosscheck_suite, self, levels[-2:], "ntc")
        suites.guarded(report, "C9", "manufactured solution", suites.manufactured_suite, self, levels)
