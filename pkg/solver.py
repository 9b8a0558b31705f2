# solver.py - Fixed-point solution of the nonlinear scattering problems
"""
Successive substitution through the linear solver

Each problem freezes the nonlinear boundary term at the previous iterate, solves the linear
problem with one sparse LU factorization and repeats until the DoF increments fall below
tolerance. Contraction is monitored from the increment ratios.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import splu

from discretization import PulledBackGeometry, ScatteringProblem
from response import LinearResponse
from utils.errors import LiftFailure, MaxItersExceeded, NotContracting, SingularExtension, SingularSystem
from utils.rates import increment_ratios

logger = logging.getLogger(__name__)

CONTRACTION_WINDOW = 10


class FixedPointConfig(BaseModel):
    max_iters: int = Field(200, ge=1)
    abs_tol: float = Field(1e-10, gt=0)
    rel_tol: float = Field(1e-8, gt=0)
    damping: float = Field(1.0, gt=0, le=1.0)


@dataclass
class ContractionDiagnostics:
    """Iteration history of one fixed-point solve"""
    problem: str
    increments: List[float] = field(default_factory=list)
    converged: bool = False
    residual: Optional[float] = None
    surrogate: Optional[float] = None

    @property
    def iterations(self) -> int:
        return len(self.increments)

    @property
    def ratios(self) -> List[float]:
        return increment_ratios(self.increments)

    @property
    def rho_hat(self) -> Optional[float]:
        """Median increment ratio, ignoring steps that already hit round-off"""
        usable = [r for r, inc in zip(self.ratios, self.increments[1:]) if inc > 0]
        return float(np.median(usable)) if usable else None

    def to_frame(self) -> pd.DataFrame:
        ratios = [np.nan] + self.ratios
        return pd.DataFrame({
            "iter": np.arange(1, self.iterations + 1),
            "increment_norm": self.increments,
            "ratio": ratios[:self.iterations],
        })

    def write_log(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10e")
        return path

    def summary(self) -> Dict[str, Any]:
        return {
            "problem": self.problem,
            "iterations": self.iterations,
            "converged": self.converged,
            "final_increment": self.increments[-1] if self.increments else None,
            "rho_hat": self.rho_hat,
            "residual": self.residual,
            "contraction_surrogate": self.surrogate,
        }


@dataclass
class SolveResult:
    E: np.ndarray
    diagnostics: ContractionDiagnostics
    Q: Optional[np.ndarray] = None


def factorize(matrix: csr_matrix, label: str = "system"):
    try:
        return splu(matrix.tocsc())
    except RuntimeError as e:
        raise SingularSystem(f"Factorization of the {label} failed: {e}") from e


def solve_real(lu, rhs: np.ndarray) -> np.ndarray:
    """Complex right-hand side against a real factorization"""
    return lu.solve(np.ascontiguousarray(rhs.real)) + 1j * lu.solve(np.ascontiguousarray(rhs.imag))


def iterate(apply: Callable[[np.ndarray], np.ndarray], start: np.ndarray, config: FixedPointConfig,
            diagnostics: ContractionDiagnostics, single_step: bool = False) -> np.ndarray:
    """
    Damped successive substitution E <- (1 - d) E + d T(E)

    Raises:
        NotContracting: median ratio >= 1 over the window, or no decrease across it
        MaxItersExceeded: tolerance not reached
    """
    E = start
    for m in range(1, config.max_iters + 1):
        T = apply(E)
        E_new = T if single_step else (1.0 - config.damping) * E + config.damping * T
        increment = float(np.linalg.norm(E_new - E))
        E = E_new
        diagnostics.increments.append(increment)
        logger.debug(f"[{diagnostics.problem}] iter {m}: increment {increment:.3e}")

        if not np.isfinite(increment):
            raise NotContracting(f"{diagnostics.problem}: non-finite increment at iteration {m}")
        if single_step or increment < config.abs_tol or increment < config.rel_tol * np.linalg.norm(E):
            diagnostics.converged = True
            return E

        if m >= CONTRACTION_WINDOW:
            window = diagnostics.ratios[-CONTRACTION_WINDOW:]
            stalled = increment >= diagnostics.increments[-CONTRACTION_WINDOW - 1] if m > CONTRACTION_WINDOW else False
            if np.median(window) >= 1.0 or stalled:
                raise NotContracting(
                    f"{diagnostics.problem}: median increment ratio {np.median(window):.3f} over the last "
                    f"{CONTRACTION_WINDOW} iterations"
                )

    raise MaxItersExceeded(
        f"{diagnostics.problem}: no convergence in {config.max_iters} iterations "
        f"(last increment {diagnostics.increments[-1]:.3e})"
    )


def _solve_impedance_like(problem: ScatteringProblem, config: FixedPointConfig,
                          geometry: Optional[PulledBackGeometry], initial: Optional[np.ndarray]):
    lu = factorize(problem.linear_matrix(geometry), f"{problem.kind} operator")
    F = problem.incident_load
    diagnostics = ContractionDiagnostics(problem.kind)
    start = lu.solve(F) if initial is None else np.asarray(initial, dtype=complex)

    def apply(E):
        return lu.solve(F + problem.nonlinear_load(E, geometry))

    single = problem.response.is_zero or problem.response.field_independent
    E = iterate(apply, start, config, diagnostics, single_step=single)
    diagnostics.residual = problem.residual(E, geometry)
    logger.info(f"{problem.kind} solve: {diagnostics.iterations} iterations, residual {diagnostics.residual:.3e}")
    return E, diagnostics


def solve_nibc(problem: ScatteringProblem, config: Optional[FixedPointConfig] = None,
               geometry: Optional[PulledBackGeometry] = None,
               initial: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ContractionDiagnostics]:
    """
    Fixed point of E = A_l^-1 (F + G(E)) starting from the linear solution

    Args:
        problem: assembled NIBC problem
        config: iteration controls
        geometry: pulled-back coefficients of a deformation, None for the reference domain
        initial: optional first iterate (defaults to the linear solution)
    """
    _require(problem, "nibc")
    return _solve_impedance_like(problem, config or FixedPointConfig(), geometry, initial)


def solve_ntc(problem: ScatteringProblem, config: Optional[FixedPointConfig] = None,
              geometry: Optional[PulledBackGeometry] = None,
              initial: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ContractionDiagnostics]:
    """Same iteration against the transmission operator with the interface load"""
    _require(problem, "ntc")
    return _solve_impedance_like(problem, config or FixedPointConfig(), geometry, initial)


def solve_npec(problem: ScatteringProblem, config: Optional[FixedPointConfig] = None,
               geometry: Optional[PulledBackGeometry] = None,
               initial: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, ContractionDiagnostics]:
    """
    Lifting iteration T(U) = E_0(U) + w_U

    w_U lifts the rotated-trace data g(., gamma_T U); E_0 solves the PEC-constrained problem
    with the load F - A_0 w_U over the DoFs off Gamma.
    """
    _require(problem, "npec")
    config = config or FixedPointConfig()
    interior = problem.interior_mask
    A0 = problem.linear_matrix(geometry)
    lu = factorize(A0[interior][:, interior], "PEC operator")
    F = problem.incident_load
    lift = problem.lift
    diagnostics = ContractionDiagnostics("npec")

    def apply(U):
        try:
            data = problem.boundary_datum(U, geometry)
            w = lift.extend(lift.project(lift.data_load({problem.tag: data})))
        except SingularExtension as e:
            raise LiftFailure(str(e)) from e
        rhs = (F - A0 @ w)[interior]
        E = w.copy()
        E[interior] += lu.solve(rhs)
        return E

    if initial is None:
        start = np.zeros(problem.space.ndofs, dtype=complex)
        start[interior] = lu.solve(F[interior])
    else:
        start = np.asarray(initial, dtype=complex)

    single = problem.response.is_zero or problem.response.field_independent
    E = iterate(apply, start, config, diagnostics, single_step=single)
    diagnostics.residual = problem.residual(E, geometry)
    logger.info(f"npec solve: {diagnostics.iterations} iterations, residual {diagnostics.residual:.3e}")
    return E, discrete_curl(problem, E), diagnostics


def discrete_curl(problem: ScatteringProblem, E: np.ndarray) -> np.ndarray:
    """Q = M^-1 (curl E, phi_i), the edge-space representative of curl E"""
    return solve_real(problem.mass_solver, problem.mixed_curl.T @ E)


def solve_problem(problem: ScatteringProblem, config: Optional[FixedPointConfig] = None,
                  geometry: Optional[PulledBackGeometry] = None,
                  initial: Optional[np.ndarray] = None) -> SolveResult:
    if problem.kind == "npec":
        E, Q, diagnostics = solve_npec(problem, config, geometry, initial)
        return SolveResult(E, diagnostics, Q)
    solve = solve_nibc if problem.kind == "nibc" else solve_ntc
    E, diagnostics = solve(problem, config, geometry, initial)
    return SolveResult(E, diagnostics)


def folded_matrix(problem: ScatteringProblem, geometry: Optional[PulledBackGeometry] = None) -> csr_matrix:
    """
    Operator with a C-linear response moved into the matrix

    NIBC/NTC: A_l - G. NPEC: A_0 on the rows off Gamma, M_Gamma - G(n x) on the Gamma rows.
    """
    if not isinstance(problem.response, LinearResponse):
        raise ValueError("Folding needs a C-linear response")
    E = np.zeros(problem.space.ndofs, dtype=complex)
    if problem.kind == "npec":
        g_re, _ = problem.derivative_blocks(E, geometry, rotated_test=True)
        interior = problem.interior_mask.astype(float)
        A0 = problem.linear_matrix(geometry)
        return (A0.multiply(interior[:, None]) + problem.boundary_mass - g_re).tocsr()
    g_re, _ = problem.derivative_blocks(E, geometry)
    return (problem.linear_matrix(geometry) - g_re).tocsr()


def solve_folded_linear(problem: ScatteringProblem, geometry: Optional[PulledBackGeometry] = None) -> np.ndarray:
    """Direct solve of the folded system; the oracle for the fixed-point iteration"""
    return factorize(folded_matrix(problem, geometry), "folded operator").solve(problem.incident_load)


# ---------------------------------------------------------------------------
# Stability surrogates
# ---------------------------------------------------------------------------

@dataclass
class StabilityEstimate:
    """Sampled data-to-solution norm and the contraction surrogate built from it"""
    constant: float
    lipschitz: float
    lift_norm: Optional[float] = None
    iterations: int = 0

    @property
    def contraction(self) -> float:
        return self.constant * self.lipschitz

    def critical_lipschitz(self) -> float:
        return 1.0 / self.constant if self.constant > 0 else np.inf

    def summary(self) -> Dict[str, Any]:
        return {
            "stability_constant": self.constant,
            "lipschitz": self.lipschitz,
            "contraction_surrogate": self.contraction,
            "lift_norm": self.lift_norm,
            "power_iterations": self.iterations,
        }


def _power_norm(forward, adjoint, norm_matrix, boundary_mass, size: int, iterations: int,
                rng: np.random.Generator) -> float:
    """sup |forward(xi)|_X / |xi|_M by power iteration on M^-1 forward^H X forward"""
    mass_lu = factorize(boundary_mass.tocsc(), "boundary mass")
    xi = rng.normal(size=size) + 1j * rng.normal(size=size)
    sigma = 0.0
    for _ in range(iterations):
        xi = xi / np.sqrt(np.real(np.vdot(xi, boundary_mass @ xi)))
        y = forward(xi)
        sigma = float(np.sqrt(max(np.real(np.vdot(y, norm_matrix @ y)), 0.0)))
        xi = solve_real(mass_lu, adjoint(norm_matrix @ y))
        if not np.any(xi):
            return 0.0
    return sigma


def estimate_stability(problem: ScatteringProblem, iterations: int = 15, seed: int = 0) -> StabilityEstimate:
    """
    NIBC/NTC: sup over Gamma data xi of |A_l^-1 M_Gamma xi|_X / |xi|_L2.
    NPEC: the same for the PEC extension c -> (c on Gamma, -A_0,II^-1 A_0,IB c), plus the lift norm.
    """
    rng = np.random.default_rng(seed)
    B = problem.space.gamma_dofs
    X = problem.norm_matrix
    M_gamma = problem.boundary_mass
    M_BB = M_gamma[B][:, B]
    n = problem.space.ndofs
    lipschitz = problem.response.lipschitz

    if problem.kind != "npec":
        lu = factorize(problem.linear_matrix(), f"{problem.kind} operator")
        coupling = M_gamma[:, B].tocsr()

        def forward(xi):
            return lu.solve(coupling @ xi)

        def adjoint(z):
            return coupling.T @ lu.solve(z, trans="H")

        constant = _power_norm(forward, adjoint, X, M_BB, B.size, iterations, rng)
        logger.info(f"Stability surrogate for {problem.kind}: C = {constant:.4e}")
        return StabilityEstimate(constant, lipschitz, iterations=iterations)

    interior = problem.interior_mask
    A0 = problem.linear_matrix()

    def extension(matrix):
        lu = factorize(matrix[interior][:, interior], "extension block")
        coupling = matrix[interior][:, B].tocsr()

        def forward(c):
            E = np.zeros(n, dtype=complex)
            E[B] = c
            E[interior] = -lu.solve(coupling @ c)
            return E

        def adjoint(z):
            return z[B] - coupling.conj().T @ lu.solve(z[interior], trans="H")

        return forward, adjoint

    forward, adjoint = extension(A0.astype(complex))
    constant = _power_norm(forward, adjoint, X, M_BB, B.size, iterations, rng)
    energy = (problem.plain_curl_curl + problem.plain_mass).astype(complex).tocsr()
    forward, adjoint = extension(energy)
    lift_norm = _power_norm(forward, adjoint, X, M_BB, B.size, iterations, rng)
    logger.info(f"Stability surrogate for npec: C = {constant:.4e}, lift norm {lift_norm:.4e}")
    return StabilityEstimate(constant, lipschitz, lift_norm, iterations)


def critical_beta(estimate: StabilityEstimate, amplitude_sup: float) -> float:
    """Saturation strength at which the contraction surrogate reaches one"""
    return 1.0 / (estimate.constant * amplitude_sup)


def _require(problem: ScatteringProblem, kind: str) -> None:
    if problem.kind != kind:
        raise ValueError(f"Expected a {kind} problem, got {problem.kind}")
