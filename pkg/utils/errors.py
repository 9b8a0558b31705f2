# utils/errors.py
"""
Exception hierarchy for the nonlinear Maxwell shape-sensitivity toolkit
Every failure mode of the library has its own class; the CLI maps categories to exit codes
"""

from typing import Dict, Type

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_CRITERIA = 4


class MaxwellShapeError(Exception):
    """Base class for all library errors"""

    exit_code = EXIT_SOLVER


# Configuration

class ConfigError(MaxwellShapeError):
    exit_code = EXIT_CONFIG


# Geometry

class GeometryError(MaxwellShapeError):
    pass


class MeshError(GeometryError):
    """Malformed mesh file or violated mesh invariant"""


class NonInvertible(GeometryError):
    """det J_phi <= 0, or the deformation step is not admissible"""


class SupportViolation(GeometryError):
    """Deformation field is nonzero inside the collar of the artificial boundary"""


class DegenerateNormal(GeometryError):
    pass


class EvaluationOutOfDomain(GeometryError):
    pass


class DegenerateTriangle(GeometryError):
    pass


class MissingCurvature(GeometryError):
    """Curvature data requested on a surface that has neither closed forms nor a fit"""


# Response

class ResponseError(MaxwellShapeError):
    pass


class OutsideTubularNeighborhood(ResponseError):
    pass


class EmptySampleSet(ResponseError):
    pass


# Discretization

class DiscretizationError(MaxwellShapeError):
    pass


class QuadratureFailure(DiscretizationError):
    pass


class UnsupportedOuterBoundary(DiscretizationError):
    pass


class PolarizationNotTransverse(DiscretizationError):
    pass


class SingularExtension(DiscretizationError):
    pass


# Solver

class SolverError(MaxwellShapeError):
    pass


class NotContracting(SolverError):
    pass


class MaxItersExceeded(SolverError):
    pass


class SingularSystem(SolverError):
    pass


class LiftFailure(SolverError):
    pass


# Sensitivity

class SensitivityError(MaxwellShapeError):
    pass


class NotConverged(SensitivityError):
    pass


class SingularLinearizedSystem(SensitivityError):
    pass


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(exc, MaxwellShapeError):
        return exc.exit_code
    return EXIT_SOLVER


def error_catalog() -> Dict[str, Type[MaxwellShapeError]]:
    """Name -> class lookup, used when reports record expected failures"""
    catalog = {}
    pending = [MaxwellShapeError]
    while pending:
        cls = pending.pop()
        catalog[cls.__name__] = cls
        pending.extend(cls.__subclasses__())
    return catalog
