# utils/run_config.py
"""
Experiment configuration: one JSON document per run, validated with pydantic
Complex entries accept a number, a [re, im] pair or a Python complex literal ("1+0.5j")
"""

import json
import logging
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from utils.errors import ConfigError

logger = logging.getLogger(__name__)


def parse_complex(value: Any) -> complex:
    if isinstance(value, bool):
        raise ValueError("boolean is not a complex number")
    if isinstance(value, (int, float, complex)):
        return complex(value)
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError("complex pair must be [re, im]")
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, str):
        try:
            return complex(value.replace(" ", ""))
        except ValueError:
            raise ValueError(f"cannot parse '{value}' as a complex number")
    raise ValueError(f"unsupported complex value {value!r}")


ComplexValue = Annotated[complex, BeforeValidator(parse_complex)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MeshSection(_Section):
    builtin: Optional[Literal["ball", "spherical-shell", "cube-with-hole"]] = "spherical-shell"
    level: int = Field(1, ge=0, le=3)
    path: Optional[str] = None
    inner_radius: float = Field(1.0, gt=0)
    outer_radius: float = Field(2.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.builtin is None and not self.path:
            raise ValueError("either builtin or path is required")
        if self.inner_radius >= self.outer_radius:
            raise ValueError("inner_radius must be smaller than outer_radius")
        return self


class WaveSection(_Section):
    k: float = Field(1.0, gt=0)
    impedance: ComplexValue = 1.0
    mu_interior: ComplexValue = 1.0
    eps_interior: ComplexValue = 2.0
    direction: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    polarization: Tuple[ComplexValue, ComplexValue, ComplexValue] = (1.0, 0.0, 0.0)

    @field_validator("impedance")
    @classmethod
    def _impedance(cls, v: complex) -> complex:
        if v.real <= 0:
            raise ValueError("impedance needs a positive real part")
        return v

    @field_validator("direction")
    @classmethod
    def _direction(cls, v):
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ValueError("direction must be nonzero")
        return tuple(float(c) / norm for c in v)

    @model_validator(mode="after")
    def _transverse(self):
        if abs(np.dot(np.asarray(self.polarization, dtype=complex), np.asarray(self.direction))) >= 1e-12:
            raise ValueError("polarization must be orthogonal to direction")
        return self


class ResponseSection(_Section):
    type: Literal["zero", "linear", "saturating", "constant"] = "saturating"
    beta: Optional[ComplexValue] = None
    c: ComplexValue = 0.1
    a_const: float = 1.0
    a_tilt: float = Field(0.0, ge=0.0, lt=1.0)
    vector: Tuple[float, float, float] = (1.0, 0.0, 0.0)


class RadiationSection(_Section):
    variant: Literal["silver-mueller-1", "spectral-dtn"] = "silver-mueller-1"
    order: int = Field(0, ge=0, le=8)


class DeformationSection(_Section):
    type: Literal["radial-bump", "tangential-rotation", "random-smooth", "zero"] = "radial-bump"
    amplitude: float = Field(0.5, ge=0.0)
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    seed: Optional[int] = None
    inner_radius: Optional[float] = Field(None, gt=0)
    outer_radius: Optional[float] = Field(None, gt=0)


class SolverSection(_Section):
    max_iters: int = Field(200, ge=1)
    abs_tol: float = Field(1e-10, gt=0)
    rel_tol: float = Field(1e-8, gt=0)
    damping: float = Field(1.0, gt=0, le=1.0)


class VerifySection(_Section):
    refinement_levels: List[int] = Field(default_factory=lambda: [0, 1, 2])
    critical_fraction: float = Field(0.5, gt=0)
    divergence_factor: float = Field(1e3, gt=1)
    fd_level: int = Field(1, ge=0, le=3)
    fd_t_grid: List[float] = Field(default_factory=lambda: [1e-1, 3e-2, 1e-2, 3e-3])
    geometry_t_grid: List[float] = Field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    piola_samples: int = Field(20, ge=1)

    @field_validator("refinement_levels")
    @classmethod
    def _levels(cls, v):
        if len(v) < 2 or any(b <= a for a, b in zip(v, v[1:])) or min(v) < 0 or max(v) > 3:
            raise ValueError("need at least two increasing levels in 0..3")
        return v

    @field_validator("fd_t_grid", "geometry_t_grid")
    @classmethod
    def _grids(cls, v):
        return _check_grid(v)


def _check_grid(v: List[float]) -> List[float]:
    if len(v) < 2:
        raise ValueError("t_grid needs at least two steps")
    if any(t <= 0 for t in v):
        raise ValueError("t_grid entries must be positive")
    if any(b >= a for a, b in zip(v, v[1:])):
        raise ValueError("t_grid must be strictly decreasing")
    return [float(t) for t in v]


class RunConfig(_Section):
    """A full experiment description"""
    problem: Literal["nibc", "npec", "ntc"] = "nibc"
    mesh: MeshSection = Field(default_factory=MeshSection)
    wave: WaveSection = Field(default_factory=WaveSection)
    response: ResponseSection = Field(default_factory=ResponseSection)
    radiation: RadiationSection = Field(default_factory=RadiationSection)
    deformation: DeformationSection = Field(default_factory=DeformationSection)
    t_grid: List[float] = Field(default_factory=lambda: [1e-1, 3e-2, 1e-2, 3e-3])
    solver: SolverSection = Field(default_factory=SolverSection)
    verify: VerifySection = Field(default_factory=VerifySection)
    output_dir: Optional[str] = None
    dump_system: bool = False
    seed: int = 0

    @field_validator("t_grid")
    @classmethod
    def _t_grid(cls, v):
        return _check_grid(v)

    @model_validator(mode="after")
    def _mesh_matches_problem(self):
        if self.problem == "ntc" and self.mesh.path is None and self.mesh.builtin != "ball":
            raise ValueError("ntc needs an interface mesh (builtin 'ball')")
        if self.problem != "ntc" and self.mesh.builtin == "ball":
            raise ValueError(f"{self.problem} needs an obstacle mesh, not 'ball'")
        return self

    def response_spec(self, beta: Optional[complex] = None) -> Dict[str, Any]:
        """Response descriptor; an unset beta is filled in by the caller (a fraction of the critical value)"""
        spec = self.response.model_dump()
        if beta is not None:
            spec["beta"] = beta
        return spec

    def deformation_spec(self) -> Dict[str, Any]:
        spec = self.deformation.model_dump(exclude_none=True)
        spec.setdefault("seed", self.seed)
        return spec

    def with_overrides(self, **changes) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. with_overrides(**{"mesh.level": 2})"""
        data = _jsonable(self.model_dump())
        for path, value in changes.items():
            target = data
            keys = path.split(".")
            for key in keys[:-1]:
                target = target[key]
            target[keys[-1]] = value
        return RunConfig.model_validate(_jsonable(data))


def _jsonable(value: Any) -> Any:
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """JSON-safe dump with complex values as [re, im]"""
    return _jsonable(config.model_dump())


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def parse_run_config(data: Union[Dict[str, Any], str]) -> RunConfig:
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as e:
            raise ConfigError(f"<root>: invalid JSON ({e.msg} at line {e.lineno})") from e
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"<root>: config file not found: {path}")
    config = parse_run_config(path.read_text())
    logger.info(f"Loaded {config.problem} config from {path}")
    return config


def default_config(problem: str = "nibc") -> RunConfig:
    """Shipped defaults for each problem class"""
    if problem == "nibc":
        return RunConfig(problem="nibc")
    if problem == "npec":
        return RunConfig(problem="npec", response=ResponseSection(type="saturating", beta=0.05))
    if problem == "ntc":
        return RunConfig(problem="ntc", mesh=MeshSection(builtin="ball"),
                         wave=WaveSection(eps_interior=2.0, mu_interior=1.0))
    raise ConfigError(f"problem: unknown problem '{problem}'")


def write_default_configs(directory) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for problem in ("nibc", "npec", "ntc"):
        path = directory / f"{problem}.json"
        path.write_text(json.dumps(config_to_dict(default_config(problem)), indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return paths
