"""Run configuration.

Configs are YAML files validated by pydantic. Before validation, `.env` is loaded
and every `BEAMLAB_<SECTION>__<FIELD>` environment variable overrides the
matching entry (values are parsed as YAML scalars, so `BEAMLAB_BEAM__N=7` gives
an int). Command-line flags win over both.

    schema_version: 1
    pipeline: beam-verify
    metric: {kind: conformal, n: 1, T: 2.0, factor: "1 + 0.05*x**2"}
    beam: {N: 5, rho_list: [64, 128, 256, 512]}
"""

from collections.abc import Mapping
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

import dotenv
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from beamlab.lib.const import (
    DEFAULT_EPS_STEP,
    DEFAULT_JET_ORDER,
    DEFAULT_K_MAX,
    DEFAULT_RHO_LIST,
    SCHEMA_VERSION,
)
from beamlab.lib.errors import ConfigValidationError, ConfigurationError

ENV_PREFIX = "BEAMLAB_"

PipelineName = Literal["trace", "beam-verify", "forward", "dtn", "linearize", "reconstruct", "compare"]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DomainConfig(Section):
    shape: Literal["interval", "rectangle", "disk"] = "interval"
    length: float = Field(1.0, gt=0)
    lx: float = Field(1.0, gt=0)
    ly: float = Field(1.0, gt=0)
    radius: float = Field(1.0, gt=0)
    center: tuple[float, float] = (0.0, 0.0)


class MetricConfig(Section):
    kind: Literal["minkowski", "conformal", "static", "custom-sampled"] = "minkowski"
    n: int = Field(1, ge=1, le=2)
    T: float = Field(2.0, gt=0)
    domain: DomainConfig = DomainConfig()
    factor: str = "1"
    """conformal factor expression"""
    beta: str = "1"
    g0: list[list[str]] | None = None
    sample_file: str | None = None
    derivative_mode: Literal["analytic", "finite-difference"] = "analytic"
    h_fd: float | None = Field(None, gt=0)


class LatticeConfig(Section):
    nt: int = Field(512, ge=8)
    nx: int = Field(128, ge=8)
    ny: int = Field(0, ge=0)


class BeamConfig(Section):
    N: int = Field(DEFAULT_JET_ORDER, ge=1, le=9)
    h0_scale: float = Field(1.0, gt=0)
    """H0 = i * h0_scale * identity"""
    s_hat: float | None = None
    rho_list: list[float] = Field(default_factory=lambda: list(DEFAULT_RHO_LIST))
    k: int = Field(0, ge=0, le=2)
    chart_radius: float = Field(1.0, gt=0)
    chart_margin: float = Field(0.5, ge=0)
    s_nodes: int = Field(401, ge=33)
    start: list[float] = Field(default_factory=lambda: [0.0, 0.5])
    direction: list[float] = Field(default_factory=lambda: [1.0, 1.0])
    max_reflections: int = Field(1, ge=0)
    kappa: float = Field(1.0, gt=0)

    @field_validator("rho_list")
    @classmethod
    def _rho_list(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("rho_list must not be empty")
        if any(r <= 0 for r in value):
            raise ValueError("rho values must be positive")
        return value


class NonlinearityConfig(Section):
    coefficients: dict[int, str] = Field(default_factory=dict)
    """k -> V_k(t, x) expression"""
    k_max: int = Field(DEFAULT_K_MAX, ge=3, le=9)

    @field_validator("coefficients")
    @classmethod
    def _orders(cls, value: dict[int, str]) -> dict[int, str]:
        bad = [k for k in value if k < 3]
        if bad:
            raise ValueError(f"orders {bad} not allowed: V vanishes to second order and V_2 = 0")
        return value


class WindowConfig(Section):
    """A Gamma window: one wall, a time range and (in 2D) a range along the wall"""

    wall: int = Field(0, ge=0, le=3)
    t_min: float = 0.0
    t_max: float = 1e300
    s_min: float = -1e300
    s_max: float = 1e300


class BoundaryConfig(Section):
    waveform: Literal["bump", "zero", "sine"] = "bump"
    wall: int = Field(0, ge=0, le=3)
    center: float = Field(0.5, ge=0)
    width: float = Field(0.25, gt=0)
    amplitude: float = 1e-3
    along_center: float = 0.5
    along_width: float = Field(0.25, gt=0)
    frequency: float = 1.0
    gamma: list[WindowConfig] = Field(default_factory=list)
    """empty list means Gamma is the whole lateral boundary"""
    s_data: int = Field(2, ge=0)
    eps0: float = Field(1e-2, gt=0)
    battery: int = Field(4, ge=1)
    sample_file: str | None = None


class LinearizationConfig(Section):
    m: int = Field(3, ge=1, le=5)
    eps_step: float = Field(DEFAULT_EPS_STEP, gt=0)


class ReconstructionConfig(Section):
    points: list[list[float]] | None = None
    stride: int = Field(8, ge=1)
    oracle: Literal["field", "dtn"] = "field"
    calibration: bool = False
    m: int = Field(3, ge=3, le=5)
    window: float = Field(0.25, gt=0)
    bump_center: list[float] | None = None
    bump_width: float = Field(0.3, gt=0)
    bump_height: float = 1.0
    s_tol: float = Field(1e-8, gt=0)
    grad_tol: float = Field(1e-6, gt=0)


class SolverConfig(Section):
    residual: Literal["lattice", "analytic"] = "lattice"
    picard_tol: float = Field(1e-10, gt=0)
    max_iterations: int = Field(60, ge=1)
    refinements: int = Field(2, ge=0, le=3)
    """manufactured-solution refinements in the forward pipeline, 0 skips the study"""


class RunConfig(Section):
    schema_version: Literal[1] = SCHEMA_VERSION
    pipeline: PipelineName | None = None
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    metric: MetricConfig = MetricConfig()
    lattice: LatticeConfig = LatticeConfig()
    beam: BeamConfig = BeamConfig()
    nonlinearity: NonlinearityConfig = NonlinearityConfig(coefficients={3: "1"})
    nonlinearity_alt: NonlinearityConfig | None = None
    boundary: BoundaryConfig = BoundaryConfig()
    linearization: LinearizationConfig = LinearizationConfig()
    reconstruction: ReconstructionConfig = ReconstructionConfig()
    solver: SolverConfig = SolverConfig()

    def digest(self) -> str:
        """sha256 of the canonical JSON dump"""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _set_path(data: dict[str, Any], path: list[str], value: Any) -> None:
    node = data
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot override {'.'.join(path)}: {key} is not a section")
    node[path[-1]] = value


def _field_path(parts: list[str]) -> list[str]:
    """Match lowercased env key parts to the schema's field names"""
    model: type[BaseModel] | None = RunConfig
    out = []
    for part in parts:
        if model is None:
            out.append(part)
            continue
        name = next((f for f in model.model_fields if f.lower() == part), part)
        out.append(name)
        info = model.model_fields.get(name)
        annotation = info.annotation if info is not None else None
        model = annotation if isinstance(annotation, type) and issubclass(annotation, BaseModel) else None
    return out


def environment_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """`BEAMLAB_SECTION__FIELD=value` pairs as a nested dict"""
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [part.lower() for part in key[len(ENV_PREFIX) :].split("__") if part]
        if not parts:
            continue
        _set_path(out, _field_path(parts), yaml.safe_load(raw))
    return out


def merge(base: dict[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def _semantic_violations(config: RunConfig) -> list[tuple[str, str]]:
    violations = []
    metric = config.metric
    if metric.kind == "custom-sampled":
        if metric.sample_file is None:
            violations.append(("metric.sample_file", "required for custom-sampled metrics"))
        elif not Path(metric.sample_file).exists():
            violations.append(("metric.sample_file", f"{metric.sample_file} does not exist"))
    if metric.kind == "static":
        if metric.g0 is None:
            violations.append(("metric.g0", "required for kind static"))
        elif len(metric.g0) != metric.n or any(len(row) != metric.n for row in metric.g0):
            violations.append(("metric.g0", f"needs {metric.n} rows of {metric.n} entries"))
    expected = {1: "interval", 2: ("rectangle", "disk")}[metric.n]
    if metric.domain.shape not in expected:
        violations.append(("metric.domain.shape", f"{metric.domain.shape} is not a {metric.n}-dimensional domain"))
    if metric.n == 2 and config.lattice.ny < 8:
        violations.append(("lattice.ny", "2D runs need ny >= 8"))
    if config.boundary.sample_file is not None and not Path(config.boundary.sample_file).exists():
        violations.append(("boundary.sample_file", f"{config.boundary.sample_file} does not exist"))
    if len(config.beam.start) != metric.n + 1:
        violations.append(("beam.start", f"needs {metric.n + 1} coordinates"))
    if len(config.beam.direction) != metric.n + 1:
        violations.append(("beam.direction", f"needs {metric.n + 1} components"))
    for i, point in enumerate(config.reconstruction.points or []):
        if len(point) != metric.n + 1:
            violations.append((f"reconstruction.points.{i}", f"needs {metric.n + 1} coordinates"))
    for k in config.nonlinearity.coefficients:
        if k > config.nonlinearity.k_max:
            violations.append(("nonlinearity.coefficients", f"order {k} exceeds k_max"))
    return violations


def validate_config(data: Mapping[str, Any]) -> RunConfig:
    """Validate raw config data, reporting every violation at once"""
    try:
        config = RunConfig.model_validate(dict(data))
    except ValidationError as err:
        violations = [(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]) for e in err.errors()]
        raise ConfigValidationError(violations) from err
    violations = _semantic_violations(config)
    if violations:
        raise ConfigValidationError(violations)
    return config


def load_config(
    path: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """YAML file, then environment, then explicit overrides"""
    if environ is None:
        dotenv.load_dotenv()
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigValidationError([("--config", f"{path} does not exist")])
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigValidationError([("--config", f"invalid YAML: {err}")]) from err
        if not isinstance(data, dict):
            raise ConfigValidationError([("--config", "top level must be a mapping")])
    data = merge(data, environment_overrides(environ))
    if overrides:
        data = merge(data, overrides)
    return validate_config(data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)
