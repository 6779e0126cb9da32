"""
Run configuration schema.

A RunConfig is parsed from a JSON document, rejects unknown keys in every section,
and re-validates the domain types (grids, physics, target, solver settings) so a
document that parses can always be run.
"""

import json
from typing import Dict, List, Literal, Optional, Union

from django.conf import settings
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError
from .mushy_service import target_from_intervals
from .models import (EnthalpyParams, InitialProfile, LinearSolver, MushyBand, OuterLoopSettings, PicardSettings,
                     SolverOptions, SpatialGrid, TimeGrid)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True, use_enum_values=True)


class ProblemSection(StrictModel):
    dimension: Literal[1, 2] = 1
    extents: List[float] = Field(default_factory=lambda: [1.0])
    cells: List[int] = Field(default_factory=lambda: [128])
    T: float = Field(0.2, gt=0)
    steps: int = Field(256, ge=2)

    @model_validator(mode='after')
    def check_axes(self):
        if len(self.extents) != self.dimension or len(self.cells) != self.dimension:
            raise ValueError(f"extents and cells need {self.dimension} entries")
        return self


class PhysicsSection(StrictModel):
    k1: float = Field(2.0, gt=0)
    k2: float = Field(1.0, gt=0)
    rho: float = Field(1.0, gt=0)
    lam: float = Field(1e-4, gt=0, alias='lambda')
    alpha: float = Field(0.25, gt=0, lt=1)
    mu: float = Field(0.05, gt=0)


class InitialSection(StrictModel):
    """A named profile with its parameters, or a path to a CSV field snapshot."""
    profile: Optional[InitialProfile] = InitialProfile.TWO_PHASE_STEP
    path: Optional[str] = None
    value: float = 0.0
    left: float = 0.0
    right: float = 1.0
    solid: float = -0.3
    liquid: float = 1.5
    position: float = 0.75
    width: float = Field(0.1, ge=0)
    axis: int = Field(0, ge=0, le=1)
    base: float = 0.0
    amp: float = 1.0
    center: List[float] = Field(default_factory=lambda: [0.5])
    radius: float = Field(0.25, gt=0)

    @model_validator(mode='after')
    def one_source(self):
        if self.path is not None:
            self.profile = None
        if self.profile is None and self.path is None:
            raise ValueError("initial needs a profile or a path")
        return self


class TargetSection(StrictModel):
    """Union of boxes ([lo, hi] per axis) or a path to a CSV mask."""
    boxes: List[Union[List[float], List[List[float]]]] = Field(default_factory=lambda: [[0.4, 0.6]])
    path: Optional[str] = None


class ControlSection(StrictModel):
    """Fixed flux for simulate runs: zero, constant per face label, or a CSV file."""
    kind: Literal['zero', 'constant', 'file'] = 'zero'
    fluxes: Dict[str, float] = Field(default_factory=dict)
    path: Optional[str] = None

    @field_validator('fluxes')
    @classmethod
    def known_labels(cls, value):
        unknown = set(value) - {'left', 'right', 'bottom', 'top'}
        if unknown:
            raise ValueError(f"unknown face labels {sorted(unknown)}")
        return value

    @model_validator(mode='after')
    def file_needs_path(self):
        if self.kind == 'file' and not self.path:
            raise ValueError("control kind 'file' needs a path")
        return self


class SolverSection(StrictModel):
    linear_solver: LinearSolver = LinearSolver.CG
    cg_rtol: float = Field(1e-10, gt=0)
    cg_maxiter: int = Field(5000, ge=1)
    quadrature_order: int = Field(8, ge=1, le=32)
    time_samples: int = Field(4, ge=1)
    picard_max_iters: int = Field(100, ge=1)
    picard_tol: float = Field(1e-8, gt=0)
    picard_damping: float = Field(1.0, gt=0, le=1)


class OptimizerSection(StrictModel):
    eps0: float = Field(1.0, gt=0)
    eps_factor: float = Field(0.25, gt=0, lt=1)
    eps_floor: float = Field(1e-6, gt=0)
    max_outer: int = Field(30, ge=1)
    tol_outer: float = Field(1e-3, gt=0)
    inner_max_iters: int = Field(200, ge=1)
    tol_grad: float = Field(1e-8, gt=0)
    relaxation: float = Field(1.0, gt=0, le=1)
    violation_tol: float = Field(1e-6, ge=0)
    band_margin: float = Field(0.2, ge=0, lt=1)
    max_active_set_iters: int = Field(30, ge=1)
    band: MushyBand = MushyBand.NARROW


class DiagnosticsSection(StrictModel):
    interior_margin: Optional[float] = Field(None, ge=0)
    holder_samples: int = Field(2000, ge=1)
    mask_band: MushyBand = MushyBand.NARROW
    snapshot_every: int = Field(1, ge=1)
    write_binary: bool = True
    verify_cells: List[int] = Field(default_factory=lambda: [64, 128, 256])
    verify_steps: List[int] = Field(default_factory=lambda: [64, 128, 256])
    probe_count: int = Field(20, ge=1)
    fd_directions: int = Field(5, ge=1)
    verify_control: bool = True


class RunConfig(StrictModel):
    problem: ProblemSection = Field(default_factory=ProblemSection)
    physics: PhysicsSection = Field(default_factory=PhysicsSection)
    initial: InitialSection = Field(default_factory=InitialSection)
    target: Optional[TargetSection] = Field(default_factory=TargetSection)
    control: ControlSection = Field(default_factory=ControlSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)
    output_dir: Optional[str] = None
    seed: Optional[int] = None

    @model_validator(mode='after')
    def check_domain_types(self):
        # raise through the domain constructors so parse-time and run-time rules agree
        self.grid()
        self.time_grid()
        self.params()
        self.solver_options()
        self.picard_settings()
        self.outer_settings()
        if self.target is not None and self.target.path is None:
            target_from_intervals(self.grid(), self.target.boxes)
        return self

    def grid(self):
        return SpatialGrid(tuple(self.problem.extents), tuple(self.problem.cells))

    def time_grid(self):
        return TimeGrid(self.problem.T, self.problem.steps)

    def params(self):
        p = self.physics
        return EnthalpyParams(p.k1, p.k2, p.rho, p.lam, p.alpha, p.mu)

    def solver_options(self):
        s = self.solver
        return SolverOptions(s.linear_solver, s.cg_rtol, s.cg_maxiter, s.quadrature_order, s.time_samples)

    def picard_settings(self):
        s = self.solver
        return PicardSettings(s.picard_max_iters, s.picard_tol, s.picard_damping)

    def outer_settings(self):
        o = self.optimizer
        return OuterLoopSettings(
            max_outer=o.max_outer, tol_outer=o.tol_outer, eps0=o.eps0, eps_factor=o.eps_factor,
            eps_floor=o.eps_floor, inner_max_iters=o.inner_max_iters, tol_grad=o.tol_grad,
            relaxation=o.relaxation, violation_tol=o.violation_tol, band_margin=o.band_margin,
            max_active_set_iters=o.max_active_set_iters,
        )

    def interior_margin(self):
        margin = self.diagnostics.interior_margin
        return max(margin if margin is not None else 0.0, self.physics.lam, max(self.grid().spacing))

    def effective_seed(self):
        return self.seed if self.seed is not None else settings.STEFAN_SEED


def _describe(error):
    parts = []
    for item in error.errors():
        location = '.'.join(str(p) for p in item['loc']) or 'config'
        parts.append(f"{location}: {item['msg']}")
    return '; '.join(parts)


def parse_config(text):
    """Validated RunConfig from a JSON document; ConfigurationError names the offending key."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON: {e}", key='config') from e
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object", key='config')
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        cause = first.get('ctx', {}).get('error')
        key = getattr(cause, 'key', None) or (str(first['loc'][-1]) if first['loc'] else 'config')
        raise ConfigurationError(_describe(e), key=key) from e


def emit_config(config):
    """JSON text of the effective configuration (every default filled, 'lambda' spelled out)."""
    return config.model_dump_json(by_alias=True, indent=2)


def load_config(path):
    with open(path, encoding='utf-8') as handle:
        return parse_config(handle.read())
