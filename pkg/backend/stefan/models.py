from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from django.db import models

from .exceptions import ConfigurationError, DomainError

# --- ENUMS ---

class InitialProfile(models.TextChoices):
    CONSTANT = 'constant', 'Constant'
    LINEAR_RAMP = 'linear_ramp', 'Linear ramp'
    TWO_PHASE_STEP = 'two_phase_step', 'Two-phase step'
    COSINE_BUMP = 'cosine_bump', 'Cosine bump'


class SweepAxis(models.TextChoices):
    LAMBDA = 'lambda', 'Regularization scale'
    EPSILON_FLOOR = 'epsilon_floor', 'Penalty floor'
    CELLS = 'cells', 'Cells per axis'
    STEPS = 'steps', 'Time steps'
    MU = 'mu', 'Mushy tolerance'


class LinearSolver(models.TextChoices):
    CG = 'cg', 'Jacobi-preconditioned conjugate gradient'
    DIRECT = 'direct', 'Cached sparse LU'


class MushyBand(models.TextChoices):
    NARROW = 'narrow', '(-mu, rho+mu)'
    WIDE = 'wide', '(-2mu, rho+2mu)'
    CLASSICAL = 'classical', '(-2 lambda^1/4, rho+2 lambda^1/4)'


# --- PHYSICS ---

@dataclass(frozen=True)
class EnthalpyParams:
    """Conductivities, latent heat and regularization constants of the mushy model."""
    k1: float
    k2: float
    rho: float
    lam: float
    alpha: float
    mu: float

    def __post_init__(self):
        for key in ('k1', 'k2', 'rho', 'lam', 'mu'):
            value = getattr(self, key)
            if not np.isfinite(value) or value <= 0:
                raise ConfigurationError(f"{key} must be positive, got {value}", key=key)
        if not 0 < self.alpha < 1:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}", key='alpha')
        if self.k_star - self.width <= 0:
            raise ConfigurationError(
                f"lambda too large: k* - lambda^alpha = {self.k_star - self.width} <= 0", key='lambda')
        if min(self.k1, self.k2) < self.width:
            raise ConfigurationError(
                f"min(k1, k2) = {min(self.k1, self.k2)} is below lambda^alpha = {self.width}", key='lambda')

    @property
    def k_star(self):
        return max(self.k1, self.k2)

    @property
    def width(self):
        """lambda^alpha: the transition width of h_lambda and its flat mushy value."""
        return self.lam ** self.alpha

    @property
    def classical_reduction_admissible(self):
        return self.alpha < 1.0 / 26.0

    def band(self, kind=MushyBand.NARROW):
        kind = MushyBand(kind)
        if kind == MushyBand.NARROW:
            return (-self.mu, self.rho + self.mu)
        if kind == MushyBand.WIDE:
            return (-2.0 * self.mu, self.rho + 2.0 * self.mu)
        margin = 2.0 * self.lam ** 0.25
        return (-margin, self.rho + margin)


@dataclass(frozen=True)
class MollifierSpec:
    dimension: int
    normalization: float
    quadrature_order: int = 8
    time_samples: int = 4

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ConfigurationError(f"mollifier dimension must be 1 or 2, got {self.dimension}", key='dimension')
        if not self.normalization > 0:
            raise ConfigurationError("mollifier normalization must be positive", key='normalization')
        if self.quadrature_order < 1 or self.time_samples < 1:
            raise ConfigurationError("quadrature order and time samples must be >= 1", key='quadrature_order')


# --- GRIDS AND FIELDS ---

@dataclass(frozen=True)
class SpatialGrid:
    """Uniform cell-centered grid on the box [0, L1] (x [0, L2])."""
    extents: tuple
    cells: tuple

    def __post_init__(self):
        object.__setattr__(self, 'extents', tuple(float(e) for e in self.extents))
        object.__setattr__(self, 'cells', tuple(int(c) for c in self.cells))
        if len(self.extents) not in (1, 2) or len(self.extents) != len(self.cells):
            raise ConfigurationError("grid must be 1D or 2D with one cell count per axis", key='cells')
        if any(c < 4 for c in self.cells):
            raise ConfigurationError(f"at least 4 cells per axis required, got {self.cells}", key='cells')
        if any(not e > 0 for e in self.extents):
            raise ConfigurationError(f"extents must be positive, got {self.extents}", key='extents')

    @property
    def dimension(self):
        return len(self.cells)

    @property
    def shape(self):
        return self.cells

    @property
    def spacing(self):
        return tuple(e / c for e, c in zip(self.extents, self.cells))

    @property
    def ncells(self):
        return int(np.prod(self.cells))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def volume(self):
        return float(np.prod(self.extents))

    @cached_property
    def axis_centers(self):
        return tuple((np.arange(c) + 0.5) * h for c, h in zip(self.cells, self.spacing))

    @cached_property
    def centers(self):
        """Cell-center coordinates, shape (ncells, dimension), C order."""
        mesh = np.meshgrid(*self.axis_centers, indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def boundary_faces(self):
        """
        Boundary faces enumerating Gamma.

        Returns (face_cells, face_areas, face_labels); 1D order is [x=0, x=L],
        2D order is left (x=0), right, bottom (y=0), top.
        """
        index = np.arange(self.ncells).reshape(self.cells)
        if self.dimension == 1:
            return (np.array([0, self.ncells - 1]), np.ones(2), ('left', 'right'))
        h1, h2 = self.spacing
        n1, n2 = self.cells
        face_cells = np.concatenate([index[0, :], index[-1, :], index[:, 0], index[:, -1]])
        face_areas = np.concatenate([np.full(n2, h2), np.full(n2, h2), np.full(n1, h1), np.full(n1, h1)])
        labels = ('left',) * n2 + ('right',) * n2 + ('bottom',) * n1 + ('top',) * n1
        return face_cells, face_areas, labels

    @property
    def nfaces(self):
        return len(self.boundary_faces[0])

    @cached_property
    def interior_faces(self):
        """Pairs of neighbouring cells with the face area / center distance transmissibility."""
        index = np.arange(self.ncells).reshape(self.cells)
        left, right, weight = [], [], []
        for axis in range(self.dimension):
            lo = np.take(index, np.arange(self.cells[axis] - 1), axis=axis).ravel()
            hi = np.take(index, np.arange(1, self.cells[axis]), axis=axis).ravel()
            area = self.cell_volume / self.spacing[axis]
            left.append(lo)
            right.append(hi)
            weight.append(np.full(lo.size, area / self.spacing[axis]))
        return np.concatenate(left), np.concatenate(right), np.concatenate(weight)

    def distance_to_boundary(self):
        """Distance of each cell center to Gamma."""
        distances = [np.minimum(self.centers[:, a], self.extents[a] - self.centers[:, a])
                     for a in range(self.dimension)]
        return np.min(np.stack(distances, axis=-1), axis=-1)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigurationError(f"time horizon must be positive, got {self.horizon}", key='T')
        if int(self.steps) < 2:
            raise ConfigurationError(f"at least 2 time steps required, got {self.steps}", key='steps')
        object.__setattr__(self, 'steps', int(self.steps))

    @property
    def dt(self):
        return self.horizon / self.steps

    @cached_property
    def times(self):
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def level(self, t):
        """Index of the time level t, which must lie on the grid."""
        n = int(round(t / self.dt))
        if n < 0 or n > self.steps or abs(n * self.dt - t) > 1e-9 * self.horizon:
            raise DomainError(f"t={t} is not a level of the time grid")
        return n


def _frozen_array(values, shape, name):
    array = np.array(values, dtype=float)
    if array.shape != shape:
        raise ConfigurationError(f"{name} has shape {array.shape}, expected {shape}", key=name)
    if not np.all(np.isfinite(array)):
        raise ConfigurationError(f"{name} contains non-finite values", key=name)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """A scalar sampled on every (time level, cell) of the space-time grid."""
    grid: SpatialGrid
    times: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        shape = (self.times.steps + 1, self.grid.ncells)
        object.__setattr__(self, 'values', _frozen_array(self.values, shape, 'values'))

    @classmethod
    def constant_in_time(cls, grid, times, snapshot):
        snapshot = np.asarray(snapshot, dtype=float).ravel()
        return cls(grid, times, np.tile(snapshot, (times.steps + 1, 1)))

    def at(self, level):
        return self.values[level]

    @property
    def initial(self):
        return self.values[0]

    @property
    def final(self):
        return self.values[-1]


@dataclass(frozen=True, eq=False)
class BoundaryControl:
    """
    Neumann flux on Sigma: one value per (time step, boundary face).

    Row n is the flux at t^{n+1}, applied during the step t^n -> t^{n+1}.
    """
    grid: SpatialGrid
    times: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        shape = (self.times.steps, self.grid.nfaces)
        object.__setattr__(self, 'values', _frozen_array(self.values, shape, 'control'))

    @classmethod
    def zeros(cls, grid, times):
        return cls(grid, times, np.zeros((times.steps, grid.nfaces)))

    @property
    def weights(self):
        """Quadrature weights dt * face area of the discrete L2(Sigma) inner product."""
        return self.times.dt * np.broadcast_to(self.grid.boundary_faces[1], self.values.shape)

    def inner(self, other):
        return float(np.sum(self.weights * self.values * np.asarray(getattr(other, 'values', other))))

    def norm(self):
        return float(np.sqrt(max(self.inner(self), 0.0)))


# --- SETS ---

@dataclass(frozen=True, eq=False)
class TargetSet:
    grid: SpatialGrid
    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool).ravel()
        if mask.size != self.grid.ncells:
            raise ConfigurationError("target mask does not match the grid", key='target')
        if not mask.any():
            raise ConfigurationError("target set must have positive measure", key='target')
        mask.setflags(write=False)
        object.__setattr__(self, 'mask', mask)

    @property
    def measure(self):
        return float(self.mask.sum() * self.grid.cell_volume)


@dataclass(frozen=True, eq=False)
class MushyMask:
    grid: SpatialGrid
    level: int
    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool).ravel()
        if mask.size != self.grid.ncells:
            raise ConfigurationError("mushy mask does not match the grid", key='mask')
        mask.setflags(write=False)
        object.__setattr__(self, 'mask', mask)

    @property
    def measure(self):
        return float(self.mask.sum() * self.grid.cell_volume)

    def __eq__(self, other):
        return isinstance(other, MushyMask) and self.grid == other.grid and np.array_equal(self.mask, other.mask)

    __hash__ = None


# --- SOLVER SETTINGS AND PROBLEMS ---

@dataclass(frozen=True)
class SolverOptions:
    linear_solver: str = LinearSolver.CG
    cg_rtol: float = 1e-10
    cg_maxiter: int = 5000
    quadrature_order: int = 8
    time_samples: int = 4

    def __post_init__(self):
        object.__setattr__(self, 'linear_solver', LinearSolver(self.linear_solver))
        if not self.cg_rtol > 0:
            raise ConfigurationError("cg_rtol must be positive", key='cg_rtol')


@dataclass(frozen=True)
class PicardSettings:
    max_iters: int = 100
    tol_l2: float = 1e-8
    damping: float = 1.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1", key='max_iters')
        if not self.tol_l2 > 0:
            raise ConfigurationError("tol_l2 must be positive", key='tol_l2')
        if not 0 < self.damping <= 1:
            raise ConfigurationError("damping must lie in (0, 1]", key='damping')


@dataclass(frozen=True, eq=False)
class FrozenProblem:
    z: SpaceTimeField
    u: BoundaryControl
    y0: np.ndarray
    params: EnthalpyParams
    options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.z.grid != self.u.grid or self.z.times != self.u.times:
            raise ConfigurationError("coefficient source and control live on different grids", key='grid')
        object.__setattr__(self, 'y0', _frozen_array(np.ravel(self.y0), (self.z.grid.ncells,), 'y0'))


@dataclass(frozen=True, eq=False)
class TerminalPenaltyData:
    epsilon: float
    target: TargetSet
    mu: float
    rho: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive", key='epsilon')


@dataclass(frozen=True, eq=False)
class PenalizedProblem:
    z: SpaceTimeField
    y0: np.ndarray
    target: TargetSet
    epsilon: float
    params: EnthalpyParams
    options: SolverOptions = field(default_factory=SolverOptions)
    mu: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive", key='epsilon')
        if self.target.grid != self.z.grid:
            raise ConfigurationError("target and coefficient source live on different grids", key='target')
        object.__setattr__(self, 'y0', _frozen_array(np.ravel(self.y0), (self.z.grid.ncells,), 'y0'))
        if self.mu is None:
            object.__setattr__(self, 'mu', self.params.mu)

    @property
    def penalty_data(self):
        return TerminalPenaltyData(self.epsilon, self.target, self.mu, self.params.rho)


@dataclass(frozen=True)
class OuterLoopSettings:
    max_outer: int = 30
    tol_outer: float = 1e-3
    eps0: float = 1.0
    eps_factor: float = 0.25
    eps_floor: float = 1e-6
    inner_max_iters: int = 200
    tol_grad: float = 1e-8
    relaxation: float = 1.0
    violation_tol: float = 1e-6
    band_margin: float = 0.2
    max_active_set_iters: int = 30

    def __post_init__(self):
        if not 0 < self.eps_factor < 1:
            raise ConfigurationError("eps_factor must lie in (0, 1)", key='eps_factor')
        if not self.eps_floor > 0 or not self.eps0 > 0:
            raise ConfigurationError("eps0 and eps_floor must be positive", key='eps_floor')
        if not self.tol_outer > 0 or not self.tol_grad > 0:
            raise ConfigurationError("tolerances must be positive", key='tol_outer')
        if not 0 < self.relaxation <= 1:
            raise ConfigurationError("relaxation must lie in (0, 1]", key='relaxation')
        if not 0 <= self.band_margin < 1:
            raise ConfigurationError("band_margin must lie in [0, 1)", key='band_margin')
        if self.max_outer < 1 or self.inner_max_iters < 1:
            raise ConfigurationError("iteration limits must be >= 1", key='max_outer')
        if self.violation_tol < 0:
            raise ConfigurationError("violation_tol must be non-negative", key='violation_tol')

    @property
    def eps_schedule(self):
        """Geometric penalty schedule eps0, eps0*factor, ... ending exactly at the floor."""
        schedule = []
        eps = self.eps0
        while eps > self.eps_floor * (1 + 1e-12):
            schedule.append(eps)
            eps *= self.eps_factor
        schedule.append(self.eps_floor)
        return schedule
