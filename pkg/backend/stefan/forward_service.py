"""
Forward Service

The frozen-coefficient map y = Phi(z) (backward Euler, finite volumes, Neumann
flux data), the Picard fixed point for the quasilinear system, and the energy
and classical-region diagnostics.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from django.conf import settings as django_settings
from scipy import sparse
from scipy.sparse.linalg import cg, splu

from .enthalpy_service import coefficient_field, mollifier_spec
from .exceptions import CoefficientBandError, LinearSolveError, PicardNonConvergence
from .grid_service import (boundary_matrix, discrete_laplacian, face_average, incidence_matrix,
                           l2_norm_space, l2_norm_spacetime, stiffness_matrix, v_norm)
from .models import LinearSolver, PicardSettings, SolverOptions, SpaceTimeField, SpatialGrid, TimeGrid

logger = logging.getLogger(__name__)


class FrozenOperator:
    """
    Backward-Euler step matrices M_n = vol*I + dt*A_n for a frozen coefficient source.

    A_n is the flux-form diffusion operator whose face coefficient is the mean of
    H_lambda(z) at the two adjacent cell centers at t^n. The same matrices serve
    the forward solve and, transposed (they are symmetric), the adjoint solve.
    """

    def __init__(self, grid, times, face_coefficients, options=None, truncated_windows=0):
        self.grid = grid
        self.times = times
        self.options = options or SolverOptions()
        self.face_coefficients = np.asarray(face_coefficients, dtype=float)
        self.truncated_windows = truncated_windows
        self._incidence, self._transmissibility = incidence_matrix(grid)
        self._boundary = boundary_matrix(grid)
        self._matrices = [None] * times.steps
        self._factors = [None] * times.steps
        self.linear_iterations = 0

    @classmethod
    def from_source(cls, z, params, options=None):
        options = options or SolverOptions()
        spec = mollifier_spec(z.grid.dimension, options.quadrature_order, options.time_samples)
        cell_coefficients, truncated = coefficient_field(z, params, spec)
        check_coefficient_band(cell_coefficients, params)
        return cls(z.grid, z.times, face_average(cell_coefficients, z.grid), options, truncated)

    @classmethod
    def constant(cls, grid, times, kappa, options=None):
        nfaces = grid.interior_faces[0].size
        return cls(grid, times, np.full((times.steps, nfaces), float(kappa)), options)

    @property
    def vol(self):
        return self.grid.cell_volume

    def stiffness(self, n):
        return stiffness_matrix(self.grid, self.face_coefficients[n])

    def matrix(self, n):
        if self._matrices[n] is None:
            identity = sparse.identity(self.grid.ncells, format='csc')
            self._matrices[n] = (self.vol * identity + self.times.dt * self.stiffness(n)).tocsc()
        return self._matrices[n]

    def solve(self, n, rhs, x0=None):
        matrix = self.matrix(n)
        if self.options.linear_solver == LinearSolver.DIRECT:
            if self._factors[n] is None:
                try:
                    self._factors[n] = splu(matrix)
                except RuntimeError as e:
                    logger.error(f"Factorization of step {n} failed: {e}")
                    raise LinearSolveError(f"step {n}: {e}", step=n) from e
            return self._factors[n].solve(rhs)
        jacobi = sparse.diags(1.0 / matrix.diagonal())
        iterations = []
        x, info = cg(matrix, rhs, x0=x0, rtol=self.options.cg_rtol, atol=0.0,
                     maxiter=self.options.cg_maxiter, M=jacobi, callback=iterations.append)
        self.linear_iterations += len(iterations)
        if info != 0:
            residual = float(np.linalg.norm(rhs - matrix @ x) / max(np.linalg.norm(rhs), 1e-300))
            logger.error(f"CG failed at step {n}: info={info}, relative residual={residual:.3e}")
            raise LinearSolveError(f"conjugate gradient failed at step {n} (info={info})",
                                   step=n, info=info, residual=residual)
        return x

    def forward(self, y0, control_values):
        """Trajectory (steps+1, ncells) from y0 under the flux rows control_values[n]."""
        steps = self.times.steps
        values = np.empty((steps + 1, self.grid.ncells))
        values[0] = y0
        dt = self.times.dt
        for n in range(steps):
            rhs = self.vol * values[n] + dt * (self._boundary @ control_values[n])
            values[n + 1] = self.solve(n, rhs, x0=values[n])
        return values

    def backward(self, terminal):
        """
        Adjoint trajectory from p(T) = terminal, homogeneous Neumann.

        Each backward step solves with the transpose of the matching forward step.
        """
        steps = self.times.steps
        values = np.empty((steps + 1, self.grid.ncells))
        values[steps] = terminal
        corrupt = not self.backward_is_transposed
        if corrupt:
            logger.warning("STEFAN_DEBUG_CORRUPT_ADJOINT is set: backward steps are explicit, not transposed")
        for n in range(steps - 1, -1, -1):
            if corrupt:
                values[n] = values[n + 1] - self.times.dt / self.vol * (self.stiffness(n) @ values[n + 1])
            else:
                values[n] = self.solve(n, self.vol * values[n + 1], x0=values[n + 1])
        return values

    @property
    def backward_is_transposed(self):
        return not getattr(django_settings, "STEFAN_DEBUG_CORRUPT_ADJOINT", False)

    def trace(self, adjoint_values):
        """Boundary-cell values of p^n paired with the flux row n (n = 0 .. N-1)."""
        face_cells, _, _ = self.grid.boundary_faces
        return np.asarray(adjoint_values)[:-1, face_cells]


def check_coefficient_band(coefficients, params):
    low, high = float(np.min(coefficients)), float(np.max(coefficients))
    tol = 1e-10 * params.k_star
    if low < params.width - tol or high > params.k_star + tol:
        logger.error(f"Coefficient band violated: [{low}, {high}] not in [{params.width}, {params.k_star}]")
        raise CoefficientBandError(
            f"coefficient range [{low}, {high}] leaves [{params.width}, {params.k_star}]", low=low, high=high)
    return low, high


def solve_frozen(prob, operator=None):
    """
    y = Phi(z): the linear Neumann problem with coefficient H_lambda(z).

    Pass a prebuilt FrozenOperator to reuse its step matrices across solves.
    """
    operator = operator or FrozenOperator.from_source(prob.z, prob.params, prob.options)
    values = operator.forward(prob.y0, prob.u.values)
    return SpaceTimeField(prob.z.grid, prob.z.times, values)


@dataclass
class PicardResult:
    y: SpaceTimeField
    iterations: int
    residual: float
    damping: float
    history: list = field(default_factory=list)
    operator: Optional[FrozenOperator] = None

    def history_rows(self):
        return [(it, res) for it, res, _ in self.history]


def relative_change(a, b, grid, times):
    num = l2_norm_spacetime(a - b, grid, times)
    if num == 0.0:
        return 0.0
    den = max(l2_norm_spacetime(a, grid, times), l2_norm_spacetime(b, grid, times), 1e-300)
    return num / den


def solve_nonlinear(u, y0, params, settings=None, options=None, initial=None):
    """
    Picard iteration z <- (1 - damping) z + damping Phi(z) for the quasilinear system.

    The initial iterate is y0 extended constantly in time unless `initial` is given.
    Damping is halved when the residual increases twice in a row.
    """
    settings = settings or PicardSettings()
    options = options or SolverOptions()
    grid, times = u.grid, u.times
    y0 = np.asarray(y0, dtype=float).ravel()
    z = initial.values.copy() if initial is not None else np.tile(y0, (times.steps + 1, 1))
    damping = settings.damping
    history = []
    residual = np.inf
    for iteration in range(1, settings.max_iters + 1):
        source = SpaceTimeField(grid, times, z)
        operator = FrozenOperator.from_source(source, params, options)
        y_new = operator.forward(y0, u.values)
        residual = relative_change(y_new, z, grid, times)
        history.append((iteration, residual, damping))
        logger.debug(f"Picard iteration {iteration}: residual={residual:.3e} damping={damping}")
        if residual <= settings.tol_l2:
            logger.info(f"Picard converged in {iteration} iterations (residual {residual:.3e})")
            return PicardResult(SpaceTimeField(grid, times, y_new), iteration, residual, damping, history, operator)
        if len(history) >= 3 and history[-1][1] > history[-2][1] > history[-3][1]:
            damping *= 0.5
            logger.warning(f"Picard residual increased twice; damping halved to {damping}")
        z = (1.0 - damping) * z + damping * y_new
    logger.error(f"Picard did not converge after {settings.max_iters} iterations (residual {residual:.3e})")
    raise PicardNonConvergence(
        f"Picard iteration did not converge in {settings.max_iters} iterations", residual, history)


@dataclass
class EnergyReport:
    constant: Optional[float]
    derivative_ratio: Optional[float]
    degenerate: bool
    numerator: np.ndarray
    denominator: float

    def as_dict(self):
        return {
            'constant': self.constant,
            'derivative_ratio': self.derivative_ratio,
            'degenerate': self.degenerate,
            'denominator': self.denominator,
        }


def dual_norms(increments, grid):
    """Discrete V' norms of the rows of `increments`, via the unit-coefficient H1 Gram matrix."""
    left, _, _ = grid.interior_faces
    gram = (grid.cell_volume * sparse.identity(grid.ncells, format='csc')
            + stiffness_matrix(grid, np.ones(left.size))).tocsc()
    factor = splu(gram)
    out = []
    for row in np.atleast_2d(increments):
        functional = grid.cell_volume * row
        out.append(float(np.sqrt(max(functional @ factor.solve(functional), 0.0))))
    return np.array(out)


def energy_report(y, u, params):
    """
    Empirical constant of the energy estimate

        max_t [|y(t)|^2 + lambda^alpha int_0^t ||y||_V^2] / [|y0|^2 + lambda^-alpha ||u||^2_{L2(Sigma)}]

    and the matching ratio for int ||dy/dt||_{V'}^2 against lambda^-alpha times the same bound.
    """
    grid, times = y.grid, y.times
    width = params.width
    l2_sq = np.array([l2_norm_space(y.at(n), grid) ** 2 for n in range(times.steps + 1)])
    v_sq = np.array([v_norm(y.at(n), grid) ** 2 for n in range(times.steps + 1)])
    integral = np.concatenate([[0.0], np.cumsum(times.dt * v_sq[1:])])
    numerator = l2_sq + width * integral
    denominator = l2_sq[0] + u.norm() ** 2 / width
    if denominator <= 1e-300:
        return EnergyReport(None, None, True, numerator, denominator)
    derivative = dual_norms(np.diff(y.values, axis=0) / times.dt, grid)
    derivative_integral = float(np.sum(times.dt * derivative ** 2))
    return EnergyReport(
        constant=float(np.max(numerator) / denominator),
        derivative_ratio=derivative_integral / (denominator / width),
        degenerate=False,
        numerator=numerator,
        denominator=float(denominator),
    )


@dataclass
class ClassicalResidual:
    res_solid: Optional[float]
    res_liquid: Optional[float]
    count_solid: int
    count_liquid: int
    threshold: float
    alpha_admissible: bool

    def as_dict(self):
        return {
            'res_solid': self.res_solid,
            'res_liquid': self.res_liquid,
            'count_solid': self.count_solid,
            'count_liquid': self.count_liquid,
            'threshold': self.threshold,
            'alpha_admissible': self.alpha_admissible,
        }


def _adjacency(grid):
    incidence, _ = incidence_matrix(grid)
    magnitude = abs(incidence)
    adjacency = (magnitude.T @ magnitude).tolil()
    adjacency.setdiag(0)
    return adjacency.tocsr()


def _rms(samples):
    if not samples:
        return None
    stacked = np.concatenate(samples)
    return float(np.sqrt(np.mean(stacked ** 2))) if stacked.size else None


def classical_region_residual(y, params, interior_margin, threshold=None):
    """
    RMS of y_t - k Delta y over the pure solid {y <= -thr} and pure liquid {y >= rho + thr}
    cells at distance >= interior_margin from Gamma.

    thr defaults to max(2 lambda^(1/4), lambda^alpha): beyond it h_lambda equals k1 or k2.
    A cell counts when it and its stencil neighbours are in the region at both levels.
    Empty regions are reported as None.
    """
    grid, times = y.grid, y.times
    if not params.classical_reduction_admissible:
        logger.warning(f"alpha={params.alpha} is outside (0, 1/26): the classical reduction is not asserted")
    thr = threshold if threshold is not None else max(2.0 * params.lam ** 0.25, params.width)
    margin = max(interior_margin, max(grid.spacing))
    interior = grid.distance_to_boundary() >= margin * (1 - 1e-12)
    laplacian = discrete_laplacian(grid)
    adjacency = _adjacency(grid)
    solid, liquid = [], []
    count_solid = count_liquid = 0
    for n in range(times.steps):
        before, after = y.at(n), y.at(n + 1)
        for k, region, sink in (
            (params.k1, (before <= -thr) & (after <= -thr), solid),
            (params.k2, (before >= params.rho + thr) & (after >= params.rho + thr), liquid),
        ):
            outside = adjacency @ (~region).astype(float)
            cells = region & (outside == 0) & interior
            if not cells.any():
                continue
            residual = (after - before) / times.dt - k * (laplacian @ after)
            sink.append(residual[cells])
        count_solid = sum(s.size for s in solid)
        count_liquid = sum(s.size for s in liquid)
    return ClassicalResidual(_rms(solid), _rms(liquid), count_solid, count_liquid, thr,
                             params.classical_reduction_admissible)


def cosine_mode(grid, times, kappa, discrete_space=False, discrete_time=False):
    """
    Exact decay of the first Neumann cosine mode along x under coefficient kappa.

    discrete_space uses the finite-volume eigenvalue (4/h^2) sin^2(pi h / 2L);
    discrete_time uses the backward-Euler amplification instead of exp.
    """
    length, h = grid.extents[0], grid.spacing[0]
    shape = np.cos(np.pi * grid.centers[:, 0] / length)
    eigen = (4.0 / h ** 2) * np.sin(np.pi * h / (2.0 * length)) ** 2 if discrete_space else (np.pi / length) ** 2
    n = np.arange(times.steps + 1)
    if discrete_time:
        amplitude = (1.0 + kappa * eigen * times.dt) ** (-n)
    else:
        amplitude = np.exp(-kappa * eigen * times.times)
    return SpaceTimeField(grid, times, amplitude[:, None] * shape[None, :])


def heat_truncation_residual(grid, times, kappa):
    """RMS of the discrete heat residual applied to the exact cosine-mode solution (interior cells)."""
    exact = cosine_mode(grid, times, kappa)
    laplacian = discrete_laplacian(grid)
    interior = grid.distance_to_boundary() >= max(grid.spacing) * (1 - 1e-12)
    samples = []
    for n in range(times.steps):
        residual = (exact.at(n + 1) - exact.at(n)) / times.dt - kappa * (laplacian @ exact.at(n + 1))
        samples.append(residual[interior])
    return _rms(samples)


def mass_balance(y, u):
    """Per-level defect of sum vol*y(t^n) - sum vol*y0 - sum_{m<=n} dt sum_faces area*u."""
    grid, times = y.grid, y.times
    mass = grid.cell_volume * y.values.sum(axis=1)
    _, face_areas, _ = grid.boundary_faces
    inflow = np.concatenate([[0.0], np.cumsum(times.dt * (u.values @ face_areas))])
    return mass, inflow, mass - mass[0] - inflow


def manufactured_error(cells, steps, horizon, kappa, reference='exact', options=None, length=1.0):
    """
    Relative L2(Omega) error at T of the frozen constant-coefficient solve from cos(pi x / L).

    reference 'exact' is the continuous decay, 'space' isolates the spatial error (time-discrete
    reference) and 'time' the temporal error (space-discrete reference).
    """
    grid = SpatialGrid((length,), (cells,))
    times = TimeGrid(horizon, steps)
    operator = FrozenOperator.constant(grid, times, kappa, options)
    computed = operator.forward(cosine_mode(grid, times, kappa).initial, np.zeros((steps, grid.nfaces)))[-1]
    exact = cosine_mode(grid, times, kappa, discrete_space=reference == 'time',
                        discrete_time=reference == 'space').final
    return l2_norm_space(computed - exact, grid) / l2_norm_space(exact, grid)


def observed_orders(resolutions, errors):
    """log(e_{i-1} / e_i) / log(r_i / r_{i-1}) for consecutive refinements."""
    r = np.asarray(resolutions, dtype=float)
    e = np.asarray(errors, dtype=float)
    return list(np.log(e[:-1] / e[1:]) / np.log(r[1:] / r[:-1]))
