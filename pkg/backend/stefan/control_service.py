"""
Control Service

Penalized boundary control for frozen coefficients, the epsilon continuation and
the outer fixed-point loop matching the coefficient source with the controlled state.

For a frozen source z the state is affine in u, so

    J(u) = 1/2 ||u||^2_{L2(Sigma)} + 1/(2 eps) sum_{target} vol [((y(T) + mu)^-)^2 + ((y(T) - rho - mu)^+)^2]

is a convex, piecewise quadratic functional with gradient u - p|_Sigma.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .adjoint_service import terminal_condition
from .forward_service import FrozenOperator, relative_change, solve_nonlinear
from .models import (BoundaryControl, MushyBand, OuterLoopSettings, PenalizedProblem, PicardSettings,
                     SolverOptions, SpaceTimeField)
from .mushy_service import coverage, mushy_set

logger = logging.getLogger(__name__)

_BACKTRACK_STEPS = 30


def _operator_for(prob, operator):
    return operator or FrozenOperator.from_source(prob.z, prob.params, prob.options)


def _zero_rows(prob):
    return np.zeros((prob.z.times.steps, prob.z.grid.nfaces))


def violation_parts(yT, data):
    """Per-cell ((yT + mu)^-, (yT - rho - mu)^+) restricted to the target."""
    yT = np.asarray(yT, dtype=float).ravel()
    below = np.where(data.target.mask, np.maximum(0.0, -(yT + data.mu)), 0.0)
    above = np.where(data.target.mask, np.maximum(0.0, yT - data.rho - data.mu), 0.0)
    return below, above


def violation_norms(yT, data, grid):
    """L2 norms over the target of the two one-sided terminal violations."""
    below, above = violation_parts(yT, data)
    vol = grid.cell_volume
    return float(np.sqrt(vol * below @ below)), float(np.sqrt(vol * above @ above))


def _penalty(yT, data, grid):
    below, above = violation_parts(yT, data)
    return grid.cell_volume * float(below @ below + above @ above) / (2.0 * data.epsilon)


def penalty_functional(u, prob, operator=None):
    operator = _operator_for(prob, operator)
    yT = operator.forward(prob.y0, u.values)[-1]
    return 0.5 * u.inner(u) + _penalty(yT, prob.penalty_data, prob.z.grid)


def gradient(u, prob, operator=None):
    """grad J(u) = u - p|_Sigma with p the adjoint from the penalized terminal datum."""
    operator = _operator_for(prob, operator)
    yT = operator.forward(prob.y0, u.values)[-1]
    p = operator.backward(terminal_condition(yT, prob.penalty_data))
    return BoundaryControl(u.grid, u.times, u.values - operator.trace(p))


@dataclass
class PenalizedResult:
    u: BoundaryControl
    y: SpaceTimeField
    J: float
    grad_norm: float
    iterations: int
    active_set_iterations: int
    stagnated: bool
    p: Optional[SpaceTimeField] = None


def _evaluate(operator, prob, rows):
    """(trajectory, J, gradient rows, adjoint values) at the control rows."""
    data = prob.penalty_data
    grid = prob.z.grid
    y = operator.forward(prob.y0, rows)
    p = operator.backward(terminal_condition(y[-1], data))
    control = BoundaryControl(grid, prob.z.times, rows)
    J = 0.5 * control.inner(control) + _penalty(y[-1], data, grid)
    return y, J, rows - operator.trace(p), p


def _active_targets(yT, data):
    """Penalized cells and the bound each one is pulled towards."""
    yT = np.asarray(yT).ravel()
    low = data.target.mask & (yT < -data.mu)
    high = data.target.mask & (yT > data.rho + data.mu)
    bound = np.where(low, -data.mu, np.where(high, data.rho + data.mu, 0.0))
    return low | high, bound


def _fixed_set_step(operator, prob, active, bound, rows, free_terminal, settings, tol):
    """
    Minimizer of the quadratic model whose penalized cells are fixed to `active`.

    Solved by conjugate gradient on W^1/2 H W^-1/2 v = W^1/2 b with W the L2(Sigma)
    weights, so the Euclidean residual equals the L2(Sigma) gradient norm.
    """
    eps = prob.epsilon
    shape = rows.shape
    weights = BoundaryControl.zeros(prob.z.grid, prob.z.times).weights.ravel()
    root = np.sqrt(weights)
    zero_initial = np.zeros(prob.z.grid.ncells)
    counter = [0]

    def hessian(v):
        u = (v / root).reshape(shape)
        yT = operator.forward(zero_initial, u)[-1]
        p = operator.backward(np.where(active, yT, 0.0) / eps)
        counter[0] += 1
        return root * (u + operator.trace(p)).ravel()

    p_rhs = operator.backward(-np.where(active, free_terminal - bound, 0.0) / eps)
    rhs = root * operator.trace(p_rhs).ravel()
    size = rows.size
    system = LinearOperator((size, size), matvec=hessian, dtype=float)
    v, info = cg(system, rhs, x0=root * rows.ravel(), rtol=0.0, atol=tol, maxiter=settings.inner_max_iters)
    if info > 0:
        logger.warning(f"Control-space CG hit {settings.inner_max_iters} iterations (eps={eps})")
    return (v / root).reshape(shape), counter[0], info


def solve_penalized(prob, settings=None, u0=None, operator=None):
    """
    Minimize J for the frozen source prob.z.

    A primal-dual active-set iteration: each step solves the quadratic with the
    current penalized cells fixed (conjugate gradient in control space), then a
    backtracking test keeps J non-increasing. Stops when
    ||grad J|| <= tol_grad * max(1, ||u||); returns the best iterate with
    stagnated=True otherwise.
    """
    settings = settings or OuterLoopSettings()
    operator = _operator_for(prob, operator)
    grid, times = prob.z.grid, prob.z.times
    data = prob.penalty_data
    rows = np.array(u0.values) if u0 is not None else _zero_rows(prob)
    free_terminal = operator.forward(prob.y0, _zero_rows(prob))[-1]
    y, J, grad, p = _evaluate(operator, prob, rows)
    weights = BoundaryControl.zeros(grid, times).weights
    cg_iterations = 0
    stagnated = True
    outer = 0
    for outer in range(1, settings.max_active_set_iters + 1):
        grad_norm = float(np.sqrt(np.sum(weights * grad * grad)))
        u_norm = float(np.sqrt(np.sum(weights * rows * rows)))
        tol = settings.tol_grad * max(1.0, u_norm)
        logger.debug(f"Active-set iteration {outer}: J={J:.6e} |grad|={grad_norm:.3e}")
        if grad_norm <= tol:
            stagnated = False
            break
        active, bound = _active_targets(y[-1], data)
        candidate, used, _ = _fixed_set_step(operator, prob, active, bound, rows, free_terminal, settings, tol)
        cg_iterations += used
        step = candidate - rows
        accepted = False
        t = 1.0
        for _ in range(_BACKTRACK_STEPS):
            trial = rows + t * step
            y_t, J_t, grad_t, p_t = _evaluate(operator, prob, trial)
            if J_t <= J + 1e-14 * max(1.0, abs(J)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            logger.warning(f"No decrease along the active-set step (eps={prob.epsilon}); keeping best iterate")
            break
        rows, y, J, grad, p = trial, y_t, J_t, grad_t, p_t
    else:
        grad_norm = float(np.sqrt(np.sum(weights * grad * grad)))
        stagnated = grad_norm > settings.tol_grad * max(1.0, float(np.sqrt(np.sum(weights * rows * rows))))
    grad_norm = float(np.sqrt(np.sum(weights * grad * grad)))
    if stagnated:
        logger.warning(f"Penalized solve stagnated at eps={prob.epsilon}: |grad|={grad_norm:.3e}")
    return PenalizedResult(
        u=BoundaryControl(grid, times, rows),
        y=SpaceTimeField(grid, times, y),
        J=float(J),
        grad_norm=grad_norm,
        iterations=cg_iterations,
        active_set_iterations=outer,
        stagnated=stagnated,
        p=SpaceTimeField(grid, times, p),
    )


def dense_penalized_solution(prob, operator=None, max_iters=50):
    """
    Reference minimizer built from the dense control-to-terminal-state matrix.

    Columns come from forward solves only; the piecewise quadratic is minimized
    by re-solving the normal equations until the penalized cells stop changing.
    Meant for instances with a few dozen control unknowns.
    """
    operator = _operator_for(prob, operator)
    grid, times = prob.z.grid, prob.z.times
    data = prob.penalty_data
    shape = (times.steps, grid.nfaces)
    size = times.steps * grid.nfaces
    zero_initial = np.zeros(grid.ncells)
    columns = np.empty((grid.ncells, size))
    for j in range(size):
        unit = np.zeros(size)
        unit[j] = 1.0
        columns[:, j] = operator.forward(zero_initial, unit.reshape(shape))[-1]
    free_terminal = operator.forward(prob.y0, np.zeros(shape))[-1]
    weights = BoundaryControl.zeros(grid, times).weights.ravel()
    vol = grid.cell_volume
    u = np.zeros(size)
    active = None
    for _ in range(max_iters):
        yT = free_terminal + columns @ u
        new_active, bound = _active_targets(yT, data)
        if active is not None and np.array_equal(new_active, active):
            break
        active = new_active
        rows = columns[active]
        hessian = np.diag(weights) + vol / prob.epsilon * rows.T @ rows
        rhs = -vol / prob.epsilon * rows.T @ (free_terminal[active] - bound[active])
        u = np.linalg.solve(hessian, rhs)
    return BoundaryControl(grid, times, u.reshape(shape))


@dataclass
class StageRecord:
    epsilon: float
    J: float
    u_norm: float
    violation: float
    violation_sum: float
    grad_norm: float
    inner_iters: int
    stagnated: bool
    observability_ratio: Optional[float]
    duality_ratio: Optional[float]

    def as_row(self):
        return {
            'eps': self.epsilon,
            'J': self.J,
            'u_norm': self.u_norm,
            'violation': self.violation,
            'violation_sum': self.violation_sum,
            'grad_norm': self.grad_norm,
            'inner_iters': self.inner_iters,
            'stagnated': self.stagnated,
            'observability_ratio': self.observability_ratio,
            'duality_ratio': self.duality_ratio,
        }


@dataclass
class ContinuationResult:
    u: BoundaryControl
    y: SpaceTimeField
    stages: list = field(default_factory=list)
    stopped_early: bool = False
    p: Optional[SpaceTimeField] = None


def _stage_record(prob, result):
    grid = prob.z.grid
    data = prob.penalty_data
    below, above = violation_norms(result.y.final, data, grid)
    u_norm = result.u.norm()
    p0_norm = float(np.sqrt(grid.cell_volume * result.p.initial @ result.p.initial))
    y0_norm = float(np.sqrt(grid.cell_volume * prob.y0 @ prob.y0))
    face_cells, _, _ = grid.boundary_faces
    trace = np.asarray(result.p.values)[:-1, face_cells]
    trace_norm = float(np.sqrt(np.sum(result.u.weights * trace * trace)))
    observability = p0_norm / trace_norm if trace_norm > 0 else None
    bound = p0_norm * y0_norm
    duality = (u_norm ** 2 + (below ** 2 + above ** 2) / prob.epsilon) / bound if bound > 0 else None
    return StageRecord(
        epsilon=prob.epsilon, J=result.J, u_norm=u_norm, violation=max(below, above),
        violation_sum=below + above, grad_norm=result.grad_norm, inner_iters=result.iterations,
        stagnated=result.stagnated, observability_ratio=observability, duality_ratio=duality,
    )


def epsilon_continuation(prob, settings=None, u0=None, operator=None):
    """
    solve_penalized along the geometric eps schedule with warm starts.

    prob supplies everything but epsilon. Stops at the floor or as soon as the
    terminal violation on the target drops to violation_tol.
    """
    settings = settings or OuterLoopSettings()
    operator = _operator_for(prob, operator)
    stages = []
    u = u0
    result = None
    stopped_early = False
    for eps in settings.eps_schedule:
        stage_prob = replace(prob, epsilon=eps)
        result = solve_penalized(stage_prob, settings, u0=u, operator=operator)
        record = _stage_record(stage_prob, result)
        stages.append(record)
        logger.info(f"eps={eps:.3e}: J={record.J:.6e} |u|={record.u_norm:.4e} "
                    f"violation={record.violation:.3e} inner={record.inner_iters}")
        u = result.u
        if record.violation <= settings.violation_tol:
            stopped_early = eps != settings.eps_schedule[-1]
            break
    return ContinuationResult(result.u, result.y, stages, stopped_early, result.p)


@dataclass
class OuterReport:
    success: bool
    converged: bool
    outer_iterations: int
    coverage: float
    frozen_coverage: Optional[float]
    precheck_covered: bool
    relaxation: float
    penalty_mu: float
    band: tuple
    picard_iterations: int
    control_ratio: Optional[float]
    log: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    stages: list = field(default_factory=list)

    def as_dict(self):
        return {
            'success': self.success,
            'converged': self.converged,
            'outer_iterations': self.outer_iterations,
            'coverage': self.coverage,
            'frozen_coverage': self.frozen_coverage,
            'precheck_covered': self.precheck_covered,
            'relaxation': self.relaxation,
            'penalty_mu': self.penalty_mu,
            'band': list(self.band),
            'picard_iterations': self.picard_iterations,
            'control_ratio': self.control_ratio,
            'changes': self.changes,
        }


def _coverage_at_T(y, target, band):
    return coverage(target, mushy_set(y, y.times.horizon, band))


def next_relaxation(changes, relaxation, floor=0.25):
    """Halve the relaxation whenever the latest outer change exceeds the previous one."""
    if len(changes) >= 2 and changes[-1] > changes[-2] and relaxation > floor:
        relaxation = max(0.5 * relaxation, floor)
        logger.warning(f"Outer change increased ({changes[-2]:.3e} -> {changes[-1]:.3e}); "
                       f"relaxation halved to {relaxation}")
    return relaxation


def outer_fixed_point(y0, target, params, settings=None, options=None, picard=None,
                      band=MushyBand.NARROW, grid_times=None, nonlinear_solver=None):
    """
    z^{k+1} = (1 - r) z^k + r y^{u_k, z^k}, u_k from the eps continuation for frozen z^k.

    Converges when the relative L2(Q) change of z is at most tol_outer and the frozen
    state covers the target; the verdict always comes from a final nonlinear solve
    with the returned control. grid_times is the (SpatialGrid, TimeGrid) pair.
    """
    settings = settings or OuterLoopSettings()
    options = options or SolverOptions()
    picard = picard or PicardSettings()
    nonlinear_solver = nonlinear_solver or solve_nonlinear
    grid, times = grid_times
    y0 = np.asarray(y0, dtype=float).ravel()
    lo, hi = params.band(band)
    penalty_mu = -lo * (1.0 - settings.band_margin)
    y0_norm = float(np.sqrt(grid.cell_volume * y0 @ y0))

    def control_ratio(u):
        return u.norm() / y0_norm if y0_norm > 0 else None

    zero = BoundaryControl.zeros(grid, times)
    free = nonlinear_solver(zero, y0, params, picard, options)
    free_coverage = _coverage_at_T(free.y, target, (lo, hi))
    if free_coverage == 1.0:
        logger.info("Target already covered by the uncontrolled flow; returning u = 0")
        report = OuterReport(True, True, 1, 1.0, None, True, settings.relaxation, penalty_mu, (lo, hi),
                             free.iterations, control_ratio(zero),
                             log=[{'outer_iter': 1, 'eps': None, 'inner_iters': 0, 'J': 0.0,
                                   'grad_norm': 0.0, 'violation': 0.0, 'coverage': 1.0}])
        return zero, free.y, report

    z = SpaceTimeField.constant_in_time(grid, times, y0)
    relaxation = settings.relaxation
    log, changes, all_stages = [], [], []
    best = None
    u = None
    converged = False
    iteration = 0
    for iteration in range(1, settings.max_outer + 1):
        operator = FrozenOperator.from_source(z, params, options)
        prob = PenalizedProblem(z, y0, target, settings.eps0, params, options, mu=penalty_mu)
        result = epsilon_continuation(prob, settings, u0=u, operator=operator)
        u, y = result.u, result.y
        frozen_coverage = _coverage_at_T(y, target, (lo, hi))
        change = relative_change(y.values, z.values, grid, times)
        changes.append(change)
        all_stages.append([s.as_row() for s in result.stages])
        for stage in result.stages:
            log.append({'outer_iter': iteration, 'eps': stage.epsilon, 'inner_iters': stage.inner_iters,
                        'J': stage.J, 'grad_norm': stage.grad_norm, 'violation': stage.violation,
                        'coverage': frozen_coverage})
        logger.info(f"Outer iteration {iteration}: change={change:.3e} frozen coverage={frozen_coverage:.4f} "
                    f"relaxation={relaxation}")
        score = (frozen_coverage, -change)
        if best is None or score > best[0]:
            best = (score, u, y, frozen_coverage)
        if change <= settings.tol_outer and frozen_coverage == 1.0:
            converged = True
            best = (score, u, y, frozen_coverage)
            break
        relaxation = next_relaxation(changes, relaxation)
        z = SpaceTimeField(grid, times, (1.0 - relaxation) * z.values + relaxation * y.values)

    _, u_best, y_frozen, frozen_coverage = best
    if not converged:
        logger.warning(f"Outer loop stopped after {settings.max_outer} iterations without convergence")
    final = nonlinear_solver(u_best, y0, params, picard, options, initial=y_frozen)
    true_coverage = _coverage_at_T(final.y, target, (lo, hi))
    success = converged and true_coverage == 1.0
    logger.info(f"Final nonlinear coverage {true_coverage:.4f} (success={success})")
    report = OuterReport(success, converged, iteration, true_coverage, frozen_coverage, False, relaxation,
                         penalty_mu, (lo, hi), final.iterations, control_ratio(u_best), log, changes, all_stages)
    return u_best, final.y, report
