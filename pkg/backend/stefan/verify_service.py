"""
Verify Service

Invariant suites for every solver layer, bundled into one report. Failures are
report entries, never exceptions; the verify command turns a failing report
into exit code 4.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import io_service
from .adjoint_service import duality_check, transpose_probes
from .control_service import (dense_penalized_solution, epsilon_continuation, gradient, penalty_functional,
                              solve_penalized)
from .enthalpy_service import (coefficient_field, g_lambda, g_lambda_slope_bound, h_lambda, mollifier_integral,
                               mollifier_spec)
from .exceptions import StefanError
from .experiment_service import initial_profile, prepare_out_dir, solve_nonlinear_with_retry
from .forward_service import (FrozenOperator, check_coefficient_band, classical_region_residual, energy_report,
                              heat_truncation_residual, manufactured_error, mass_balance, observed_orders,
                              relative_change, solve_nonlinear)
from .models import (BoundaryControl, LinearSolver, MushyMask, OuterLoopSettings, PenalizedProblem, SpaceTimeField,
                     SpatialGrid, TargetSet, TimeGrid)
from .mushy_service import coverage, hausdorff_distance, holder_quotient, mushy_set, target_from_intervals
from .serializers import emit_config

logger = logging.getLogger(__name__)

SMALL_CELLS = 32
SMALL_STEPS = 32


@dataclass
class VerifyEntry:
    suite: str
    name: str
    passed: bool
    value: object = None
    threshold: object = None
    detail: str = ''

    def as_row(self):
        return {'suite': self.suite, 'name': self.name, 'passed': self.passed, 'value': self.value,
                'threshold': self.threshold, 'detail': self.detail}


@dataclass
class VerifyReport:
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def failures(self):
        return [e for e in self.entries if not e.passed]

    def add(self, suite, name, passed, value=None, threshold=None, detail=''):
        entry = VerifyEntry(suite, name, bool(passed), value, threshold, detail)
        self.entries.append(entry)
        log = logger.info if entry.passed else logger.warning
        log(f"[{'PASS' if entry.passed else 'FAIL'}] {suite}.{name}: value={value} threshold={threshold} {detail}")
        return entry


def _small_instance(config, cells=SMALL_CELLS, steps=SMALL_STEPS):
    grid = SpatialGrid((config.problem.extents[0],), (cells,))
    times = TimeGrid(config.problem.T, steps)
    y0 = initial_profile(grid, config.initial)
    return grid, times, y0


def _random_control(grid, times, rng, scale=1.0):
    return BoundaryControl(grid, times, scale * rng.standard_normal((times.steps, grid.nfaces)))


# --- SUITES ---

def enthalpy_suite(report, config):
    params = config.params()
    a, rho = params.width, params.rho
    breakpoints = np.array([-a, 0.0, rho, rho + a])
    delta = 1e-7 * a
    one_sided = [abs(h_lambda(b + s * delta, params) - h_lambda(b, params)) / delta for b in breakpoints for s in (-1, 1)]
    flat = 1e-3 * g_lambda_slope_bound(params)
    report.add('enthalpy', 'h_lambda_c1_joins', max(one_sided) <= flat, max(one_sided), flat)
    r = np.linspace(-a, rho + a, 4001)
    slopes = np.abs(np.diff(g_lambda(r, params)) / np.diff(r))
    report.add('enthalpy', 'g_lambda_slope_bound', slopes.max() <= g_lambda_slope_bound(params) * (1 + 1e-6),
               float(slopes.max()), g_lambda_slope_bound(params))
    h = h_lambda(np.linspace(-10.0, rho + 10.0, 20001), params)
    report.add('enthalpy', 'h_lambda_band', h.min() >= a - 1e-14 and h.max() <= params.k_star + 1e-14,
               [float(h.min()), float(h.max())], [a, params.k_star])
    for dimension in (1, 2):
        integral = mollifier_integral(mollifier_spec(dimension))
        report.add('enthalpy', f'mollifier_integral_{dimension}d', abs(integral - 1.0) <= 1e-8, integral, 1.0)


def frozen_suite(report, config):
    kappa = config.physics.k1
    options = config.solver_options()
    error = manufactured_error(256, 512, 0.1, kappa, 'exact', options)
    report.add('forward', 'manufactured_cosine_256x512', error <= 0.01, error, 0.01)

    cells = config.diagnostics.verify_cells
    h_errors = [manufactured_error(n, 64, 0.1, kappa, 'space', options) for n in cells]
    h_order = min(observed_orders(cells, h_errors)) if len(cells) > 1 else None
    report.add('forward', 'order_in_h', h_order is None or h_order >= 1.8, h_order, 1.8,
               f"errors {['%.3e' % e for e in h_errors]}")
    steps = config.diagnostics.verify_steps
    t_errors = [manufactured_error(64, n, 0.1, kappa, 'time', options) for n in steps]
    t_order = min(observed_orders(steps, t_errors)) if len(steps) > 1 else None
    report.add('forward', 'order_in_dt', t_order is None or t_order >= 0.9, t_order, 0.9,
               f"errors {['%.3e' % e for e in t_errors]}")


def nonlinear_suite(report, config, rng):
    params = config.params()
    grid, times, y0 = _small_instance(config)
    picard = config.picard_settings()
    direct = replace(config.solver_options(), linear_solver=LinearSolver.DIRECT)

    u = _random_control(grid, times, rng, 0.5)
    result = solve_nonlinear_with_retry(u, y0, params, picard, direct)
    mass, _, defect = mass_balance(result.y, u)
    step_defect = float(np.max(np.abs(np.diff(defect))))
    report.add('forward', 'mass_balance', step_defect <= 1e-10 * max(1.0, float(np.max(np.abs(mass)))),
               step_defect, 1e-10)

    coefficients, _ = coefficient_field(result.y, params, mollifier_spec(1, direct.quadrature_order,
                                                                         direct.time_samples))
    low, high = check_coefficient_band(coefficients, params)
    report.add('forward', 'coefficient_band', True, [low, high], [params.width, params.k_star])

    free = solve_nonlinear_with_retry(BoundaryControl.zeros(grid, times), y0, params, picard, direct)
    norms = np.sqrt(grid.cell_volume * np.sum(free.y.values ** 2, axis=1))
    growth = float(np.max(np.diff(norms) / np.maximum(norms[:-1], 1e-300)))
    report.add('forward', 'energy_dissipation', growth <= 1e-12, growth, 1e-12)

    perturbed = SpaceTimeField.constant_in_time(grid, times, y0 + 0.5 * rng.standard_normal(grid.ncells))
    other = solve_nonlinear(u, y0, params, picard, direct, initial=perturbed)
    gap = relative_change(result.y.values, other.y.values, grid, times)
    report.add('forward', 'picard_uniqueness', gap <= 10 * picard.tol_l2, gap, 10 * picard.tol_l2)


def adjoint_suite(report, config, rng):
    params = config.params()
    direct = replace(config.solver_options(), linear_solver=LinearSolver.DIRECT)
    count = config.diagnostics.probe_count
    resolutions = sorted({config.diagnostics.verify_cells[0], SMALL_CELLS})
    for cells in resolutions:
        grid, times, y0 = _small_instance(config, cells)
        z = SpaceTimeField.constant_in_time(grid, times, y0)
        operator = FrozenOperator.from_source(z, params, direct)
        worst = transpose_probes(operator, rng, count)
        report.add('adjoint', f'transpose_probes_{cells}', worst <= 1e-10, worst, 1e-10)
        residual = 0.0
        for _ in range(count):
            a = rng.standard_normal(grid.ncells)
            u = _random_control(grid, times, rng)
            y = SpaceTimeField(grid, times, operator.forward(a, u.values))
            p = SpaceTimeField(grid, times, operator.backward(rng.standard_normal(grid.ncells)))
            residual = max(residual, duality_check(a, u, p, y))
        report.add('adjoint', f'duality_{cells}', residual <= 1e-9, residual, 1e-9)
        constant = operator.backward(np.full(grid.ncells, 1.5))
        drift = float(np.max(np.abs(constant - 1.5)))
        report.add('adjoint', f'constant_mode_{cells}', drift <= 1e-9, drift, 1e-9)


CONTROL_HORIZON = 0.05


def _control_problem(config, cells, steps, epsilon):
    """
    Frozen 1D instance the uncontrolled flow cannot satisfy: a solid block at
    -1 next to the liquid, with the target inside the solid near the left face.
    """
    direct = replace(config.solver_options(), linear_solver=LinearSolver.DIRECT)
    params = config.params()
    length = config.problem.extents[0]
    grid = SpatialGrid((length,), (cells,))
    times = TimeGrid(CONTROL_HORIZON, steps)
    x = grid.centers[:, 0] / length
    y0 = -1.0 + 2.5 * np.clip((x - 0.7) / 0.1, 0.0, 1.0)
    target = target_from_intervals(grid, [[0.1 * length, 0.3 * length]])
    z = SpaceTimeField.constant_in_time(grid, times, y0)
    return PenalizedProblem(z, y0, target, epsilon, params, direct)


def _uncontrolled_penalty(prob, operator):
    return penalty_functional(BoundaryControl.zeros(prob.z.grid, prob.z.times), prob, operator)


def gradient_suite(report, config, rng):
    prob = _control_problem(config, 64, SMALL_STEPS, 1e-2)
    operator = FrozenOperator.from_source(prob.z, prob.params, prob.options)
    grid, times = prob.z.grid, prob.z.times
    u = _random_control(grid, times, rng, 0.1)
    grad = gradient(u, prob, operator)
    worst = 0.0
    for _ in range(config.diagnostics.fd_directions):
        direction = _random_control(grid, times, rng)
        direction = BoundaryControl(grid, times, direction.values / direction.norm())
        h = 1e-6 * max(1.0, u.norm())
        plus = penalty_functional(BoundaryControl(grid, times, u.values + h * direction.values), prob, operator)
        minus = penalty_functional(BoundaryControl(grid, times, u.values - h * direction.values), prob, operator)
        exact = grad.inner(direction)
        worst = max(worst, abs(exact - (plus - minus) / (2 * h)) / (abs(exact) + 1e-14))
    report.add('control', 'gradient_finite_differences', worst <= 1e-6, worst, 1e-6)

    small = _control_problem(config, 16, 16, 1e-2)
    small_op = FrozenOperator.from_source(small.z, small.params, small.options)
    free_J = _uncontrolled_penalty(small, small_op)
    settings = OuterLoopSettings(tol_grad=1e-12, inner_max_iters=500)
    result = solve_penalized(small, settings, operator=small_op)
    reference = dense_penalized_solution(small, small_op)
    scale = float(np.linalg.norm(reference.values))
    mismatch = float(np.linalg.norm(result.u.values - reference.values)) / scale if scale > 0 else None
    passed = free_J > 0 and mismatch is not None and mismatch <= 1e-8
    report.add('control', 'dense_oracle_16_cells', passed, mismatch, 1e-8, f"J(0)={free_J:.3e}")


def penalization_suite(report, config):
    """Penalization limit along the configured eps schedule on the frozen control instance."""
    prob = _control_problem(config, SMALL_CELLS, SMALL_STEPS, 1.0)
    operator = FrozenOperator.from_source(prob.z, prob.params, prob.options)
    free_J = _uncontrolled_penalty(prob, operator)
    report.add('control', 'uncontrolled_violation', free_J > 0, free_J, 0.0)
    settings = replace(config.outer_settings(), violation_tol=0.0)
    result = epsilon_continuation(prob, settings, operator=operator)
    sums = [s.violation_sum for s in result.stages]
    monotone = len(sums) == len(settings.eps_schedule) and all(
        b <= a * 1.01 + 1e-14 for a, b in zip(sums, sums[1:]))
    report.add('control', 'violation_monotone', monotone, sums[-1], None, f"stages {len(sums)}")
    limit = 1e-3 * np.sqrt(prob.target.measure)
    at_floor = free_J > 0 and result.stages[-1].epsilon == settings.eps_schedule[-1] and sums[-1] <= limit
    report.add('control', 'violation_at_floor', at_floor, sums[-1], limit)
    norms = [s.u_norm for s in result.stages]
    passed, baseline = io_service.check_baseline(f'control_norm:{SMALL_CELLS}x{SMALL_STEPS}', max(norms))
    report.add('control', 'control_norm_bounded', passed and max(norms) > 0, max(norms), baseline)
    ratios = [s.duality_ratio for s in result.stages if s.duality_ratio is not None]
    report.add('control', 'duality_bound', len(ratios) == len(result.stages) and all(r <= 1.05 for r in ratios),
               max(ratios) if ratios else None, 1.05)


def diagnostics_suite(report, config, rng):
    params = config.params()
    grid, times = config.grid(), config.time_grid()
    y0 = initial_profile(grid, config.initial)
    u = BoundaryControl.zeros(grid, times)
    result = solve_nonlinear_with_retry(u, y0, params, config.picard_settings(), config.solver_options())
    energy = energy_report(result.y, u, params)
    finite = not energy.degenerate and np.isfinite(energy.constant)
    report.add('diagnostics', 'energy_constant_finite', finite, energy.constant)
    if finite:
        passed, baseline = io_service.check_baseline(f'energy_constant:{grid.cells}x{times.steps}', energy.constant)
        report.add('diagnostics', 'energy_constant_baseline', passed, energy.constant, baseline)
    margin = config.interior_margin()
    holder, _ = holder_quotient(result.y, margin, config.diagnostics.holder_samples, rng)
    if holder is not None:
        passed, baseline = io_service.check_baseline(f'holder_quotient:{grid.cells}x{times.steps}', holder)
        report.add('diagnostics', 'holder_quotient_baseline', passed, holder, baseline)
    classical = classical_region_residual(result.y, params, margin)
    if grid.dimension == 1:
        truncation = heat_truncation_residual(grid, times, params.k1)
        for name, value in (('solid', classical.res_solid), ('liquid', classical.res_liquid)):
            if value is None:
                report.add('diagnostics', f'classical_{name}', True, None, None, 'region empty')
            else:
                report.add('diagnostics', f'classical_{name}', value <= 5 * truncation, value, 5 * truncation,
                           '' if classical.alpha_admissible else 'alpha outside (0, 1/26)')


def mushy_suite(report, rng):
    grid = SpatialGrid((1.0,), (SMALL_CELLS,))
    times = TimeGrid(1.0, 2)
    mismatches = 0
    for _ in range(20):
        values = rng.uniform(-1.0, 2.0, size=(3, grid.ncells))
        y = SpaceTimeField(grid, times, values)
        lo, hi = sorted(rng.uniform(-1.0, 2.0, size=2))
        mask = mushy_set(y, times.horizon, (lo, hi))
        expected = [lo <= v <= hi for v in values[-1]]
        mismatches += int(list(mask.mask) != expected)
        target_mask = rng.random(grid.ncells) < 0.5
        target_mask[rng.integers(grid.ncells)] = True
        target = TargetSet(grid, target_mask)
        hits = sum(1 for c in range(grid.ncells) if target_mask[c] and expected[c])
        mismatches += int(abs(coverage(target, mask) - hits / target_mask.sum()) > 1e-15)
    report.add('mushy', 'mushy_set_and_coverage_enumeration', mismatches == 0, mismatches, 0)

    worst = 0.0
    for cells in ((SMALL_CELLS,), (4, 8)):
        g = SpatialGrid(tuple(1.0 for _ in cells), cells)
        for _ in range(20):
            a = rng.random(g.ncells) < 0.3
            b = rng.random(g.ncells) < 0.3
            a[rng.integers(g.ncells)] = True
            b[rng.integers(g.ncells)] = True
            pa, pb = g.centers[a], g.centers[b]
            forward = max(min(np.linalg.norm(p - q) for q in pb) for p in pa)
            backward = max(min(np.linalg.norm(p - q) for q in pa) for p in pb)
            value = hausdorff_distance(MushyMask(g, 0, a), MushyMask(g, 0, b))
            worst = max(worst, abs(value - max(forward, backward)))
    report.add('mushy', 'hausdorff_brute_force', worst <= 1e-12, worst, 1e-12)


def run_verify(config, out_dir=None, threads=1, seed=None):
    """Run every invariant suite; writes verify.json, verify.csv and the manifest."""
    started = time.perf_counter()
    out = prepare_out_dir(config, out_dir)
    seed = seed if seed is not None else config.effective_seed()
    rng = np.random.default_rng(seed)
    report = VerifyReport()
    suites = [
        ('enthalpy', enthalpy_suite, (report, config)),
        ('forward', frozen_suite, (report, config)),
        ('forward', nonlinear_suite, (report, config, rng)),
        ('adjoint', adjoint_suite, (report, config, rng)),
        ('control', gradient_suite, (report, config, rng)),
    ]
    if config.diagnostics.verify_control:
        suites.append(('control', penalization_suite, (report, config)))
    suites += [('diagnostics', diagnostics_suite, (report, config, rng)), ('mushy', mushy_suite, (report, rng))]
    for name, suite, args in suites:
        try:
            suite(*args)
        except (StefanError, ArithmeticError) as e:
            logger.exception(f"{suite.__name__} aborted")
            report.add(name, f"{suite.__name__}_completed", False, detail=f"{type(e).__name__}: {e}")

    rows = [e.as_row() for e in report.entries]
    files = [
        io_service.write_json(out / 'verify.json', {'passed': report.passed, 'entries': rows}),
        io_service.write_dict_rows(out / 'verify.csv', rows, ['suite', 'name', 'passed', 'value', 'threshold',
                                                              'detail']),
    ]
    wall = time.perf_counter() - started
    status = 'ok' if report.passed else 'failed'
    io_service.write_manifest(out, 'verify', emit_config(config), wall, threads, seed, status, files,
                              {'failures': [f"{e.suite}.{e.name}" for e in report.failures]})
    logger.info(f"verify finished in {wall:.2f}s: {len(report.entries)} checks, {len(report.failures)} failed")
    return report
