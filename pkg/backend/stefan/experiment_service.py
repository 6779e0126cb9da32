"""
Experiment Service

Builds the domain objects a RunConfig describes and runs the simulate, control
and sweep experiments, writing every artifact under the run's output directory.
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from django.conf import settings as django_settings
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from . import io_service
from .control_service import outer_fixed_point
from .enthalpy_service import temperature_field
from .exceptions import ConfigurationError, NumericalError, PicardNonConvergence, StefanError
from .forward_service import (classical_region_residual, energy_report, heat_truncation_residual,
                              manufactured_error, mass_balance, observed_orders, solve_nonlinear)
from .models import BoundaryControl, InitialProfile, PicardSettings, SweepAxis, TargetSet
from .mushy_service import (coverage, hausdorff_distance, holder_quotient, mushy_measures, mushy_set,
                            target_as_mask, target_from_intervals)
from .serializers import RunConfig, emit_config

logger = logging.getLogger(__name__)

PICARD_ATTEMPTS = 3


# --- BUILDING BLOCKS ---

def initial_profile(grid, section):
    """Initial enthalpy at the cell centers from a named profile."""
    profile = InitialProfile(section.profile)
    centers = grid.centers
    axis = min(section.axis, grid.dimension - 1)
    x = centers[:, axis]
    if profile == InitialProfile.CONSTANT:
        return np.full(grid.ncells, section.value)
    if profile == InitialProfile.LINEAR_RAMP:
        return section.left + (section.right - section.left) * x / grid.extents[axis]
    if profile == InitialProfile.TWO_PHASE_STEP:
        if section.width == 0:
            return np.where(x < section.position, section.solid, section.liquid)
        s = np.clip((x - section.position + 0.5 * section.width) / section.width, 0.0, 1.0)
        return section.solid + (section.liquid - section.solid) * s
    center = np.resize(np.asarray(section.center, dtype=float), grid.dimension)
    distance = np.linalg.norm(centers - center, axis=-1)
    bump = 0.5 * (1.0 + np.cos(np.pi * np.minimum(distance / section.radius, 1.0)))
    return section.base + section.amp * bump


def build_initial(config, grid):
    if config.initial.path:
        return io_service.read_snapshot_csv(config.initial.path, grid)
    return initial_profile(grid, config.initial)


def build_target(config, grid):
    if config.target is None:
        raise ConfigurationError("this run needs a target", key='target')
    if config.target.path:
        return TargetSet(grid, io_service.read_mask_csv(config.target.path, grid))
    return target_from_intervals(grid, config.target.boxes)


def build_control(config, grid, times):
    section = config.control
    if section.kind == 'zero':
        return BoundaryControl.zeros(grid, times)
    if section.kind == 'file':
        return BoundaryControl(grid, times, io_service.read_control_csv(section.path, grid, times))
    _, _, labels = grid.boundary_faces
    unknown = set(section.fluxes) - set(labels)
    if unknown:
        raise ConfigurationError(f"no boundary faces labelled {sorted(unknown)} on this grid", key='fluxes')
    row = np.array([section.fluxes.get(label, 0.0) for label in labels])
    return BoundaryControl(grid, times, np.tile(row, (times.steps, 1)))


def solve_nonlinear_with_retry(u, y0, params, settings=None, options=None, initial=None):
    """solve_nonlinear, retried with halved damping when Picard does not converge."""
    settings = settings or PicardSettings()
    for attempt in Retrying(stop=stop_after_attempt(PICARD_ATTEMPTS),
                            retry=retry_if_exception_type(PicardNonConvergence),
                            before_sleep=before_sleep_log(logger, logging.WARNING),
                            reraise=True):
        with attempt:
            damping = settings.damping * 0.5 ** (attempt.retry_state.attempt_number - 1)
            return solve_nonlinear(u, y0, params, replace(settings, damping=damping), options, initial)


def _hausdorff_entry(mask, target):
    try:
        distance = hausdorff_distance(mask, target_as_mask(target, mask.level))
    except StefanError as e:
        return {'hausdorff': None, 'hausdorff_infinite': False, 'hausdorff_error': str(e)}
    infinite = not np.isfinite(distance)
    return {'hausdorff': None if infinite else distance, 'hausdorff_infinite': infinite}


@dataclass
class RunArtifacts:
    out_dir: Path
    status: str
    summary: dict
    files: list = field(default_factory=list)


def prepare_out_dir(config, out_dir):
    path = Path(out_dir or config.output_dir or django_settings.STEFAN_OUTPUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_state(out, config, y, files):
    files.append(io_service.write_field_csv(out / 'state.csv', y, config.diagnostics.snapshot_every))
    if config.diagnostics.write_binary:
        files.append(io_service.write_field_binary(out / 'state.bin', y))


def _series_rows(y, u, params, band):
    mass, inflow, defect = mass_balance(y, u)
    measures = mushy_measures(y, band)
    vol = y.grid.cell_volume
    norms = np.sqrt(vol * np.sum(y.values ** 2, axis=1))
    for n, t in enumerate(y.times.times):
        yield [n, repr(float(t)), repr(float(mass[n])), repr(float(inflow[n])), repr(float(defect[n])),
               repr(float(measures[n])), repr(float(norms[n]))]


SERIES_HEADER = ['level', 't', 'mass', 'inflow', 'mass_defect', 'mushy_measure', 'l2_norm']


# --- EXPERIMENTS ---

def run_simulate(config, out_dir=None, threads=1, seed=None):
    """Forward experiment: nonlinear solve under the configured control plus all forward diagnostics."""
    started = time.perf_counter()
    out = prepare_out_dir(config, out_dir)
    seed = seed if seed is not None else config.effective_seed()
    grid, times, params = config.grid(), config.time_grid(), config.params()
    y0 = build_initial(config, grid)
    u = build_control(config, grid, times)
    files = []
    logger.info(f"simulate: {grid.cells} cells, {times.steps} steps, lambda={params.lam}, alpha={params.alpha}")

    result = solve_nonlinear_with_retry(u, y0, params, config.picard_settings(), config.solver_options())
    y = result.y
    _write_state(out, config, y, files)
    theta = temperature_field(y, params)
    if config.diagnostics.write_binary:
        files.append(io_service.write_field_binary(out / 'temperature.bin', theta))
    files.append(io_service.write_field_csv(out / 'temperature.csv', theta, times.steps))
    files.append(io_service.write_control_csv(out / 'control.csv', u))

    band = params.band(config.diagnostics.mask_band)
    masks = [mushy_set(y, t, band) for t in times.times]
    files.append(io_service.write_masks_csv(out / 'masks.csv', masks))
    files.append(io_service.write_csv(out / 'series.csv', SERIES_HEADER, _series_rows(y, u, params, band)))
    files.append(io_service.write_csv(out / 'picard.csv', ['iter', 'residual'], result.history_rows()))

    energy = energy_report(y, u, params)
    margin = config.interior_margin()
    classical = classical_region_residual(y, params, margin)
    rng = np.random.default_rng(seed)
    holder, normalizer = holder_quotient(y, margin, config.diagnostics.holder_samples, rng, u, params)
    _, _, defect = mass_balance(y, u)
    summary = {
        'picard_iterations': result.iterations,
        'picard_residual': result.residual,
        'picard_damping': result.damping,
        'energy': energy.as_dict(),
        'classical': classical.as_dict(),
        'heat_truncation_baseline': None,
        'holder_quotient': holder,
        'holder_normalizer': normalizer,
        'max_mass_defect': float(np.max(np.abs(defect))),
        'mask_band': list(band),
        'final_mushy_measure': masks[-1].measure,
        'truncated_windows': result.operator.truncated_windows if result.operator else 0,
    }
    if grid.dimension == 1:
        summary['heat_truncation_baseline'] = heat_truncation_residual(grid, times, params.k1)
    files.append(io_service.write_json(out / 'report.json', summary))
    wall = time.perf_counter() - started
    files.append(io_service.write_manifest(out, 'simulate', emit_config(config), wall, threads, seed, 'ok', files))
    logger.info(f"simulate finished in {wall:.2f}s, artifacts in {out}")
    return RunArtifacts(out, 'ok', summary, files)


LOG_HEADER = ['outer_iter', 'eps', 'inner_iters', 'J', 'grad_norm', 'violation', 'coverage']


def run_control(config, out_dir=None, threads=1, seed=None):
    """Control experiment: outer fixed point, final nonlinear verdict and its artifacts."""
    started = time.perf_counter()
    out = prepare_out_dir(config, out_dir)
    seed = seed if seed is not None else config.effective_seed()
    grid, times, params = config.grid(), config.time_grid(), config.params()
    y0 = build_initial(config, grid)
    target = build_target(config, grid)
    files = []
    logger.info(f"control: target measure {target.measure:.4f}, band {config.optimizer.band}")
    try:
        u, y, report = outer_fixed_point(
            y0, target, params, config.outer_settings(), config.solver_options(), config.picard_settings(),
            band=config.optimizer.band, grid_times=(grid, times), nonlinear_solver=solve_nonlinear_with_retry)
    except NumericalError as e:
        logger.error(f"control run failed: {e}")
        files.append(io_service.write_json(out / 'report.json', {'success': False, 'error': str(e),
                                                                 'error_type': type(e).__name__}))
        wall = time.perf_counter() - started
        io_service.write_manifest(out, 'control', emit_config(config), wall, threads, seed, 'failed', files)
        raise

    files.append(io_service.write_control_csv(out / 'control.csv', u))
    _write_state(out, config, y, files)
    files.append(io_service.write_dict_rows(out / 'optimization_log.csv', report.log, LOG_HEADER))
    files.append(io_service.write_json(out / 'stages.json', report.stages))
    band = report.band
    final_mask = mushy_set(y, times.horizon, band)
    files.append(io_service.write_masks_csv(out / 'mask_T.csv', [final_mask]))
    summary = report.as_dict()
    summary.update({
        'control_norm': u.norm(),
        'target_measure': target.measure,
        'final_mushy_measure': final_mask.measure,
        'coverage_check': coverage(target, final_mask),
        'max_mass_defect': float(np.max(np.abs(mass_balance(y, u)[2]))),
        'uncontrolled': report.precheck_covered,
    })
    summary.update(_hausdorff_entry(final_mask, target))
    files.append(io_service.write_json(out / 'report.json', summary))
    wall = time.perf_counter() - started
    status = 'ok' if report.success else 'not_converged'
    files.append(io_service.write_manifest(out, 'control', emit_config(config), wall, threads, seed, status, files))
    logger.info(f"control finished in {wall:.2f}s: success={report.success} coverage={report.coverage:.4f}")
    return RunArtifacts(out, status, summary, files)


# --- SWEEPS ---

_AXIS_KEYS = {
    SweepAxis.LAMBDA: ('physics', 'lambda'),
    SweepAxis.EPSILON_FLOOR: ('optimizer', 'eps_floor'),
    SweepAxis.CELLS: ('problem', 'cells'),
    SweepAxis.STEPS: ('problem', 'steps'),
    SweepAxis.MU: ('physics', 'mu'),
}


def sweep_config(config, axis, value):
    """Copy of config with the sweep axis set to value, re-validated."""
    section, key = _AXIS_KEYS[SweepAxis(axis)]
    data = json.loads(emit_config(config))
    if axis == SweepAxis.CELLS:
        value = [int(value)] * config.problem.dimension
    elif axis == SweepAxis.STEPS:
        value = int(value)
    else:
        value = float(value)
    data[section][key] = value
    return RunConfig.model_validate(data)


def _sweep_row(task):
    index, axis, value, config_text, out_dir, mode, seed = task
    row = {'index': index, 'axis': axis, 'value': value, 'status': 'ok', 'error': None}
    started = time.perf_counter()
    try:
        config = sweep_config(RunConfig.model_validate_json(config_text), axis, value)
        runner = run_control if mode == 'control' else run_simulate
        artifacts = runner(config, out_dir, 1, seed)
        summary = artifacts.summary
        row['status'] = artifacts.status
        if mode == 'control':
            row.update({'success': summary['success'], 'coverage': summary['coverage'],
                        'outer_iterations': summary['outer_iterations'], 'control_norm': summary['control_norm']})
        else:
            row.update({'energy_constant': summary['energy']['constant'],
                        'res_solid': summary['classical']['res_solid'],
                        'res_liquid': summary['classical']['res_liquid'],
                        'holder_quotient': summary['holder_quotient'],
                        'max_mass_defect': summary['max_mass_defect']})
        if axis in (SweepAxis.CELLS, SweepAxis.STEPS) and config.problem.dimension == 1:
            reference = 'space' if axis == SweepAxis.CELLS else 'time'
            row['manufactured_error'] = manufactured_error(
                config.problem.cells[0], config.problem.steps, config.problem.T, config.physics.k1, reference,
                config.solver_options(), config.problem.extents[0])
    except (StefanError, ValueError) as e:
        logger.error(f"sweep row {index} ({axis}={value}) failed: {e}")
        row['status'] = 'failed'
        row['error'] = str(e)
    row['wall_time_s'] = time.perf_counter() - started
    return row


def _init_worker():
    import django
    django.setup()


def run_sweep(config, axis, values, out_dir=None, threads=1, seed=None, mode='simulate'):
    """
    One run per value of the axis, each in its own subdirectory; returns the table rows
    and writes sweep.csv. Rows run in worker processes when threads > 1.
    """
    axis = SweepAxis(axis)
    out = prepare_out_dir(config, out_dir)
    seed = seed if seed is not None else config.effective_seed()
    text = config.model_dump_json(by_alias=True)
    tasks = [(i, axis.value, v, text, str(out / f"{axis.value}_{i:02d}"), mode, seed) for i, v in enumerate(values)]
    logger.info(f"sweep over {axis.value}: {len(tasks)} rows, {threads} worker(s)")
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker) as pool:
            rows = list(pool.map(_sweep_row, tasks))
    else:
        rows = [_sweep_row(task) for task in tasks]
    errors = [r.get('manufactured_error') for r in rows]
    if len(rows) > 1 and all(e is not None and e > 0 for e in errors):
        orders = observed_orders([r['value'] for r in rows], errors)
        for row, order in zip(rows, [None] + orders):
            row['observed_order'] = order
    header = []
    for row in rows:
        header.extend(k for k in row if k not in header)
    io_service.write_dict_rows(out / 'sweep.csv', rows, header)
    return rows
