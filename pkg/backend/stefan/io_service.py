"""
IO Service

Artifact persistence for runs: atomic file writes, CSV tables and field snapshots,
little-endian binary field dumps, mushy masks, run manifests and the regression
baselines file.

Binary field dump layout (all little-endian):

    int32   dimension
    float64 extent_1, extent_2        (extent_2 = 0 in 1D)
    int64   levels, n1, n2            (n2 = 1 in 1D)
    float64 values[levels][n1 * n2]   (cells in C order)
"""

import csv
import io
import json
import logging
import math
import os
import platform
import tempfile
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path

import numpy as np
from django.conf import settings

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

_HEADER = np.dtype([('dimension', '<i4'), ('extents', '<f8', (2,)), ('counts', '<i8', (3,))])
_VERSIONED = ('numpy', 'scipy', 'Django', 'pydantic', 'tenacity')


@contextmanager
def atomic_write(path, mode='w'):
    """Write to a temporary file in the target directory and rename it over `path` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, mode, **({} if 'b' in mode else {'encoding': 'utf-8', 'newline': ''})) as handle:
            yield handle
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(temp, path)
    except BaseException:
        if os.path.exists(temp):
            os.unlink(temp)
        raise


def to_jsonable(value):
    """numpy scalars/arrays to Python; non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path, data):
    with atomic_write(path) as handle:
        json.dump(to_jsonable(data), handle, indent=2, allow_nan=False)
    return Path(path)


def write_csv(path, header, rows):
    with atomic_write(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow(['' if v is None else v for v in row])
    return Path(path)


def write_dict_rows(path, rows, header=None):
    rows = list(rows)
    header = header or (list(rows[0].keys()) if rows else [])
    return write_csv(path, header, ([to_jsonable(r.get(k)) for k in header] for r in rows))


def _coordinate_names(grid):
    return ['x', 'y'][:grid.dimension]


def write_field_csv(path, field, every=1):
    """Long-format snapshots: level, t, cell, coordinates, value (every `every` levels plus the last)."""
    grid, times = field.grid, field.times
    levels = sorted(set(range(0, times.steps + 1, every)) | {times.steps})
    header = ['level', 't', 'cell'] + _coordinate_names(grid) + ['value']

    def rows():
        for n in levels:
            for cell, (center, value) in enumerate(zip(grid.centers, field.at(n))):
                yield [n, repr(float(times.times[n])), cell] + [repr(float(c)) for c in center] + [repr(float(value))]

    return write_csv(path, header, rows())


def read_snapshot_csv(path, grid):
    """One field slice from a CSV with a 'value' column (and optional 'cell' column)."""
    with open(path, encoding='utf-8', newline='') as handle:
        rows = list(csv.DictReader(handle))
    if not rows or 'value' not in rows[0]:
        raise ConfigurationError(f"{path} needs a 'value' column", key='path')
    values = np.full(grid.ncells, np.nan)
    for index, row in enumerate(rows):
        cell = int(row['cell']) if row.get('cell') not in (None, '') else index
        if not 0 <= cell < grid.ncells:
            raise ConfigurationError(f"{path}: cell {cell} outside the grid", key='path')
        values[cell] = float(row['value'])
    if np.isnan(values).any():
        raise ConfigurationError(f"{path} does not cover every cell of the grid", key='path')
    return values


def read_mask_csv(path, grid):
    """Boolean cell mask from a CSV listing member cells in a 'cell' column."""
    with open(path, encoding='utf-8', newline='') as handle:
        rows = list(csv.DictReader(handle))
    mask = np.zeros(grid.ncells, dtype=bool)
    for row in rows:
        cell = int(row['cell'])
        if not 0 <= cell < grid.ncells:
            raise ConfigurationError(f"{path}: cell {cell} outside the grid", key='path')
        mask[cell] = True
    return mask


def write_masks_csv(path, masks):
    """Mushy masks as cell lists: one (level, cell) row per member cell."""
    rows = ((mask.level, int(cell)) for mask in masks for cell in np.flatnonzero(mask.mask))
    return write_csv(path, ['level', 'cell'], rows)


def write_control_csv(path, control):
    _, _, labels = control.grid.boundary_faces
    times = control.times.times

    def rows():
        for n, row in enumerate(control.values):
            for face, value in enumerate(row):
                yield [n, repr(float(times[n + 1])), face, labels[face], repr(float(value))]

    return write_csv(path, ['step', 't', 'face', 'label', 'value'], rows())


def read_control_csv(path, grid, time_grid):
    values = np.full((time_grid.steps, grid.nfaces), np.nan)
    with open(path, encoding='utf-8', newline='') as handle:
        for row in csv.DictReader(handle):
            step, face = int(row['step']), int(row['face'])
            if not (0 <= step < time_grid.steps and 0 <= face < grid.nfaces):
                raise ConfigurationError(f"{path}: step {step} / face {face} outside the grids", key='path')
            values[step, face] = float(row['value'])
    if np.isnan(values).any():
        raise ConfigurationError(f"{path} does not give a flux for every step and face", key='path')
    return values


def write_field_binary(path, field):
    grid = field.grid
    header = np.zeros(1, dtype=_HEADER)
    header['dimension'] = grid.dimension
    header['extents'][0, :grid.dimension] = grid.extents
    n1 = grid.cells[0]
    n2 = grid.cells[1] if grid.dimension == 2 else 1
    header['counts'] = (field.times.steps + 1, n1, n2)
    with atomic_write(path, 'wb') as handle:
        handle.write(header.tobytes())
        handle.write(np.ascontiguousarray(field.values, dtype='<f8').tobytes())
    return Path(path)


def read_field_binary(path):
    """(dimension, extents, cells, values of shape (levels, ncells)) from a binary dump."""
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    dimension = int(header['dimension'])
    levels, n1, n2 = (int(c) for c in header['counts'])
    values = np.frombuffer(raw[_HEADER.itemsize:], dtype='<f8')
    if values.size != levels * n1 * n2:
        raise ConfigurationError(f"{path}: payload has {values.size} values, header says {levels * n1 * n2}",
                                 key='path')
    extents = tuple(float(e) for e in header['extents'][:dimension])
    cells = (n1,) if dimension == 1 else (n1, n2)
    return dimension, extents, cells, values.reshape(levels, n1 * n2)


def package_versions():
    versions = {'python': platform.python_version()}
    for name in _VERSIONED:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_manifest(out_dir, command, config_text, wall_time, threads, seed, status, files, extra=None):
    """manifest.json: config echo, package versions, wall time, thread count, seed and written files."""
    manifest = {
        'command': command,
        'status': status,
        'config': json.loads(config_text),
        'versions': package_versions(),
        'platform': platform.platform(),
        'wall_time_s': wall_time,
        'threads': threads,
        'seed': seed,
        'files': sorted(str(Path(f).name) for f in files),
    }
    if extra:
        manifest.update(extra)
    return write_json(Path(out_dir) / 'manifest.json', manifest)


def baseline_path():
    return Path(getattr(settings, 'STEFAN_BASELINE_PATH'))


def load_baselines(path=None):
    path = Path(path) if path else baseline_path()
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding='utf-8'))


def check_baseline(name, value, path=None, factor=2.0):
    """
    Compare `value` with the stored baseline `name`: pass when value <= factor * baseline.

    A missing entry is recorded with `value` and passes.
    Returns (passed, baseline).
    """
    path = Path(path) if path else baseline_path()
    baselines = load_baselines(path)
    if name not in baselines:
        baselines[name] = float(value)
        write_json(path, baselines)
        logger.info(f"Recorded regression baseline {name}={value:.6e} in {path}")
        return True, float(value)
    baseline = float(baselines[name])
    passed = float(value) <= factor * baseline
    if not passed:
        logger.warning(f"Regression baseline exceeded: {name}={value:.6e} > {factor} x {baseline:.6e}")
    return passed, baseline


def render_csv(header, rows):
    """CSV text for small tables printed to the console."""
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()
