"""
Mushy Service

Mushy sets sigma_t, target coverage, Hausdorff distances between cell sets and
a sampled Hoelder quotient of the state.
"""

import logging

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from .exceptions import ConfigurationError, UndefinedDistanceError
from .grid_service import v_norm
from .models import MushyBand, MushyMask, TargetSet

logger = logging.getLogger(__name__)


def mushy_set(y, t, mu_band):
    """Cells with lo <= y(t) <= hi; t must be a time level."""
    lo, hi = mu_band
    level = y.times.level(t)
    values = y.at(level)
    return MushyMask(y.grid, level, (values >= lo) & (values <= hi))


def mushy_set_for(y, t, params, kind=MushyBand.NARROW):
    return mushy_set(y, t, params.band(kind))


def mushy_measures(y, mu_band):
    """Measure of the mushy set at every time level."""
    lo, hi = mu_band
    inside = (y.values >= lo) & (y.values <= hi)
    return inside.sum(axis=1) * y.grid.cell_volume


def coverage(target, mask):
    """measure(target & mask) / measure(target)."""
    if target.grid != mask.grid:
        raise ConfigurationError("target and mask live on different grids", key='grid')
    return float(np.count_nonzero(target.mask & mask.mask) / np.count_nonzero(target.mask))


def target_as_mask(target, level=0):
    return MushyMask(target.grid, level, target.mask)


def hausdorff_distance(a, b):
    """
    Symmetric Hausdorff distance between the cell centers of two masks.

    One empty mask gives float('inf'); two empty masks raise UndefinedDistanceError.
    """
    empty_a, empty_b = not a.mask.any(), not b.mask.any()
    if empty_a and empty_b:
        raise UndefinedDistanceError("Hausdorff distance between two empty sets is undefined")
    if empty_a or empty_b:
        return float('inf')
    centers = a.grid.centers
    u, v = centers[a.mask], centers[b.mask]
    return float(max(directed_hausdorff(u, v)[0], directed_hausdorff(v, u)[0]))


def holder_quotient(y, interior_margin, sample_count, rng=None, u=None, params=None):
    """
    Max over random interior pairs of |y(t,x) - y(s,xi)| / (|t-s|^1/2 + |x-xi|^1/2).

    Returns (quotient, normalizer); the normalizer (||y0||_V + ||u||) * lambda^(-13 alpha / 2)
    is only computed when u and params are given.
    """
    rng = rng if rng is not None else np.random.default_rng()
    grid, times = y.grid, y.times
    interior = np.flatnonzero(grid.distance_to_boundary() >= interior_margin)
    if interior.size == 0:
        logger.warning(f"No cells at distance >= {interior_margin} from the boundary")
        return None, None
    levels_a = rng.integers(times.steps + 1, size=sample_count)
    levels_b = rng.integers(times.steps + 1, size=sample_count)
    cells_a = rng.choice(interior, size=sample_count)
    cells_b = rng.choice(interior, size=sample_count)
    centers = grid.centers
    gap = (np.abs(times.times[levels_a] - times.times[levels_b]) ** 0.5
           + np.linalg.norm(centers[cells_a] - centers[cells_b], axis=-1) ** 0.5)
    jump = np.abs(y.values[levels_a, cells_a] - y.values[levels_b, cells_b])
    distinct = gap > 0
    quotient = float(np.max(jump[distinct] / gap[distinct])) if distinct.any() else 0.0
    normalizer = None
    if u is not None and params is not None:
        normalizer = (v_norm(y.initial, grid) + u.norm()) * params.lam ** (-6.5 * params.alpha)
    return quotient, normalizer


def target_from_intervals(grid, boxes):
    """
    TargetSet of the cells whose centers lie in a union of boxes.

    Each box is [lo, hi] in 1D or [[lo1, hi1], [lo2, hi2]] in 2D.
    """
    centers = grid.centers
    mask = np.zeros(grid.ncells, dtype=bool)
    for box in boxes:
        bounds = np.asarray(box, dtype=float)
        if bounds.size != 2 * grid.dimension:
            raise ConfigurationError(f"target box {box} needs [lo, hi] for each of {grid.dimension} axes",
                                     key='boxes')
        bounds = bounds.reshape(grid.dimension, 2)
        inside = np.all((centers >= bounds[:, 0]) & (centers <= bounds[:, 1]), axis=-1)
        mask |= inside
    return TargetSet(grid, mask)
