"""
Grid Service

Norms, boundary traces, interpolation and the finite-volume operators shared
by the forward and adjoint solvers.
"""

import numpy as np
from scipy import sparse

from .enthalpy_service import field_interpolator
from .exceptions import ConfigurationError
from .models import BoundaryControl, SpaceTimeField, SpatialGrid, TimeGrid


def make_grid(extents, cells):
    return SpatialGrid(tuple(extents), tuple(cells))


def make_times(horizon, steps):
    return TimeGrid(float(horizon), int(steps))


def l2_norm_space(f, grid):
    """sqrt(sum cell_volume * f^2) on one time level."""
    f = np.asarray(f, dtype=float).ravel()
    return float(np.sqrt(grid.cell_volume * np.dot(f, f)))


def gradient(f, grid):
    """Cell gradients: central differences inside, second-order one-sided at the boundary."""
    table = np.asarray(f, dtype=float).reshape(grid.shape)
    parts = []
    for axis, h in enumerate(grid.spacing):
        parts.append(np.gradient(table, h, axis=axis, edge_order=2).ravel())
    return np.stack(parts, axis=-1)


def v_norm(f, grid):
    """Discrete H1 norm (|f|_2^2 + |grad f|_2^2)^(1/2)."""
    grad = gradient(f, grid)
    grad_sq = grid.cell_volume * float(np.sum(grad * grad))
    return float(np.sqrt(l2_norm_space(f, grid) ** 2 + grad_sq))


def l2_norm_spacetime(values, grid, times):
    """Discrete L2(Q) norm over the levels t^1 .. t^N."""
    values = np.asarray(getattr(values, 'values', values), dtype=float)
    return float(np.sqrt(times.dt * grid.cell_volume * np.sum(values[1:] ** 2)))


def boundary_trace(w, grid):
    """Values of a cell field on the boundary faces (boundary-cell values)."""
    face_cells, _, _ = grid.boundary_faces
    return np.asarray(w, dtype=float).ravel()[face_cells]


def boundary_integral(u, w, t):
    """
    Sum over faces of face_area * u * w at time t (u is read at the step ending at t).

    u is a BoundaryControl; w is a cell field whose boundary-cell values are used.
    """
    grid = u.grid
    w = np.asarray(w, dtype=float).ravel()
    if w.size != grid.ncells:
        raise ConfigurationError(f"trace field has {w.size} cells, control grid has {grid.ncells}", key='grid')
    n = u.times.level(t)
    row = u.values[max(n - 1, 0)]
    _, face_areas, _ = grid.boundary_faces
    return float(np.sum(face_areas * row * boundary_trace(w, grid)))


def extend_field(z, s, x):
    """
    z at (s, x): multilinear inside [0, T] x hull of cell centers, clamped in time
    beyond T and to the nearest boundary value outside.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    point = np.concatenate([[float(s)], x]).reshape(1, -1)
    return float(field_interpolator(z)(point)[0])


def control_from_function(grid, times, flux):
    """BoundaryControl sampled from flux(t, face_index) at t^1 .. t^N."""
    t = times.times[1:, None]
    faces = np.arange(grid.nfaces)[None, :]
    values = np.broadcast_to(flux(t, faces), (times.steps, grid.nfaces))
    return BoundaryControl(grid, times, np.array(values, dtype=float))


def field_from_function(grid, times, func):
    """SpaceTimeField sampled from func(t, centers)."""
    values = np.stack([np.asarray(func(t, grid.centers), dtype=float).ravel() for t in times.times])
    return SpaceTimeField(grid, times, values)


def incidence_matrix(grid):
    """Signed face-to-cell incidence G (interior faces x cells) and transmissibilities."""
    left, right, weight = grid.interior_faces
    nf = left.size
    rows = np.concatenate([np.arange(nf), np.arange(nf)])
    cols = np.concatenate([left, right])
    data = np.concatenate([np.ones(nf), -np.ones(nf)])
    return sparse.csr_matrix((data, (rows, cols)), shape=(nf, grid.ncells)), weight


def stiffness_matrix(grid, face_coefficients):
    """A = G^T diag(transmissibility * kappa) G: the flux-form diffusion operator."""
    incidence, weight = incidence_matrix(grid)
    return (incidence.T @ sparse.diags(weight * face_coefficients) @ incidence).tocsc()


def boundary_matrix(grid):
    """B (cells x faces) scattering face_area * flux into boundary cells."""
    face_cells, face_areas, _ = grid.boundary_faces
    return sparse.csr_matrix((face_areas, (face_cells, np.arange(grid.nfaces))), shape=(grid.ncells, grid.nfaces))


def face_average(cell_values, grid):
    """Arithmetic mean of cell values across every interior face; works on stacked levels."""
    left, right, _ = grid.interior_faces
    cell_values = np.asarray(cell_values, dtype=float)
    return 0.5 * (cell_values[..., left] + cell_values[..., right])


def discrete_laplacian(grid):
    """Unit-coefficient finite-volume Laplacian with homogeneous Neumann boundary."""
    left, _, _ = grid.interior_faces
    return -stiffness_matrix(grid, np.ones(left.size)) / grid.cell_volume
