"""
Adjoint Service

Backward (dual) solves for the penalized control problem. The backward step is
the transpose of the forward step built from the same frozen coefficients, so
the duality identity

    <y(T), p(T)> - <y(0), p(0)> = int_Sigma u p

holds to round-off on the discrete level.
"""

import logging

import numpy as np

from .forward_service import FrozenOperator
from .models import SpaceTimeField

logger = logging.getLogger(__name__)


def terminal_condition(yT, data):
    """(1/eps) * 1_target * [(yT + mu)^- - (yT - rho - mu)^+] per cell."""
    yT = np.asarray(yT, dtype=float).ravel()
    below = np.maximum(0.0, -(yT + data.mu))
    above = np.maximum(0.0, yT - data.rho - data.mu)
    return np.where(data.target.mask, (below - above) / data.epsilon, 0.0)


def solve_backward(z, pT, params, options=None, operator=None):
    """Adjoint trajectory with p(T) = pT and homogeneous Neumann data."""
    operator = operator or FrozenOperator.from_source(z, params, options)
    pT = np.asarray(pT, dtype=float).ravel()
    return SpaceTimeField(z.grid, z.times, operator.backward(pT))


def boundary_pairing(u, p):
    """int_Sigma u p with u^{n+1} paired with p^n at the boundary cells."""
    face_cells, _, _ = u.grid.boundary_faces
    return u.inner(np.asarray(p.values)[:-1, face_cells])


def duality_check(y0bar, u, p, y):
    """
    Relative residual of <y(T), p(T)> - <y0bar, p(0)> - int_Sigma u p.

    y is the frozen forward trajectory from y0bar under u, solved with the
    same coefficient source as p.
    """
    vol = u.grid.cell_volume
    y0bar = np.asarray(y0bar, dtype=float).ravel()
    terminal = vol * float(np.dot(y.final, p.final))
    initial = vol * float(np.dot(y0bar, p.initial))
    boundary = boundary_pairing(u, p)
    scale = abs(terminal) + abs(initial) + abs(boundary)
    if scale == 0.0:
        return 0.0
    return abs(terminal - initial - boundary) / scale


def transpose_probes(operator, rng, count=20):
    """
    Worst relative mismatch over `count` random probes of

        <Phi(u=0, y0=a)(T), pT> = <a, p(0)>    (whole trajectory)
        <M_n^-1 V v, w> = <v, M_n^-1 V w>       (one step n, drawn at random)
    """
    grid, times = operator.grid, operator.times
    vol = grid.cell_volume
    zero = np.zeros((times.steps, grid.nfaces))
    worst = 0.0
    for _ in range(count):
        a = rng.standard_normal(grid.ncells)
        pT = rng.standard_normal(grid.ncells)
        lhs = vol * float(np.dot(operator.forward(a, zero)[-1], pT))
        rhs = vol * float(np.dot(a, operator.backward(pT)[0]))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs) + abs(rhs), 1e-300))

        n = int(rng.integers(times.steps))
        v = rng.standard_normal(grid.ncells)
        w = rng.standard_normal(grid.ncells)
        forward_step = operator.solve(n, vol * v)
        if operator.backward_is_transposed:
            backward_step = operator.solve(n, vol * w)
        else:
            backward_step = w - times.dt / vol * (operator.stiffness(n) @ w)
        lhs = vol * float(np.dot(forward_step, w))
        rhs = vol * float(np.dot(v, backward_step))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs) + abs(rhs), 1e-300))
    logger.debug(f"Adjoint transpose probes: worst relative mismatch {worst:.3e}")
    return worst
