"""
Enthalpy Service

The enthalpy map beta, the smoothed conductivity h_lambda (through the cubic
Hermite transitions g_lambda), the bump mollifier and the space-time mollified
coefficient H_lambda(z)(t, x).
"""

import logging
import math
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator

from .exceptions import DomainError
from .models import MollifierSpec, SpaceTimeField

logger = logging.getLogger(__name__)

# Points evaluated per interpolation batch when building a whole coefficient field.
_BATCH_POINTS = 2_000_000


def beta(r, params):
    """
    Enthalpy: k1*r below 0, flat 0 on [0, rho), k2*(r - rho) from rho on.
    Works elementwise on arrays.
    """
    r = np.asarray(r, dtype=float)
    out = np.where(r < 0, params.k1 * r, 0.0)
    out = np.where(r >= params.rho, params.k2 * (r - params.rho), out)
    return out if out.ndim else float(out)


def _hermite(s):
    return s * s * (3.0 - 2.0 * s)


def _g_unchecked(r, params):
    a = params.width
    left = params.k1 + (a - params.k1) * _hermite(np.clip((r + a) / a, 0.0, 1.0))
    right = a + (params.k2 - a) * _hermite(np.clip((r - params.rho) / a, 0.0, 1.0))
    return np.where(r < 0, left, np.where(r > params.rho, right, a))


def g_lambda(r, params):
    """
    C1 transition on [-lambda^alpha, rho + lambda^alpha].

    Two zero-slope cubic Hermite arcs, (-a, k1) -> (0, a) and (rho, a) -> (rho + a, k2)
    with a = lambda^alpha, joined by the flat mushy value a on [0, rho].
    """
    r = np.asarray(r, dtype=float)
    a = params.width
    tol = 1e-12 * max(1.0, params.rho + a)
    if np.any(r < -a - tol) or np.any(r > params.rho + a + tol):
        raise DomainError(f"g_lambda is defined on [{-a}, {params.rho + a}]")
    out = _g_unchecked(r, params)
    return out if out.ndim else float(out)


def g_lambda_slope_bound(params):
    return 1.5 * params.k_star / params.width


def h_lambda(r, params):
    """Smooth approximation of beta': k1 in the solid, k2 in the liquid, g_lambda in between."""
    r = np.asarray(r, dtype=float)
    a = params.width
    out = np.where(r < -a, params.k1, np.where(r > params.rho + a, params.k2, _g_unchecked(r, params)))
    return out if out.ndim else float(out)


def _bump(radius_sq):
    radius_sq = np.asarray(radius_sq, dtype=float)
    inside = radius_sq < 1.0
    safe = np.where(inside, 1.0 - radius_sq, 1.0)
    return np.where(inside, np.exp(-1.0 / safe), 0.0)


@lru_cache(maxsize=None)
def mollifier_normalization(dimension):
    """1 / integral of exp(-1/(1-|x|^2)) over the unit ball, by adaptive quadrature."""
    if dimension == 1:
        total, _ = integrate.quad(lambda x: float(_bump(x * x)), -1.0, 1.0, epsabs=1e-14, epsrel=1e-12)
    elif dimension == 2:
        radial, _ = integrate.quad(lambda r: r * float(_bump(r * r)), 0.0, 1.0, epsabs=1e-14, epsrel=1e-12)
        total = 2.0 * math.pi * radial
    else:
        raise DomainError(f"mollifier dimension must be 1 or 2, got {dimension}")
    return 1.0 / total


def mollifier_spec(dimension, quadrature_order=8, time_samples=4):
    return MollifierSpec(dimension, mollifier_normalization(dimension), quadrature_order, time_samples)


def mollifier_weight(xi, spec):
    """Standard mollifier C*exp(-1/(1-|xi|^2)) inside the unit ball, 0 outside."""
    xi = np.asarray(xi, dtype=float)
    if spec.dimension == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
        radius_sq = xi * xi
    else:
        radius_sq = np.sum(xi * xi, axis=-1)
    out = spec.normalization * _bump(radius_sq)
    return out if out.ndim else float(out)


@lru_cache(maxsize=None)
def _xi_rule(dimension, order, normalization):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    mesh = np.meshgrid(*([nodes] * dimension), indexing='ij')
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    wmesh = np.meshgrid(*([weights] * dimension), indexing='ij')
    w = np.prod(np.stack([m.ravel() for m in wmesh], axis=-1), axis=-1)
    w = w * normalization * _bump(np.sum(points * points, axis=-1))
    keep = w > 0
    points, w = points[keep], w[keep]
    # renormalized so the discrete average is an exact convex combination
    return points, w / w.sum()


def mollifier_quadrature(spec):
    """Tensor Gauss-Legendre nodes in the unit ball with mollifier weights summing to 1."""
    return _xi_rule(spec.dimension, spec.quadrature_order, spec.normalization)


def mollifier_integral(spec):
    """Integral of the normalized mollifier, by adaptive quadrature (should be 1)."""
    if spec.dimension == 1:
        total, _ = integrate.quad(lambda x: mollifier_weight(x, spec), -1.0, 1.0, epsabs=1e-14, epsrel=1e-12)
        return total
    radial, _ = integrate.quad(lambda r: r * mollifier_weight(np.array([r, 0.0]), spec), 0.0, 1.0,
                               epsabs=1e-14, epsrel=1e-12)
    return 2.0 * math.pi * radial


def field_interpolator(z):
    """
    Multilinear interpolant of z over (t, cell centers), clamped in time beyond T
    and to the nearest cell center outside the center hull.
    """
    grid = z.grid
    axes = (z.times.times,) + grid.axis_centers
    table = z.values.reshape((z.times.steps + 1,) + grid.shape)
    interpolator = RegularGridInterpolator(axes, table, method='linear', bounds_error=False, fill_value=None)
    lower = np.array([a[0] for a in axes])
    upper = np.array([a[-1] for a in axes])

    def evaluate(points):
        points = np.clip(points, lower, upper)
        return interpolator(points)

    return evaluate


def _time_window(t, horizon, lam, dt, samples):
    end = min(t + lam, horizon)
    truncated = t + lam > horizon
    if end <= t:
        return np.array([t]), np.array([1.0]), truncated
    count = max(samples, int(math.ceil(samples * (end - t) / dt)))
    s = t + (np.arange(count) + 0.5) * (end - t) / count
    return s, np.full(count, 1.0 / count), truncated


def _coefficient_at(evaluate, params, spec, horizon, dt, t_values, x_values):
    """H_lambda at the cartesian product of times t_values and points x_values."""
    xi, w_xi = mollifier_quadrature(spec)
    out = np.empty((len(t_values), len(x_values)))
    truncated = 0
    shifted = x_values[:, None, :] - params.lam * xi[None, :, :]
    for row, t in enumerate(t_values):
        s, w_s, cut = _time_window(t, horizon, params.lam, dt, spec.time_samples)
        truncated += int(cut)
        n_s, n_x, n_xi = len(s), len(x_values), len(xi)
        points = np.empty((n_s, n_x, n_xi, 1 + spec.dimension))
        points[..., 0] = s[:, None, None]
        points[..., 1:] = shifted[None, :, :, :]
        h = h_lambda(evaluate(points.reshape(-1, 1 + spec.dimension)), params).reshape(n_s, n_x, n_xi)
        out[row] = np.einsum('s,sxq,q->x', w_s, h, w_xi)
    return out, truncated


def mollified_coefficient(z, t, x, params, spec):
    """
    H_lambda(z)(t, x) = (1/lambda) int_t^{t+lambda} ds int h_lambda(z(s, x - lambda xi)) phi(xi) dxi.

    The time window is truncated at T when lambda > T - t.
    """
    horizon = z.times.horizon
    if t < 0 or t > horizon * (1 + 1e-12):
        raise DomainError(f"t={t} outside [0, {horizon}]")
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, spec.dimension)
    values, _ = _coefficient_at(field_interpolator(z), params, spec, horizon, z.times.dt, [t], x)
    return float(values[0, 0])


def coefficient_field(z, params, spec):
    """
    H_lambda(z) at every cell center and at the time levels t^0 .. t^{N-1}.

    Returns (values of shape (steps, ncells), number of truncated time windows).
    """
    grid, times = z.grid, z.times
    evaluate = field_interpolator(z)
    xi, _ = mollifier_quadrature(spec)
    s_count = max(spec.time_samples, int(math.ceil(spec.time_samples * params.lam / times.dt)))
    per_level = max(1, grid.ncells * len(xi) * s_count)
    batch = max(1, _BATCH_POINTS // per_level)
    levels = times.times[:-1]
    out = np.empty((times.steps, grid.ncells))
    truncated = 0
    for start in range(0, len(levels), batch):
        chunk = levels[start:start + batch]
        out[start:start + len(chunk)], cut = _coefficient_at(
            evaluate, params, spec, times.horizon, times.dt, chunk, grid.centers)
        truncated += cut
    if truncated:
        logger.warning(f"mollification window truncated at T for {truncated} time levels (lambda={params.lam})")
    return out, truncated


def temperature_field(y, params):
    """theta = beta(y) on every level of y."""
    return SpaceTimeField(y.grid, y.times, beta(y.values, params))
