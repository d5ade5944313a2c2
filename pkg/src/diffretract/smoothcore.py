"""Smooth steps, cutoffs, the chi reparametrization, finite differences and
disk quadrature.

The scalar kernels are compiled with numba so that flow integrators can call
them from inside their own compiled loops; the public functions below are thin
vectorized wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = [
    "transition",
    "ramp_integral",
    "SmoothStep",
    "smooth_step",
    "cutoff_rho",
    "cutoff_rho_grad",
    "gamma_flatten",
    "gamma_flatten_grad",
    "gamma_gauge",
    "chi",
    "chi_dx",
    "chi_inverse",
    "beta1",
    "beta2",
    "clock_pair",
    "DiskGrid",
    "disk_samples",
    "MULTI_INDICES",
    "fd_derivatives",
    "sobolev3_sq",
]

# ---------------------------------------------------------------------------
# scalar kernels

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(40)
_TABLE_CELLS = 4096
_TABLE_H = 0.5 / _TABLE_CELLS


def _transition_np(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inner = (x > 0.0) & (x < 1.0)
    xi = x[inner]
    a = np.exp(-1.0 / xi)
    b = np.exp(-1.0 / (1.0 - xi))
    out[inner] = a / (a + b)
    out[x >= 1.0] = 1.0
    return out


def _build_ramp_table():
    # Tabulate R = Psi1 / psi, which is smooth and positive; Psi1 = R * psi
    # then inherits positivity and keeps full relative accuracy near 0.
    xs = np.arange(_TABLE_CELLS + 1) * _TABLE_H
    # per-cell Gauss-Legendre, accumulated
    u = xs[:-1, None] + 0.5 * (_GL_NODES[None, :] + 1.0) * _TABLE_H
    cells = 0.5 * _TABLE_H * (_transition_np(u) * _GL_WEIGHTS[None, :]).sum(axis=1)
    vals = np.concatenate([[0.0], np.cumsum(cells)])
    psi = _transition_np(xs)
    ratio = xs * xs * (1.0 - 2.0 * xs)
    slope = 2.0 * xs - 6.0 * xs * xs
    ok = xs >= 0.0025  # below this Psi1 < 1e-170 and psi underflows soon
    ratio[ok] = vals[ok] / psi[ok]
    xo = xs[ok]
    slope[ok] = 1.0 - ratio[ok] * (1.0 - psi[ok]) * (1.0 / xo ** 2 + 1.0 / (1.0 - xo) ** 2)
    return ratio, slope


_RAMP_VALS, _RAMP_SLOPES = _build_ramp_table()


@njit(cache=True)
def _psi(x):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    # a / (a + b) = 1 / (1 + b / a) with a = exp(-1/x), b = exp(-1/(1-x))
    return 1.0 / (1.0 + np.exp((1.0 - 2.0 * x) / (x * (1.0 - x))))


_TABLE_INV = 1.0 / _TABLE_H


@njit(cache=True)
def _ramp_half(x, vals, slopes):
    # integral of psi on [0, x] for 0 <= x <= 1/2 (cubic Hermite on the ratio table)
    fx = x * _TABLE_INV
    k = int(fx)
    if k >= _TABLE_CELLS:
        k = _TABLE_CELLS - 1
    s = fx - k
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    ratio = (h00 * vals[k] + h10 * _TABLE_H * slopes[k]
             + h01 * vals[k + 1] + h11 * _TABLE_H * slopes[k + 1])
    return ratio * _psi(x)


@njit(cache=True)
def _ramp(x, vals, slopes):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return x - 0.5
    if x <= 0.5:
        return _ramp_half(x, vals, slopes)
    return x - 0.5 + _ramp_half(1.0 - x, vals, slopes)


@njit(cache=True)
def _unit_step(v, m, vals, slopes):
    """Plateau-derivative step on [0, 1] with ramp fraction m."""
    if v <= 0.0:
        return 0.0
    if v >= 1.0:
        return 1.0
    iz = 1.0 / (1.0 - m)
    if v <= m:
        return m * _ramp(v / m, vals, slopes) * iz
    if v >= 1.0 - m:
        return 1.0 - m * _ramp((1.0 - v) / m, vals, slopes) * iz
    return (0.5 * m + (v - m)) * iz


@njit(cache=True)
def _unit_slope(v, m):
    if v <= 0.0 or v >= 1.0:
        return 0.0
    z = 1.0 - m
    if v < m:
        return _psi(v / m) / z
    if v > 1.0 - m:
        return _psi((1.0 - v) / m) / z
    return 1.0 / z


@njit(cache=True)
def step_scalar(u, lo, hi, m):
    return _unit_step((u - lo) / (hi - lo), m, _RAMP_VALS, _RAMP_SLOPES)


@njit(cache=True)
def step_slope_scalar(u, lo, hi, m):
    return _unit_slope((u - lo) / (hi - lo), m) / (hi - lo)


@njit(cache=True)
def rho_scalar(r2):
    """Radial cutoff as a function of |y|^2: 1 on |y| <= 1, 0 on |y| >= 2."""
    return 1.0 - step_scalar(r2, 1.0, 4.0, 0.1)


@njit(cache=True)
def rho_slope_scalar(r2):
    return -step_slope_scalar(r2, 1.0, 4.0, 0.1)


@njit(cache=True)
def _step_many(u, lo, hi, m, out):
    for i in range(u.size):
        out[i] = step_scalar(u[i], lo, hi, m)


@njit(cache=True)
def _slope_many(u, lo, hi, m, out):
    for i in range(u.size):
        out[i] = step_slope_scalar(u[i], lo, hi, m)


@njit(cache=True)
def _ramp_many(x, out):
    for i in range(x.size):
        out[i] = _ramp(x[i], _RAMP_VALS, _RAMP_SLOPES)


def transition(x):
    """C-infinity transition: 0 for x <= 0, 1 for x >= 1."""
    return _transition_np(x)


def ramp_integral(x):
    """Integral of :func:`transition` over [0, x] (x - 1/2 for x >= 1)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size)
    _ramp_many(np.ascontiguousarray(x.ravel()), out)
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# steps and cutoffs


@dataclass(frozen=True)
class SmoothStep:
    """Increasing C-infinity step from 0 at ``lo`` to 1 at ``hi``.

    The derivative is a normalized bump: it ramps up over the first
    ``plateau_fraction`` of the transition, is constant on the middle part and
    ramps down over the last fraction. The maximal slope is therefore
    ``1 / (w (1 - m))`` with ``w = hi - lo``.
    """

    lo: float
    hi: float
    plateau_fraction: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError(f"invalid step interval [{self.lo}, {self.hi}]")
        if not 0.0 < self.plateau_fraction < 0.5:
            raise ValueError("plateau_fraction must lie in (0, 0.5)")

    @property
    def max_slope(self) -> float:
        return 1.0 / ((self.hi - self.lo) * (1.0 - self.plateau_fraction))

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        out = np.empty(u.size)
        _step_many(np.ascontiguousarray(u.ravel()), self.lo, self.hi,
                   self.plateau_fraction, out)
        return out.reshape(u.shape) if u.ndim else float(out[0])

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        out = np.empty(u.size)
        _slope_many(np.ascontiguousarray(u.ravel()), self.lo, self.hi,
                    self.plateau_fraction, out)
        return out.reshape(u.shape) if u.ndim else float(out[0])


def smooth_step(spec: SmoothStep, u):
    return spec(u)


_RHO = SmoothStep(1.0, 4.0, 0.1)


def _as_planar(y):
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != 2:
        raise ValueError(f"expected planar points with last axis 2, got {y.shape}")
    return y


def cutoff_rho(y):
    """Cutoff equal to 1 on the closed unit disk and 0 outside B(2)."""
    y = _as_planar(y)
    return 1.0 - _RHO((y * y).sum(axis=-1))


def cutoff_rho_grad(y):
    y = _as_planar(y)
    return -2.0 * _RHO.derivative((y * y).sum(axis=-1))[..., None] * y


def _radial_cut(y, inner, outer):
    y = _as_planar(y)
    r = np.sqrt((y * y).sum(axis=-1))
    step = SmoothStep(inner, outer, 0.1)
    return r, step


def gamma_flatten(eps: float, y):
    """1 on B(eps/2), 0 outside B(eps); gradient norm below 3/eps."""
    if not 0.0 < eps <= 0.5:
        raise ValueError(f"eps must lie in (0, 1/2], got {eps}")
    r, step = _radial_cut(y, 0.5 * eps, eps)
    return 1.0 - step(r)


def gamma_flatten_grad(eps: float, y):
    if not 0.0 < eps <= 0.5:
        raise ValueError(f"eps must lie in (0, 1/2], got {eps}")
    y = _as_planar(y)
    r, step = _radial_cut(y, 0.5 * eps, eps)
    slope = step.derivative(r)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[..., None] > 0, y / r[..., None], 0.0)
    return -slope[..., None] * unit


def gamma_gauge(eps1: float, y):
    """1 on B(eps1/2), 0 outside B(3 eps1/4)."""
    if not 0.0 < eps1 <= 1.0:
        raise ValueError(f"eps1 must lie in (0, 1], got {eps1}")
    r, step = _radial_cut(y, 0.5 * eps1, 0.75 * eps1)
    return 1.0 - step(r)


# ---------------------------------------------------------------------------
# chi


def _chi_delta(r):
    return 0.25 * r * 0.2 / (r ** 4 + 0.2 ** 4) ** 0.25


def _chi_parts(r):
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r) & (r > 0)):
        raise ValueError(f"chi needs r > 0, got {r}")
    d = _chi_delta(r)
    integral = 1.0 - 3.0 * d
    c = 1.0 + (r - 1.0) / integral
    return d, integral, c


def _chi_bump_integral(x, d, integral):
    # integral over [0, x] of the plateau bump supported on [d, 1 - d]
    x = np.asarray(x, dtype=float)
    lo = d * ramp_integral((x - d) / d)
    hi = integral - d * ramp_integral((1.0 - d - x) / d)
    mid = 0.5 * d + (x - 2.0 * d)
    return np.where(x <= 2.0 * d, lo, np.where(x >= 1.0 - 2.0 * d, hi, mid))


def _chi_bump(x, d):
    x = np.asarray(x, dtype=float)
    return transition((x - d) / d) * transition((1.0 - d - x) / d)


def chi(x, r):
    """Diffeomorphism [0,1] -> [0,r] with unit slope near both ends.

    ``chi(x, 1) = x`` identically. ``r`` may be an array broadcasting
    against ``x``.
    """
    d, integral, c = _chi_parts(r)
    x = np.asarray(x, dtype=float)
    if np.any((x < 0.0) | (x > 1.0)):
        raise ValueError("chi is defined for x in [0, 1]")
    if np.all(r == 1.0):
        return x.copy() if x.ndim else float(x)
    out = x + (c - 1.0) * _chi_bump_integral(x, d, integral)
    out = np.where(x >= 1.0, r, out)
    return out if out.ndim else float(out)


def chi_dx(x, r):
    d, integral, c = _chi_parts(r)
    out = 1.0 + (c - 1.0) * _chi_bump(x, d)
    return out if np.ndim(out) else float(out)


def chi_collar(r) -> float:
    """Width of the end neighbourhoods on which chi has slope exactly 1."""
    d = _chi_parts(r)[0]
    return d if np.ndim(d) else float(d)


def chi_inverse(s, r: float, tol: float = 1e-15):
    """Inverse of ``chi(., r)`` by safeguarded Newton iteration."""
    d, integral, c = _chi_parts(r)
    s = np.asarray(s, dtype=float)
    span = 1e-12 * max(1.0, r)
    if np.any((s < -span) | (s > r + span)):
        raise ValueError(f"chi_inverse needs s in [0, {r}]")
    s = np.clip(s, 0.0, r)
    if r == 1.0:
        return s.copy() if s.ndim else float(s)
    lo = np.zeros_like(s)
    hi = np.ones_like(s)
    x = s / r
    for _ in range(100):
        fx = chi(x, r) - s
        lo = np.where(fx < 0, x, lo)
        hi = np.where(fx >= 0, x, hi)
        step = fx / chi_dx(x, r)
        xn = x - step
        bad = (xn <= lo) | (xn >= hi)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        done = np.abs(xn - x) <= tol
        x = xn
        if np.all(done):
            break
    x = np.where(s >= r, 1.0, np.where(s <= 0.0, 0.0, x))
    return x if x.ndim else float(x)


# ---------------------------------------------------------------------------
# clocks

_BETA1 = SmoothStep(0.05, 0.45, 0.2)
_BETA2 = SmoothStep(0.55, 0.95, 0.2)


def beta1(t):
    return _BETA1(t)


def beta2(t):
    return _BETA2(t)


def clock_pair(t: float):
    """Split global time into ``("first", beta1(t))`` or ``("second", beta2(t))``.

    ``t = 1/2`` returns ``("second", 0.0)``, equivalent to ``("first", 1.0)``.
    """
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t < 0.5:
        return "first", float(_BETA1(t))
    return "second", float(_BETA2(t))


# ---------------------------------------------------------------------------
# quadrature and finite differences


@dataclass(frozen=True)
class DiskGrid:
    """Tensor Gauss-Legendre (radial) x uniform (angular) rule on B(radius).

    Weights include the polar Jacobian ``r``.
    """

    n_radial: int = 48
    n_angular: int = 64
    radius: float = 1.0
    derivative_step: float = 1e-2
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_radial < 1 or self.n_angular < 1 or self.radius <= 0:
            raise ValueError("invalid disk grid")
        g, w = np.polynomial.legendre.leggauss(self.n_radial)
        r = 0.5 * self.radius * (g + 1.0)
        wr = 0.5 * self.radius * w * r
        th = 2.0 * np.pi * np.arange(self.n_angular) / self.n_angular
        wt = 2.0 * np.pi / self.n_angular
        rr, tt = np.meshgrid(r, th, indexing="ij")
        nodes = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1).reshape(-1, 2)
        weights = np.repeat(wr * wt, self.n_angular)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def radial_nodes(self):
        g, w = np.polynomial.legendre.leggauss(self.n_radial)
        r = 0.5 * self.radius * (g + 1.0)
        return list(zip(r, 0.5 * self.radius * w * r))

    @property
    def angular_nodes(self):
        th = 2.0 * np.pi * np.arange(self.n_angular) / self.n_angular
        return [(a, 2.0 * np.pi / self.n_angular) for a in th]

    def integrate(self, values) -> float:
        return float(np.tensordot(self.weights, np.asarray(values), axes=(0, 0)))


def disk_samples(n: int, radius: float) -> np.ndarray:
    """Deterministic, evenly spread points of the open disk B(radius)."""
    k = np.arange(n) + 0.5
    r = radius * np.sqrt(k / n)
    th = k * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


MULTI_INDICES = [(i, k - i) for k in range(4) for i in range(k, -1, -1)]

_OFFSETS = np.arange(-2, 3)
# integer weights with separate denominators so that constants cancel exactly
_W1D = {
    0: (np.array([0.0, 0.0, 1.0, 0.0, 0.0]), 1.0),
    1: (np.array([1.0, -8.0, 0.0, 8.0, -1.0]), 12.0),
    2: (np.array([-1.0, 16.0, -30.0, 16.0, -1.0]), 12.0),
    3: (np.array([-1.0, 2.0, 0.0, -2.0, 1.0]), 2.0),
}


def fd_derivatives(fn, points, h: float = 1e-2, order: int = 3):
    """Central finite-difference partials of ``fn`` at ``points``.

    Parameters
    ----------
    fn : callable
        Maps an ``(m, 2)`` array to ``(m,)`` or ``(m, k)`` values.
    points : array_like, shape (n, 2) or DiskGrid
        Evaluation nodes; a DiskGrid contributes its nodes and step.
    h : float
        Stencil step (ignored when ``points`` is a DiskGrid).
    order : int
        Highest total derivative order, at most 3.

    Returns
    -------
    dict
        Maps each multi-index ``(a1, a2)`` with ``a1 + a2 <= order`` to an
        array of derivatives at the nodes. Orders 1 and 2 are fourth-order
        accurate, order 3 second-order accurate. All partials come from one
        5x5 tensor stencil per node.
    """
    if isinstance(points, DiskGrid):
        h = points.derivative_step * points.radius
        points = points.nodes
    if not 0 <= order <= 3:
        raise ValueError("order must be between 0 and 3")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    ox, oy = np.meshgrid(_OFFSETS, _OFFSETS, indexing="ij")
    offs = np.stack([ox.ravel(), oy.ravel()], axis=-1) * h
    stencil = (pts[:, None, :] + offs[None, :, :]).reshape(-1, 2)
    try:
        vals = np.asarray(fn(stencil), dtype=float)
    except Exception as exc:  # attribute the failure to a stencil point
        raise _locate_failure(fn, stencil, exc) from exc
    bad = ~np.isfinite(vals.reshape(vals.shape[0], -1)).all(axis=1)
    if bad.any():
        raise ValueError(f"field not finite at stencil point {stencil[np.argmax(bad)]}")
    vals = vals.reshape((pts.shape[0], 5, 5) + vals.shape[1:])
    out = {}
    for a in MULTI_INDICES:
        if sum(a) > order:
            continue
        (wx, dx), (wy, dy) = _W1D[a[0]], _W1D[a[1]]
        d = np.einsum("i,j,nij...->n...", wx, wy, vals)
        out[a] = d / (dx * dy * h ** sum(a))
    return out


def _locate_failure(fn, stencil, exc):
    for p in stencil:
        try:
            fn(p[None, :])
        except Exception as inner:
            return ValueError(f"field evaluation failed at stencil point {p}: {inner}")
    return ValueError(f"field evaluation failed: {exc}")


def sobolev3_sq(fn, grid: DiskGrid | None = None) -> float:
    """Sum over |alpha| <= 3 of the integral of |d^alpha fn|^2 over the grid disk."""
    grid = grid or DiskGrid()
    ders = fd_derivatives(fn, grid)
    total = 0.0
    for d in ders.values():
        sq = d * d
        if sq.ndim > 1:
            sq = sq.reshape(sq.shape[0], -1).sum(axis=1)
        total += grid.integrate(sq)
    return total
