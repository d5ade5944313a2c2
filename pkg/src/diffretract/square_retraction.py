"""Retraction of boundary-fixing diffeomorphisms of the unit square.

Class F maps are the identity near the whole boundary of ``[0, 1]^2``. Class E
maps are the identity near the left, bottom and top edges and satisfy
``df e1 = e1`` near the right edge. A class E map ``f`` is deformed to the
identity through its pushforward field ``f_* e1``: the field is contracted to
``e1`` in logarithmic coordinates and integral curves of the contracted field,
started on the left edge and reparametrized by ``chi`` so that they reach the
right edge at parameter 1, define ``E_t(f)``. Composing with the boundary
correction ``p`` gives the class F retraction ``F_t = p o E_t``.

Integral curves are computed in one of two ways:

* image coordinates (default): the field ``Phi_t`` is evaluated through the
  grid-unwrapped logarithm of ``f_* e1``, which needs ``f^{-1}``;
* preimage coordinates (maps with ``pullback = True``): writing the curve as
  ``f(z(s))`` turns ``d/ds f(z) = Phi_t(f(z))`` into
  ``z' = df(z)^{-1} Phi_t(f(z))``; the angle of ``df(z) e1`` is continued along
  the curve. This avoids inverting ``f`` and is used for maps obtained from
  sphere diffeomorphisms, whose inverse is expensive.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.interpolate import CubicSpline

from .diffeo_engine import InversionError, newton_invert
from .smoothcore import SmoothStep, chi, chi_collar

CENTER = np.array([0.5, 0.5])
E1 = np.array([1.0, 0.0])
T_MAX = 100.0
DEFAULT_STEPS = 256
LIFT_GRID = 128
LIFT_GRID_CAP = 1024
# traces closer than this to the identity are treated as the identity
IDENTITY_TOL = 1e-14


class SquareClassError(ValueError):
    """A map violates the class F / E conditions (collar, monotone trace, orientation)."""


class DegenerateFieldError(ValueError):
    """A pushforward field vanishes, so the map is not a diffeomorphism."""


class LiftResolutionError(ValueError):
    """The angle of a field changes too fast for the sampling resolution."""


class ExitTimeError(RuntimeError):
    """An integral curve failed to reach the right edge before ``T_MAX``."""


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _as_points(u):
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != 2:
        raise ValueError(f"expected planar points of shape (..., 2), got {u.shape}")
    return u


def _fd_stencil(u, h):
    h = np.asarray(h, dtype=float).reshape(-1, 1)
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    return np.concatenate([u + h * e1, u - h * e1, u + h * e2, u - h * e2])


def _fd_assemble(vals, n, h):
    h = np.asarray(h, dtype=float).reshape(-1, 1)
    xp, xm, yp, ym = (vals[k * n:(k + 1) * n] for k in range(4))
    return np.stack([(xp - xm) / (2 * h), (yp - ym) / (2 * h)], axis=-1)


# ---------------------------------------------------------------------------
# interval maps


class IntervalMap:
    """Increasing self-map of [0, 1] that is the identity near both ends.

    Parameters
    ----------
    fn : callable
        Vectorized map.
    derivative : callable, optional
        Its derivative; central differences otherwise.
    collar : float
        Width of the end neighbourhoods on which the map is the identity.
    """

    def __init__(self, fn, derivative=None, collar: float = 0.0, identity: bool = False,
                 approx: "IntervalMap | None" = None, check_nodes=None):
        self._fn = fn
        self._deriv = derivative
        self.collar = float(collar)
        self.is_identity = identity
        # a cheap approximation used to seed inversion of an expensive fn
        self.approx = approx
        self.check_nodes = check_nodes

    @classmethod
    def identity(cls) -> "IntervalMap":
        return cls(lambda y: np.array(y, dtype=float), lambda y: np.ones_like(np.asarray(y, dtype=float)),
                   collar=0.5, identity=True)

    @classmethod
    def from_samples(cls, nodes, values, collar: float = 0.0) -> "IntervalMap":
        """Cubic spline through ``(nodes, values)``, identity outside the nodes.

        The spline is clamped to slope 1 at both ends, so it joins the identity
        with a continuous derivative.
        """
        nodes = np.asarray(nodes, dtype=float)
        values = np.asarray(values, dtype=float)
        if np.max(np.abs(values - nodes)) <= IDENTITY_TOL:
            return cls.identity()
        spline = CubicSpline(nodes, values, bc_type=((1, 1.0), (1, 1.0)))
        dspline = spline.derivative()
        lo, hi = nodes[0], nodes[-1]

        def fn(y):
            y = np.asarray(y, dtype=float)
            inside = (y > lo) & (y < hi)
            return np.where(inside, spline(np.clip(y, lo, hi)), y)

        def deriv(y):
            y = np.asarray(y, dtype=float)
            inside = (y > lo) & (y < hi)
            return np.where(inside, dspline(np.clip(y, lo, hi)), 1.0)

        return cls(fn, deriv, collar=min(lo, 1.0 - hi, collar) if collar else min(lo, 1.0 - hi))

    def __call__(self, y):
        return self._fn(y)

    def derivative(self, y):
        if self._deriv is not None:
            return self._deriv(y)
        y = np.asarray(y, dtype=float)
        h = 1e-6
        return (self._fn(y + h) - self._fn(y - h)) / (2 * h)

    def inverse(self, target, tol: float = 1e-12):
        """Solve ``g(y) = target`` by monotone bisection followed by Newton."""
        target = np.asarray(target, dtype=float)
        if self.is_identity:
            return target.copy()
        if self.approx is not None:
            y = self.approx.inverse(target)
            for _ in range(8):
                res = self(y) - target
                if np.all(np.abs(res) <= tol):
                    return y
                y = np.clip(y - res / self.approx.derivative(y), 0.0, 1.0)
            raise InversionError(f"interval inverse stalled at residual {np.max(np.abs(res)):.3e}")
        lo = np.zeros_like(target)
        hi = np.ones_like(target)
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            below = self(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        y = 0.5 * (lo + hi)
        for _ in range(20):
            res = self(y) - target
            if np.all(np.abs(res) <= tol):
                break
            y = np.clip(y - res / self.derivative(y), lo, hi)
        return y

    def check(self, n: int = 2001):
        """Raise ``SquareClassError`` unless the map is increasing and fixes the collars."""
        y = np.linspace(0.0, 1.0, n) if self.check_nodes is None else np.asarray(self.check_nodes)
        g = self(y)
        if np.any(np.diff(g) <= 0) or np.min(self.derivative(y)) <= 0:
            raise SquareClassError("interval map is not increasing")
        ends = (y <= self.collar) | (y >= 1.0 - self.collar)
        if np.any(np.abs(g[ends] - y[ends]) > 1e-12):
            raise SquareClassError("interval map moves points in its end collars")
        return self


def interval_retraction(g: IntervalMap, t: float) -> IntervalMap:
    """``G_t(g) = (1 - t) g + t id``."""
    if t == 1.0 or g.is_identity:
        return IntervalMap.identity()
    if t == 0.0:
        return g
    return IntervalMap(lambda y: (1.0 - t) * g(y) + t * np.asarray(y, dtype=float),
                       lambda y: (1.0 - t) * g.derivative(y) + t, collar=g.collar)


# ---------------------------------------------------------------------------
# square maps


class SquareMap:
    """Orientation-preserving diffeomorphism of ``[0, 1]^2``.

    Subclasses implement ``forward(u, jac)``. The attributes describe where
    the map is trivial:

    collar : float
        The map is the identity within ``collar`` of the left, bottom and top
        edges, and (class F) of the right edge; class E maps have
        ``df e1 = e1`` there instead.
    identity_radius : float or None
        If set, the map is also the identity outside the disk of this radius
        about the centre of the square.
    """

    class_tag = "F"
    collar = 0.0
    identity_radius = None
    pullback = True
    name = "square map"
    # absolute residual accepted by Newton inversion
    inverse_tol = 1e-12

    def forward(self, u, jac=False):
        raise NotImplementedError

    def evaluate(self, u):
        return self.forward(u, False)[0]

    def jacobian(self, u):
        return self.forward(u, True)[1]

    def field_jacobian(self, u):
        """Jacobian used inside curve integration (may be a cheaper surrogate)."""
        return self.jacobian(u)

    def invert(self, v):
        v = _as_points(v)
        shape = v.shape
        v = v.reshape(-1, 2)
        out = v.copy()
        act = ~self.fixed_zone(v)
        if act.any():
            fj = lambda z: self.forward(z, True)
            tol = self.inverse_tol
            try:
                out[act] = newton_invert(fj, v[act], seed=v[act], tol=tol)
            except InversionError:
                out[act] = newton_invert(fj, v[act], seed_box=(0.0, 1.0), seed_n=32, tol=tol)
        return out.reshape(shape)

    def in_zone(self, u):
        """Points near which the pushforward field is exactly ``e1``."""
        u = np.asarray(u, dtype=float)
        x, y = u[..., 0], u[..., 1]
        w = self.collar
        zone = (x <= w) | (y <= w) | (y >= 1.0 - w) | (x >= 1.0 - w)
        if self.identity_radius is not None:
            zone |= ((u - CENTER) ** 2).sum(axis=-1) >= self.identity_radius ** 2
        return zone

    def fixed_zone(self, u):
        """Points where the map is the identity (a subset of ``in_zone``)."""
        zone = self.in_zone(u)
        if self.class_tag == "E":
            u = np.asarray(u, dtype=float)
            w = self.collar
            right = (u[..., 0] >= 1.0 - w) & (u[..., 1] > w) & (u[..., 1] < 1.0 - w)
            if self.identity_radius is not None:
                right &= ((u - CENTER) ** 2).sum(axis=-1) < self.identity_radius ** 2
            zone &= ~right
        return zone

    def entry_x(self, y):
        """Abscissa up to which the horizontal line at height ``y`` stays in the zone
        (1 when the whole line does)."""
        y = np.asarray(y, dtype=float)
        w = self.collar
        full = (y <= w) | (y >= 1.0 - w)
        x = np.full(y.shape, w)
        if self.identity_radius is not None:
            dy2 = (y - CENTER[1]) ** 2
            r2 = self.identity_radius ** 2
            full |= dy2 >= r2
            x = np.maximum(x, CENTER[0] - np.sqrt(np.maximum(r2 - dy2, 0.0)))
        return np.where(full, 1.0, x)

    def step_scale(self, u):
        """Local length scale of the map, used to adapt curve step sizes."""
        return np.ones(len(u))

    def fd_step(self, u):
        return np.full(len(u), 1e-6)

    def trace_nodes(self, n: int = 257):
        """Heights on which the right-edge trace is tabulated."""
        w = self.collar
        lo, hi = w, 1.0 - w
        if self.identity_radius is not None:
            lo = max(lo, CENTER[1] - self.identity_radius)
            hi = min(hi, CENTER[1] + self.identity_radius)
        return np.linspace(lo, hi, n)

    def trace(self) -> IntervalMap:
        """``g(y) = f^2(1, y)``; the identity for class F maps."""
        if self.class_tag == "F":
            return IntervalMap.identity()

        def fn(y):
            y = np.asarray(y, dtype=float)
            pts = np.stack([np.ones_like(y), y], axis=-1).reshape(-1, 2)
            return self.evaluate(pts)[:, 1].reshape(y.shape)

        def deriv(y):
            y = np.asarray(y, dtype=float)
            pts = np.stack([np.ones_like(y), y], axis=-1).reshape(-1, 2)
            return self.jacobian(pts)[:, 1, 1].reshape(y.shape)

        return IntervalMap(fn, deriv, collar=self.collar)


class IdentitySquare(SquareMap):
    collar = 0.5
    name = "identity"

    def forward(self, u, jac=False):
        u = _as_points(u).copy()
        if not jac:
            return u, None
        return u, np.broadcast_to(np.eye(2), u.shape + (2,)).copy()

    def invert(self, v):
        return _as_points(v).copy()

    def trace(self):
        return IntervalMap.identity()


class ClosedFormSquare(SquareMap):
    """Square map given by a vectorized ``fwd(u, jac) -> (v, J)``."""

    def __init__(self, fwd, class_tag="F", collar=0.1, identity_radius=None, inverse=None,
                 name="square map"):
        if class_tag not in ("F", "E"):
            raise ValueError(f"unknown class tag {class_tag!r}")
        self._fwd = fwd
        self._inv = inverse
        self.class_tag = class_tag
        self.collar = float(collar)
        self.identity_radius = identity_radius
        self.name = name

    def forward(self, u, jac=False):
        u = _as_points(u)
        shape = u.shape
        v, j = self._fwd(u.reshape(-1, 2), jac)
        v = v.reshape(shape)
        return (v, j.reshape(shape + (2,))) if jac else (v, None)

    def invert(self, v):
        if self._inv is not None:
            return self._inv(_as_points(v))
        return super().invert(v)


class ComposedSquare(SquareMap):
    """``second o first``."""

    def __init__(self, first: SquareMap, second: SquareMap, name=None):
        self.first, self.second = first, second
        self.class_tag = "F" if first.class_tag == second.class_tag == "F" else "E"
        self.collar = min(first.collar, second.collar)
        r1, r2 = first.identity_radius, second.identity_radius
        self.identity_radius = None if r1 is None or r2 is None else max(r1, r2)
        self.name = name or f"{second.name} o {first.name}"

    def forward(self, u, jac=False):
        v, j1 = self.first.forward(u, jac)
        w, j2 = self.second.forward(v, jac)
        return (w, j2 @ j1) if jac else (w, None)

    def invert(self, v):
        return self.first.invert(self.second.invert(v))


def min_jacobian_det(f: SquareMap, n: int = 64) -> float:
    """Smallest Jacobian determinant over the cell centres of an ``n x n`` grid."""
    ax = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    j = f.jacobian(np.stack([gx.ravel(), gy.ravel()], axis=-1))
    return float(np.min(np.linalg.det(j)))


def check_square_class(f: SquareMap, n_collar: int = 400, tol: float = 1e-10, seed: int = 0):
    """Sample the declared collar and raise ``SquareClassError`` on violations."""
    rng = np.random.default_rng(seed)
    w = f.collar
    if w <= 0:
        raise SquareClassError(f"{f.name}: no collar declared")
    k = n_collar // 4
    a = rng.uniform(0, 1, k)
    d = rng.uniform(0, w, (4, k))
    left = np.stack([d[0], a], -1)
    bottom = np.stack([a, d[1]], -1)
    top = np.stack([a, 1 - d[2]], -1)
    right = np.stack([1 - d[3], a], -1)
    fixed = np.concatenate([left, bottom, top] + ([right] if f.class_tag == "F" else []))
    err = np.max(np.abs(f.evaluate(fixed) - fixed))
    if err > tol:
        raise SquareClassError(f"{f.name}: collar moved by {err:.3e}")
    if f.class_tag == "E":
        col = f.jacobian(right)[:, :, 0]
        err = np.max(np.abs(col - E1))
        if err > 1e-8:
            raise SquareClassError(f"{f.name}: df e1 differs from e1 near the right edge by {err:.3e}")
    return f


# ---------------------------------------------------------------------------
# standalone suite maps


_PROFILE = SmoothStep(0.0, 1.0, 0.1)


def _radial_bump(u, radius):
    # b = 1 - step(|u - c|^2 / R^2); returns b and its gradient
    d = u - CENTER
    s = (d * d).sum(axis=-1) / radius ** 2
    b = 1.0 - _PROFILE(s)
    db = -_PROFILE.derivative(s)[..., None] * 2.0 * d / radius ** 2
    return b, db


def bump_shear(amplitude: float = 0.08, radius: float = 0.35) -> ClosedFormSquare:
    """``(x, y) -> (x, y + A b(x, y))`` with a radial bump ``b``."""
    if amplitude * 2.0 * _PROFILE.max_slope / radius >= 1.0:
        raise ValueError("shear amplitude too large for a diffeomorphism")

    def fwd(u, jac):
        b, db = _radial_bump(u, radius)
        v = u.copy()
        v[:, 1] += amplitude * b
        if not jac:
            return v, None
        j = np.broadcast_to(np.eye(2), u.shape + (2,)).copy()
        j[:, 1, :] += amplitude * db
        return v, j

    return ClosedFormSquare(fwd, "F", collar=0.5 - radius, identity_radius=radius, name="bump-shear")


def bump_twist(angle: float = 1.0, radius: float = 0.35) -> ClosedFormSquare:
    """Rotation about the centre by ``angle * b(|u - c|)``; exact inverse."""

    def rotate(u, sign, jac):
        b, db = _radial_bump(u, radius)
        th = sign * angle * b
        c, s = np.cos(th), np.sin(th)
        d = u - CENTER
        v = CENTER + np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]], -1)
        v[b == 0.0] = u[b == 0.0]
        if not jac:
            return v, None
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        jd = np.stack([-(v[:, 1] - CENTER[1]), v[:, 0] - CENTER[0]], -1)
        return v, rot + jd[:, :, None] * (sign * angle * db)[:, None, :]

    def inv(v):
        shape = v.shape
        return rotate(v.reshape(-1, 2), -1.0, False)[0].reshape(shape)

    return ClosedFormSquare(lambda u, jac: rotate(u, 1.0, jac), "F", collar=0.5 - radius,
                            identity_radius=radius, inverse=inv, name="bump-twist")


def bump_composed() -> ComposedSquare:
    return ComposedSquare(bump_shear(), bump_twist(), name="composed")


def edge_slide(amplitude: float = 0.12) -> ClosedFormSquare:
    """Class E example: ``(x, y) -> (x, y + A k(x) b(y))``, equal to
    ``(x, g(y))`` near the right edge."""
    kx = SmoothStep(0.3, 0.8, 0.1)
    by = SmoothStep(0.0, 1.0, 0.1)

    def bump(y):
        s = ((y - 0.5) / 0.3) ** 2
        return 1.0 - by(s), -by.derivative(s) * 2.0 * (y - 0.5) / 0.09

    if amplitude * 2.0 * by.max_slope / 0.3 >= 1.0:
        raise ValueError("slide amplitude too large for a diffeomorphism")

    def fwd(u, jac):
        k, dk = kx(u[:, 0]), kx.derivative(u[:, 0])
        b, db = bump(u[:, 1])
        v = u.copy()
        v[:, 1] += amplitude * k * b
        if not jac:
            return v, None
        j = np.broadcast_to(np.eye(2), u.shape + (2,)).copy()
        j[:, 1, 0] = amplitude * dk * b
        j[:, 1, 1] += amplitude * k * db
        return v, j

    return ClosedFormSquare(fwd, "E", collar=0.2, name="edge-slide")


def square_suite():
    """The three standalone class F maps."""
    return {"bump-shear": bump_shear(), "bump-twist": bump_twist(), "composed": bump_composed()}


# ---------------------------------------------------------------------------
# pushforward field and its logarithm


class PushforwardField:
    """``(f_* e1)(p) = df|_{f^{-1}(p)} e1``."""

    def __init__(self, f: SquareMap):
        self.f = f

    def in_zone(self, p):
        return self.f.in_zone(p)

    def __call__(self, p):
        p = _as_points(p).reshape(-1, 2)
        out = np.zeros_like(p)
        out[:, 0] = 1.0
        act = ~self.in_zone(p)
        if act.any():
            z = self.f.invert(p[act])
            out[act] = self.f.jacobian(z)[:, :, 0]
            mag = np.linalg.norm(out[act], axis=1)
            if mag.min() < 1e-10:
                i = int(np.argmin(mag))
                raise DegenerateFieldError(f"pushforward field vanishes near {p[act][i]}")
        return out


def pushforward_e1(f: SquareMap) -> PushforwardField:
    return PushforwardField(f)


class LiftedField:
    """Continuous logarithm ``(log|h|, theta)`` of a non-vanishing field ``h``,
    anchored at ``(0, 0)`` in the lower-left corner.

    Angles are unwrapped on a ``(grid_n + 1)^2`` node grid; off-grid values
    are unwrapped against the nearest node.
    """

    def __init__(self, base, grid_n: int, theta: np.ndarray, max_increment: float):
        self.base = base
        self.grid_n = grid_n
        self.theta = theta
        self.max_increment = max_increment

    def __call__(self, p):
        p = _as_points(p).reshape(-1, 2)
        h = self.base(p)
        n = self.grid_n
        i = np.clip(np.rint(p[:, 0] * n).astype(int), 0, n)
        j = np.clip(np.rint(p[:, 1] * n).astype(int), 0, n)
        node = self.theta[i, j]
        # branch of atan2 nearest the node; exact where the field is e1
        raw = np.arctan2(h[:, 1], h[:, 0])
        ang = raw + 2.0 * np.pi * np.rint((node - raw) / (2.0 * np.pi))
        with np.errstate(divide="ignore"):
            return np.stack([np.log(np.hypot(h[:, 0], h[:, 1])), ang], axis=-1)

    def residual(self):
        """``max |exp(lift) - h|`` over the lift grid."""
        ax = np.linspace(0.0, 1.0, self.grid_n + 1)
        gx, gy = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], -1)
        lift = self(pts)
        rebuilt = np.exp(lift[:, :1]) * np.stack([np.cos(lift[:, 1]), np.sin(lift[:, 1])], -1)
        return float(np.max(np.abs(rebuilt - self.base(pts))))


def _unwrap_grid(ang):
    # first row along x, then every column along y
    dx = _wrap(np.diff(ang[:, 0]))
    theta = np.empty_like(ang)
    theta[0, 0] = ang[0, 0]
    theta[1:, 0] = ang[0, 0] + np.cumsum(dx)
    dy = _wrap(np.diff(ang, axis=1))
    theta[:, 1:] = theta[:, :1] + np.cumsum(dy, axis=1)
    # consistency of the horizontal increments away from the first row
    dxy = np.diff(theta, axis=0)
    worst = max(np.max(np.abs(dx), initial=0.0), np.max(np.abs(dy), initial=0.0),
                np.max(np.abs(dxy), initial=0.0))
    return theta, worst


def log_lift(h, grid_n: int = LIFT_GRID) -> LiftedField:
    """Unwrap the angle of ``h`` on a grid, doubling the resolution until
    adjacent increments stay below pi/2 (cap ``LIFT_GRID_CAP``)."""
    n = int(grid_n)
    while True:
        ax = np.linspace(0.0, 1.0, n + 1)
        gx, gy = np.meshgrid(ax, ax, indexing="ij")
        vals = h(np.stack([gx.ravel(), gy.ravel()], -1)).reshape(n + 1, n + 1, 2)
        ang = np.arctan2(vals[..., 1], vals[..., 0])
        theta, worst = _unwrap_grid(ang)
        if worst < 0.5 * np.pi:
            break
        if 2 * n > LIFT_GRID_CAP:
            if worst >= np.pi - 0.1:
                raise LiftResolutionError(
                    f"angle increment {worst:.3f} at grid {n}: field winds too fast, use a finer grid")
            break
        n *= 2
    anchor = theta[0, 0]
    if abs(anchor) > 1e-12:
        raise DegenerateFieldError("field differs from e1 at the corner (0, 0)")
    return LiftedField(h, n, theta, worst)


def field_homotopy(lifted: LiftedField, t: float):
    """``Phi_t = exp((1 - t) lift)``, as a vectorized planar field."""
    def phi(p):
        lift = lifted(p)
        if t == 1.0:
            out = np.zeros_like(lift)
            out[:, 0] = 1.0
            return out
        mag = np.exp((1.0 - t) * lift[:, 0])
        ang = (1.0 - t) * lift[:, 1]
        return mag[:, None] * np.stack([np.cos(ang), np.sin(ang)], -1)
    return phi


# ---------------------------------------------------------------------------
# integral curves


class _CurveSystem:
    """Velocity of the curves of ``Phi_t(f)`` in the state coordinates.

    The state is the curve point itself (image coordinates) or its preimage
    under ``f`` (pullback). ``velocity(z, theta_ref)`` returns the velocity and
    the continued angle of ``df e1`` (pullback only).
    """

    def __init__(self, f: SquareMap, t: float, lifted: LiftedField | None = None):
        self.f = f
        self.t = float(t)
        self.lifted = lifted
        self.pullback = lifted is None

    def velocity(self, z, theta_ref):
        n = len(z)
        v = np.zeros((n, 2))
        v[:, 0] = 1.0
        theta = np.zeros(n)
        act = ~self.f.in_zone(z)
        if not act.any():
            return v, theta
        w = 1.0 - self.t
        if self.pullback:
            jz = self.f.field_jacobian(z[act])
            h = jz[:, :, 0]
            ang = theta_ref[act] + _wrap(np.arctan2(h[:, 1], h[:, 0]) - theta_ref[act])
            mag = np.hypot(h[:, 0], h[:, 1]) ** w
            phi = mag[:, None] * np.stack([np.cos(w * ang), np.sin(w * ang)], -1)
            v[act] = np.linalg.solve(jz, phi[..., None])[..., 0]
            theta[act] = ang
        else:
            lift = self.lifted(z[act])
            mag = np.exp(w * lift[:, 0])
            v[act] = mag[:, None] * np.stack([np.cos(w * lift[:, 1]), np.sin(w * lift[:, 1])], -1)
            theta[act] = lift[:, 1]
        return v, theta

    def scale(self, z):
        return self.f.step_scale(z)

    def image(self, z):
        return self.f.evaluate(z) if self.pullback else z


def _hermite(p0, p1, d0, d1, tau, h):
    t2 = tau * tau
    t3 = t2 * tau
    return ((2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + tau) * h * d0
            + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * h * d1)


def _hermite_slope(p0, p1, d0, d1, tau, h):
    t2 = tau * tau
    return ((6 * t2 - 6 * tau) * p0 + (3 * t2 - 4 * tau + 1) * h * d0
            + (6 * tau - 6 * t2) * p1 + (3 * t2 - 2 * tau) * h * d1)


def _hermite_root(p0, p1, d0, d1, h, level, tol: float = 1e-15):
    """``tau`` in [0, 1] with ``hermite(tau) = level`` for an increasing cubic.

    Safeguarded Newton: steps leaving the current bracket are replaced by
    bisection.
    """
    lo = np.zeros_like(p0)
    hi = np.ones_like(p0)
    span = p1 - p0
    tau = np.clip(np.where(span > 0, (level - p0) / np.where(span > 0, span, 1.0), 0.5), 0.0, 1.0)
    for _ in range(60):
        res = _hermite(p0, p1, d0, d1, tau, h) - level
        lo = np.where(res < 0, tau, lo)
        hi = np.where(res > 0, tau, hi)
        slope = _hermite_slope(p0, p1, d0, d1, tau, h)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = tau - res / slope
        bad = ~((step > lo) & (step < hi))
        new = np.where(bad, 0.5 * (lo + hi), step)
        if np.all(np.abs(new - tau) <= tol):
            return new
        tau = new
    return tau


class CurveRecord:
    """Nodes of one RK4 integral curve: parameters ``s``, states ``z`` and
    their ``sigma``-derivatives, plus the exit parameter and exit state."""

    __slots__ = ("y", "s", "z", "dz", "ds", "exit_s", "exit_z", "h")

    def __init__(self, y, s, z, dz, ds, exit_s, exit_z, h):
        self.y, self.s, self.z, self.dz, self.ds = y, s, z, dz, ds
        self.exit_s, self.exit_z, self.h = exit_s, exit_z, h

    def state_at(self, target):
        """Curve states at parameters ``target`` (cubic Hermite in ``sigma``)."""
        target = np.asarray(target, dtype=float)
        out = np.stack([target, np.full(target.shape, self.y)], -1)
        late = target > self.s[0]
        if len(self.s) < 2 or not late.any():
            return out
        q = target[late]
        col = np.clip(np.searchsorted(self.s, q) - 1, 0, len(self.s) - 2)
        tau = _hermite_root(self.s[col], self.s[col + 1], self.ds[col], self.ds[col + 1], self.h, q)
        out[late] = _hermite(self.z[col], self.z[col + 1], self.dz[col], self.dz[col + 1],
                             tau[:, None], self.h)
        return out


def _integrate(system: _CurveSystem, y, steps_per_unit: int = DEFAULT_STEPS,
               t_max: float = T_MAX):
    """Integrate the curves starting on the left edge at heights ``y`` in lockstep.

    Curves are parametrized by ``sigma`` with ``ds/dsigma = scale(z)`` and a
    step of ``1 / steps_per_unit`` in ``sigma``. Each curve starts at its
    entry abscissa (the field is ``e1`` before it) and runs until it crosses
    ``x = 1``; the crossing is located by bisection on the cubic Hermite dense
    output of the last step.

    Returns
    -------
    list of CurveRecord
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    h = 1.0 / steps_per_unit
    x0 = system.f.entry_x(y)
    exit_s = np.where(x0 >= 1.0, 1.0, np.nan)
    exit_z = np.stack([np.ones(n), y], -1)
    idx = np.flatnonzero(x0 < 1.0)
    za = np.stack([x0[idx], y[idx]], -1)
    sa = x0[idx].copy()
    tha = np.zeros(len(idx))
    va, _ = system.velocity(za, tha)
    ca = system.scale(za)
    hist = [(idx, sa, za, ca[:, None] * va, ca)]
    while len(idx):
        k1z = ca[:, None] * va
        zb = za + 0.5 * h * k1z
        v2, _ = system.velocity(zb, tha)
        c2 = system.scale(zb)
        k2z = c2[:, None] * v2
        zb = za + 0.5 * h * k2z
        v3, _ = system.velocity(zb, tha)
        c3 = system.scale(zb)
        k3z = c3[:, None] * v3
        zb = za + h * k3z
        v4, _ = system.velocity(zb, tha)
        c4 = system.scale(zb)
        k4z = c4[:, None] * v4
        zn = za + h / 6.0 * (k1z + 2 * k2z + 2 * k3z + k4z)
        sn = sa + h / 6.0 * (ca + 2 * c2 + 2 * c3 + c4)
        vn, thn = system.velocity(zn, tha)
        cn = system.scale(zn)
        jump = np.abs(thn - tha)
        if np.any(jump >= 0.5 * np.pi):
            i = int(np.argmax(jump))
            raise LiftResolutionError(
                f"angle of df e1 jumped by {jump[i]:.3f} along the curve from height {y[idx[i]]}; "
                "increase the step count")
        dzn = cn[:, None] * vn
        hist.append((idx, sn, zn, dzn, cn))
        hit = zn[:, 0] >= 1.0
        if hit.any():
            tau = _hermite_root(za[hit, 0], zn[hit, 0], k1z[hit, 0], dzn[hit, 0], h, 1.0)
            ii = idx[hit]
            exit_s[ii] = _hermite(sa[hit], sn[hit], ca[hit], cn[hit], tau, h)
            exit_z[ii] = _hermite(za[hit], zn[hit], k1z[hit], dzn[hit], tau[:, None], h)
            exit_z[ii, 0] = 1.0
        late = (sn > t_max) & ~hit
        if late.any():
            i = int(np.argmax(late))
            raise ExitTimeError(f"curve from height {y[idx[i]]} did not exit by s = {t_max}; "
                                "the field must vanish somewhere")
        keep = ~hit
        idx = idx[keep]
        za, sa, tha, va, ca = zn[keep], sn[keep], thn[keep], vn[keep], cn[keep]
    cid = np.concatenate([st[0] for st in hist])
    order = np.argsort(cid, kind="stable")
    cid = cid[order]
    cols = [np.concatenate([st[k] for st in hist])[order] for k in range(1, 5)]
    bounds = np.searchsorted(cid, np.arange(n + 1))
    records = []
    for i in range(n):
        a, b = bounds[i], bounds[i + 1]
        if b > a:
            s, z, dz, ds = (c[a:b] for c in cols)
        else:
            s, z, dz, ds = np.array([1.0]), np.array([[1.0, y[i]]]), np.array([E1]), np.ones(1)
        records.append(CurveRecord(y[i], s, z, dz, ds, exit_s[i], exit_z[i], h))
    return records


class CurveBank:
    """Write-once cache of integral curves keyed by starting height."""

    def __init__(self, system: _CurveSystem, steps_per_unit: int = DEFAULT_STEPS):
        self.system = system
        self.steps_per_unit = int(steps_per_unit)
        self._records = {}

    def records(self, y):
        y = np.asarray(y, dtype=float).ravel()
        todo = np.array(sorted({float(v) for v in y} - self._records.keys()))
        if len(todo):
            for rec in _integrate(self.system, todo, self.steps_per_unit):
                self._records[float(rec.y)] = rec
        return [self._records[float(v)] for v in y]

    def exit_times(self, y):
        return np.array([r.exit_s for r in self.records(y)])

    def exit_heights(self, y):
        """Second component of the curve image at its exit time."""
        recs = self.records(y)
        z = np.array([r.exit_z for r in recs]).reshape(-1, 2)
        return self.system.image(z)[:, 1] if len(z) else np.zeros(0)

    def states(self, y, targets):
        """Curve states at parameter ``targets[i]`` on the curve from ``y[i]``."""
        y = np.asarray(y, dtype=float)
        targets = np.asarray(targets, dtype=float)
        uniq, inv = np.unique(y, return_inverse=True)
        recs = self.records(uniq)
        out = np.stack([targets, y], -1)
        # one sorted key array over all curves: curve rank * stride + s
        stride = 2.0 * T_MAX + 2.0
        sizes = np.array([len(r.s) for r in recs])
        start = np.concatenate([[0], np.cumsum(sizes)])
        key = np.concatenate([k * stride + r.s for k, r in enumerate(recs)])
        z = np.concatenate([r.z for r in recs])
        dz = np.concatenate([r.dz for r in recs])
        ds = np.concatenate([r.ds for r in recs])
        first = key[start[:-1]][inv] - inv * stride
        late = (targets > first) & (sizes[inv] >= 2)
        if not late.any():
            return out
        ci = inv[late]
        col = np.searchsorted(key, ci * stride + targets[late]) - 1
        col = np.clip(col, start[ci], start[ci + 1] - 2)
        sk = key - np.repeat(np.arange(len(recs)) * stride, sizes)
        h = 1.0 / self.steps_per_unit
        tau = _hermite_root(sk[col], sk[col + 1], ds[col], ds[col + 1], h, targets[late])
        out[late] = _hermite(z[col], z[col + 1], dz[col], dz[col + 1], tau[:, None], h)
        return out


class IntegralCurve:
    """Integral curves from the left edge with cubic Hermite dense output."""

    def __init__(self, system, records):
        self.system = system
        self.records = records
        self.y = np.array([r.y for r in records])
        self.exit_time = np.array([r.exit_s for r in records])

    def __call__(self, s, i: int = 0):
        """Points of curve ``i`` at parameters ``0 <= s <= exit_time[i]``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return self.system.image(self.records[i].state_at(s))

    def exit_point(self, i: int = 0):
        return self.system.image(self.records[i].exit_z[None])[0]


def integral_curve(f_or_field, y, t: float = 0.0, steps_per_unit: int = DEFAULT_STEPS,
                   t_max: float = T_MAX):
    """Integral curves of ``Phi_t(f)`` (or of a lifted field) from ``(0, y)``.

    Parameters
    ----------
    f_or_field : SquareMap or LiftedField
        A square map, or a lifted field whose curves are integrated directly
        in image coordinates.
    y : float or array_like
        Starting heights.

    Returns
    -------
    curve : IntegralCurve
        Dense output; ``curve(s, i)`` evaluates curve ``i``.
    exit_time : ndarray
        Parameters at which the curves reach ``x = 1``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if isinstance(f_or_field, LiftedField):
        base = f_or_field.base
        f = base.f if isinstance(base, PushforwardField) else _FieldZone(base)
        system = _CurveSystem(f, t, f_or_field)
    else:
        system = _curve_system(f_or_field, t)
    records = _integrate(system, y, steps_per_unit, t_max)
    curve = IntegralCurve(system, records)
    return curve, curve.exit_time


class _FieldZone(SquareMap):
    # zone description for a bare field: e1 outside the open square only
    collar = 0.0

    def __init__(self, field):
        self.field = field

    def in_zone(self, u):
        u = np.asarray(u, dtype=float)
        return (u[..., 0] >= 1.0) | (u[..., 0] <= 0.0) | (u[..., 1] <= 0.0) | (u[..., 1] >= 1.0)

    def entry_x(self, y):
        y = np.asarray(y, dtype=float)
        return np.where((y <= 0.0) | (y >= 1.0), 1.0, 0.0)


def _curve_system(f: SquareMap, t: float, grid_n: int = LIFT_GRID):
    if f.pullback:
        return _CurveSystem(f, t)
    return _CurveSystem(f, t, log_lift(pushforward_e1(f), grid_n))


# ---------------------------------------------------------------------------
# stage E


class StageEMap(SquareMap):
    """``E_t(f)(x, y) = Gamma_t(f)(chi(x, s_bar(y)), y)``.

    Integral curves are cached per height with dense output, so grid
    evaluation integrates one curve per distinct ``y``. The Jacobian is
    obtained by central differences.
    """

    class_tag = "E"

    def __init__(self, f: SquareMap, t: float, steps_per_unit: int = DEFAULT_STEPS,
                 grid_n: int = LIFT_GRID):
        self.source = f
        self.t = float(t)
        self.inverse_tol = f.inverse_tol
        self.bank = CurveBank(_curve_system(f, t, grid_n), steps_per_unit)
        self.name = f"E_{t:g}({f.name})"
        self.identity_radius = None
        # chi has unit slope within chi_collar(s_bar) of both ends
        s_min = float(np.min(self.exit_times(f.trace_nodes(64))))
        self.collar = min(f.collar, chi_collar(s_min))

    def exit_times(self, y):
        """``s_bar(t, f, y)`` for every height in ``y``."""
        return self.bank.exit_times(y)

    def exit_heights(self, y):
        return self.bank.exit_heights(y)

    def _values(self, u):
        x = np.clip(u[:, 0], 0.0, 1.0)
        y = u[:, 1]
        out = u.copy()
        inside = (u[:, 0] >= 0) & (u[:, 0] <= 1) & (y >= 0) & (y <= 1)
        inside &= self.source.entry_x(y) < 1.0
        if not inside.any():
            return out
        yi = y[inside]
        target = chi(x[inside], self.exit_times(yi))
        out[inside] = self.bank.system.image(self.bank.states(yi, target))
        return out

    def forward(self, u, jac=False):
        u = _as_points(u)
        shape = u.shape
        u = u.reshape(-1, 2)
        if not jac:
            return self._values(u).reshape(shape), None
        h = self.source.fd_step(u)
        vals = self._values(np.concatenate([u, _fd_stencil(u, h)]))
        n = len(u)
        return vals[:n].reshape(shape), _fd_assemble(vals[n:], n, h).reshape(shape + (2,))

    def trace_nodes(self, n: int = 257):
        return self.source.trace_nodes(n)

    def fd_step(self, u):
        return self.source.fd_step(u)

    def step_scale(self, u):
        return self.source.step_scale(u)

    def trace(self) -> IntervalMap:
        """Exit heights; a spline through 513 of them seeds inversion and supplies derivatives."""
        nodes = self.source.trace_nodes(513)
        approx = IntervalMap.from_samples(nodes, self.exit_heights(nodes))
        if approx.is_identity:
            return approx
        lo, hi = nodes[0], nodes[-1]

        def fn(y):
            y = np.asarray(y, dtype=float)
            out = y.copy()
            band = (y > lo) & (y < hi)
            if band.any():
                out[band] = self.exit_heights(y[band])
            return out

        return IntervalMap(fn, approx.derivative, collar=approx.collar, approx=approx,
                           check_nodes=nodes)


def stage_e(f: SquareMap, t: float, steps_per_unit: int = DEFAULT_STEPS,
            grid_n: int = LIFT_GRID) -> SquareMap:
    """Deform a class E (or F) map along ``E_t``; ``E_1`` is the identity."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 1.0 or isinstance(f, IdentitySquare):
        return IdentitySquare()
    return StageEMap(f, t, steps_per_unit, grid_n)


# ---------------------------------------------------------------------------
# boundary correction and stage F


def boundary_trace(f: SquareMap) -> IntervalMap:
    """``g_f(y) = f^2(1, y)``, checked to be increasing and trivial near 0 and 1."""
    g = f.trace()
    try:
        return g.check()
    except SquareClassError as exc:
        raise SquareClassError(f"{f.name}: right-edge trace is not a class G map ({exc})") from exc


_BETA_FIX = SmoothStep(0.25, 0.75, 0.1)


def _beta_fix(x):
    return 1.0 - _BETA_FIX(x)


def _beta_fix_dx(x):
    return -_BETA_FIX.derivative(x)


class BoundaryFixedMap(SquareMap):
    """``p(f) = Psi_f o f`` with ``Psi_f(x, y) = (x, G_{beta(x)}(g_f^{-1})(y))``."""

    class_tag = "F"

    def __init__(self, f: SquareMap, trace: IntervalMap):
        self.source = f
        self.g = trace
        self.collar = f.collar
        self.inverse_tol = f.inverse_tol
        self.name = f"p({f.name})"

    def _psi(self, v, jac):
        x, y = v[:, 0], v[:, 1]
        b = _beta_fix(x)
        ginv = y.copy()
        moved = b < 1.0
        if moved.any():
            ginv[moved] = self.g.inverse(np.clip(y[moved], 0.0, 1.0), tol=self.inverse_tol)
        out = np.stack([x, (1.0 - b) * ginv + b * y], -1)
        if not jac:
            return out, None
        j = np.zeros((len(v), 2, 2))
        j[:, 0, 0] = 1.0
        j[:, 1, 0] = _beta_fix_dx(x) * (y - ginv)
        j[:, 1, 1] = (1.0 - b) / self.g.derivative(ginv) + b
        return out, j

    def forward(self, u, jac=False):
        u = _as_points(u)
        shape = u.shape
        v, jf = self.source.forward(u.reshape(-1, 2), jac)
        w, jp = self._psi(v, jac)
        if not jac:
            return w.reshape(shape), None
        return w.reshape(shape), (jp @ jf).reshape(shape + (2,))

    def invert(self, w):
        w = _as_points(w)
        shape = w.shape
        w = w.reshape(-1, 2)
        x, yy = w[:, 0], w[:, 1]
        b = _beta_fix(x)
        # Psi^{-1}(x, yy) = (x, g(q)) where (1 - b) q + b g(q) = yy
        lo = np.zeros_like(yy)
        hi = np.ones_like(yy)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = (1.0 - b) * mid + b * self.g(mid) < yy
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        v = np.stack([x, self.g(0.5 * (lo + hi))], -1)
        return self.source.invert(v).reshape(shape)

    def in_zone(self, u):
        return self.source.in_zone(u)

    def entry_x(self, y):
        return self.source.entry_x(y)

    def step_scale(self, u):
        return self.source.step_scale(u)

    def fd_step(self, u):
        return self.source.fd_step(u)

    def trace_nodes(self, n: int = 257):
        return self.source.trace_nodes(n)

    def trace(self):
        return IntervalMap.identity()


def boundary_fix(f: SquareMap) -> SquareMap:
    """Retraction ``p`` from class E to class F; the identity on class F."""
    g = boundary_trace(f)
    if g.is_identity:
        return f
    return BoundaryFixedMap(f, g)


def stage_f(f: SquareMap, t: float, steps_per_unit: int = DEFAULT_STEPS,
            grid_n: int = LIFT_GRID) -> SquareMap:
    """``F_t(f) = p(E_t(f))`` for class F maps; ``F_1`` is the identity."""
    if f.class_tag != "F":
        raise SquareClassError(f"{f.name}: stage F needs a class F map")
    e = stage_e(f, t, steps_per_unit, grid_n)
    if isinstance(e, IdentitySquare):
        return e
    return boundary_fix(e)
