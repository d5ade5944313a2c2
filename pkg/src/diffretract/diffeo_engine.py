"""Diffeomorphisms as chains of closed-form primitives.

A primitive acts either on the sphere (points of shape ``(n, 3)``) or on the
plane (``(n, 2)``). Every primitive provides ``forward(x, jac)``, returning
images and optionally Jacobians, and ``invert(x)``. Sphere Jacobians are
ambient 3x3 matrices that annihilate the normal direction, so the chain rule
is plain matrix multiplication.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import _flow_kernels as fk
from .smoothcore import gamma_flatten, gamma_flatten_grad
from .sphere_geometry import (
    CHARTS,
    Rotation,
    normalize,
    stereo_north,
    stereo_north_inv,
    stereo_north_inv_jac,
    stereo_north_jac,
    stereo_south_inv,
    stereo_south_inv_jac,
    stereo_south_jac,
    tangent_projector,
)

DEFAULT_STEPS = 256


class ChainEvaluationError(RuntimeError):
    """Failure inside one primitive of a chain."""

    def __init__(self, index: int, primitive, cause: Exception):
        super().__init__(f"primitive {index} ({type(primitive).__name__}): {cause}")
        self.index = index
        self.cause = cause


class InversionError(RuntimeError):
    pass


class FlowDivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# time-dependent planar fields


class TimeField(ABC):
    """Planar field ``X_t(z)`` vanishing for ``|z| >= support_radius``."""

    support_radius: float

    @abstractmethod
    def __call__(self, t: float, z: np.ndarray) -> np.ndarray:
        ...

    def jacobian(self, t: float, z: np.ndarray) -> np.ndarray:
        """``dX/dz`` by central differences (overridden where closed form exists)."""
        h = 1e-6
        cols = []
        for k in range(2):
            dz = np.zeros(2)
            dz[k] = h
            cols.append((self(t, z + dz) - self(t, z - dz)) / (2 * h))
        return np.stack(cols, axis=-1)


class KernelField(TimeField):
    """Field with a compiled evaluator (see ``_flow_kernels``)."""

    kind: int
    params: np.ndarray

    def __call__(self, t, z):
        z = np.ascontiguousarray(np.asarray(z, dtype=float).reshape(-1, 2))
        v = np.empty_like(z)
        j = np.empty((len(z), 2, 2))
        fk.field_many(self.kind, self.params, float(t), z, v, j)
        return v

    def jacobian(self, t, z):
        z = np.ascontiguousarray(np.asarray(z, dtype=float).reshape(-1, 2))
        v = np.empty_like(z)
        j = np.empty((len(z), 2, 2))
        fk.field_many(self.kind, self.params, float(t), z, v, j)
        return j


class QField(KernelField):
    """Cut-off linear field ``rho(z) (g1 - I) g_t^{-1} z`` with ``g_t = (1-t) I + t g1``."""

    kind = fk.KIND_Q
    support_radius = 2.0

    def __init__(self, g1):
        g1 = np.asarray(g1, dtype=float)
        if g1.shape != (2, 2) or np.linalg.det(g1) <= 0:
            raise ValueError("g1 must be a 2x2 matrix with positive determinant")
        self.g1 = g1
        self.params = np.zeros(8)
        self.params[:4] = g1.ravel()


class VortexField(KernelField):
    """Rotation about ``center`` with angular speed ``strength (1 + tau t)``
    on B(center, radius/2), cut off smoothly at ``radius``."""

    kind = fk.KIND_VORTEX

    def __init__(self, center, radius: float, strength: float, tau: float = 0.0):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.center = np.asarray(center, dtype=float)
        self.radius, self.strength, self.tau = float(radius), float(strength), float(tau)
        self.params = np.zeros(8)
        self.params[:5] = [*self.center, radius, strength, tau]
        self.support_radius = float(np.linalg.norm(self.center) + radius)


class TranslationField(KernelField):
    """Constant velocity on B(center, radius/2), cut off smoothly at ``radius``."""

    kind = fk.KIND_TRANSLATE

    def __init__(self, center, radius: float, velocity, tau: float = 0.0):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.center = np.asarray(center, dtype=float)
        self.velocity = np.asarray(velocity, dtype=float)
        self.radius, self.tau = float(radius), float(tau)
        self.params = np.zeros(8)
        self.params[:6] = [*self.center, radius, *self.velocity, tau]
        self.support_radius = float(np.linalg.norm(self.center) + radius)


class CallableField(TimeField):
    """Wrap a vectorized callable ``fn(t, z)``; Jacobian by central differences."""

    def __init__(self, fn, support_radius: float, jacobian=None):
        self.fn = fn
        self.support_radius = float(support_radius)
        self._jac = jacobian

    def __call__(self, t, z):
        return np.asarray(self.fn(t, np.asarray(z, dtype=float)), dtype=float)

    def jacobian(self, t, z):
        if self._jac is not None:
            return self._jac(t, z)
        return super().jacobian(t, z)


def _step_count(steps_per_unit: int, t0: float, t1: float) -> int:
    return max(1, int(math.ceil(steps_per_unit * abs(t1 - t0) - 1e-9)))


def flow(field: TimeField, z0, t0: float, t1: float, steps_per_unit: int = DEFAULT_STEPS,
         jacobian: bool = False):
    """Flow ``z0`` along ``field`` from ``t0`` to ``t1`` with classical RK4.

    The step count is ``ceil(steps_per_unit * |t1 - t0|)``. With
    ``jacobian=True`` the variational equation ``dJ/dt = DX J`` is integrated
    alongside and ``(z1, J)`` is returned.
    """
    z0 = np.asarray(z0, dtype=float)
    shape = z0.shape
    z = np.ascontiguousarray(z0.reshape(-1, 2))
    out_z = z.copy()
    out_j = np.broadcast_to(np.eye(2), (len(z), 2, 2)).copy()
    if t1 == t0 or len(z) == 0:
        return (out_z.reshape(shape), out_j.reshape(shape[:-1] + (2, 2))) if jacobian else out_z.reshape(shape)
    n = _step_count(steps_per_unit, t0, t1)
    if isinstance(field, KernelField):
        bad = fk.rk4_flow(field.kind, field.params, field.support_radius, z, float(t0),
                          float(t1), n, jacobian, out_z, out_j)
        if bad >= 0:
            raise FlowDivergenceError(f"trajectory from {z[bad]} left |z| <= 10R+10")
    else:
        out_z, out_j = _rk4_numpy(field, z, t0, t1, n, jacobian)
    out_z = out_z.reshape(shape)
    if jacobian:
        return out_z, out_j.reshape(shape[:-1] + (2, 2))
    return out_z


def _rk4_numpy(field, z, t0, t1, n, want_jac):
    dt = (t1 - t0) / n
    limit = 10.0 * field.support_radius + 10.0
    active = (z * z).sum(axis=1) < field.support_radius ** 2
    x = z[active].copy()
    a = np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()
    for k in range(n):
        t = t0 + k * dt
        k1 = field(t, x)
        k2 = field(t + dt / 2, x + dt / 2 * k1)
        k3 = field(t + dt / 2, x + dt / 2 * k2)
        k4 = field(t + dt, x + dt * k3)
        if want_jac:
            m1 = field.jacobian(t, x) @ a
            m2 = field.jacobian(t + dt / 2, x + dt / 2 * k1) @ (a + dt / 2 * m1)
            m3 = field.jacobian(t + dt / 2, x + dt / 2 * k2) @ (a + dt / 2 * m2)
            m4 = field.jacobian(t + dt, x + dt * k3) @ (a + dt * m3)
            a = a + dt / 6 * (m1 + 2 * m2 + 2 * m3 + m4)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        far = (x * x).sum(axis=1) > limit ** 2
        if far.any():
            raise FlowDivergenceError(f"trajectory left |z| <= 10R+10 near {x[far][0]}")
    out_z = z.copy()
    out_z[active] = x
    out_j = np.broadcast_to(np.eye(2), (len(z), 2, 2)).copy()
    out_j[active] = a
    return out_z, out_j


# ---------------------------------------------------------------------------
# primitives


class Primitive(ABC):
    """Orientation-preserving diffeomorphism of the sphere or the plane."""

    domain: str  # "sphere" or "plane"

    @abstractmethod
    def forward(self, x: np.ndarray, jac: bool = False):
        """Return images, and Jacobians as well when ``jac`` is true."""

    @abstractmethod
    def invert(self, x: np.ndarray) -> np.ndarray:
        ...

    def evaluate(self, x):
        return self.forward(x, False)[0]

    def surrogate(self) -> "Primitive":
        """Cheaper stand-in used only for Jacobian-heavy inner loops."""
        return self


def _sphere_points(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError(f"expected sphere points of shape (..., 3), got {x.shape}")
    return x


class RotationMap(Primitive):
    domain = "sphere"

    def __init__(self, rotation: Rotation):
        self.rotation = rotation if isinstance(rotation, Rotation) else Rotation(rotation)

    def forward(self, x, jac=False):
        x = _sphere_points(x)
        m = self.rotation.matrix
        y = x @ m.T
        if not jac:
            return y, None
        return y, m @ tangent_projector(x)

    def invert(self, x):
        return _sphere_points(x) @ self.rotation.matrix


def _complex_as_real(k):
    out = np.empty(k.shape + (2, 2))
    out[..., 0, 0] = k.real
    out[..., 0, 1] = -k.imag
    out[..., 1, 0] = k.imag
    out[..., 1, 1] = k.real
    return out


def _to_homogeneous(x):
    # [p : q] with w = p / q the half north-chart coordinate
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    south = x3 <= 0
    p = np.where(south, x1 + 1j * x2, 1.0 + x3)
    q = np.where(south, 1.0 - x3 + 0j, x1 - 1j * x2)
    return p, q


def _from_homogeneous(p, q):
    pq = p * np.conj(q)
    ap, aq = np.abs(p) ** 2, np.abs(q) ** 2
    den = ap + aq
    return np.stack([2 * pq.real / den, 2 * pq.imag / den, (ap - aq) / den], axis=-1)


_SWAP = np.array([[0, 1], [1, 0]], dtype=complex)


class MobiusMap(Primitive):
    """``w -> (a w + b) / (c w + d)`` in the half north-chart coordinate
    ``w = p(x) / 2``, extended to the whole sphere."""

    domain = "sphere"

    def __init__(self, a, b, c, d):
        self.m = np.array([[a, b], [c, d]], dtype=complex)
        scale = np.abs(self.m).max()
        det = np.linalg.det(self.m)
        if not np.isfinite(scale) or scale == 0 or abs(det) <= 1e-12 * scale ** 2:
            raise ValueError("Mobius map is not invertible (ad - bc = 0)")

    @staticmethod
    def _apply(m, x):
        p, q = _to_homogeneous(x)
        p2 = m[0, 0] * p + m[0, 1] * q
        q2 = m[1, 0] * p + m[1, 1] * q
        return _from_homogeneous(p2, q2)

    def forward(self, x, jac=False):
        x = _sphere_points(x)
        y = self._apply(self.m, x)
        if not jac:
            return y, None
        return y, self._jacobian(x, y)

    def _jacobian(self, x, y):
        # coordinates u = w (southern points) or u = 1/w (northern points)
        sin = x[..., 2] <= 0
        sout = y[..., 2] <= 0
        w_in = np.where(sin, (x[..., 0] + 1j * x[..., 1]) / np.where(sin, 1 - x[..., 2], 1.0),
                        (x[..., 0] - 1j * x[..., 1]) / np.where(sin, 1.0, 1 + x[..., 2]))
        k = np.empty(x.shape[:-1], dtype=complex)
        for fin in (True, False):
            for fout in (True, False):
                sel = (sin == fin) & (sout == fout)
                if not sel.any():
                    continue
                n = self.m
                if not fin:
                    n = n @ _SWAP
                if not fout:
                    n = _SWAP @ n
                u = w_in[sel]
                k[sel] = np.linalg.det(n) / (n[1, 0] * u + n[1, 1]) ** 2
        du_dx = np.where(sin[..., None, None], 0.5 * stereo_north_jac_safe(x),
                         _FLIP @ (0.5 * stereo_south_jac_safe(x)))
        yin = np.where(sout[..., None], stereo_north_safe(y), _flip2(stereo_south_safe(y)))
        dx_du = np.where(sout[..., None, None], 2.0 * stereo_north_inv_jac(yin),
                         2.0 * stereo_south_inv_jac(_flip2(yin)) @ _FLIP)
        return dx_du @ _complex_as_real(k) @ du_dx @ tangent_projector(x)

    def invert(self, x):
        return self._apply(np.linalg.inv(self.m), _sphere_points(x))


_FLIP = np.diag([1.0, -1.0])


def _flip2(y):
    return y * np.array([1.0, -1.0])


def _safe_chart(x, sign):
    # chart value with the excluded hemisphere masked (callers select by hemisphere)
    x = np.asarray(x, dtype=float)
    g = np.where(sign * x[..., 2] <= 0, 1.0 - sign * x[..., 2], 1.0)
    return 2.0 * x[..., :2] / g[..., None]


def stereo_north_safe(x):
    return _safe_chart(x, 1.0)


def stereo_south_safe(x):
    return _safe_chart(x, -1.0)


def _safe_chart_jac(x, sign):
    x = np.asarray(x, dtype=float)
    g = np.where(sign * x[..., 2] <= 0, 1.0 - sign * x[..., 2], 1.0)
    out = np.zeros(x.shape[:-1] + (2, 3))
    out[..., 0, 0] = 2.0 / g
    out[..., 1, 1] = 2.0 / g
    out[..., 0, 2] = sign * 2.0 * x[..., 0] / g ** 2
    out[..., 1, 2] = sign * 2.0 * x[..., 1] / g ** 2
    return out


def stereo_north_jac_safe(x):
    return _safe_chart_jac(x, 1.0)


def stereo_south_jac_safe(x):
    return _safe_chart_jac(x, -1.0)


class ScalingMap(Primitive):
    """Planar dilation ``z -> factor z``."""

    domain = "plane"
    support_radius = math.inf

    def __init__(self, factor: float):
        if not factor > 0:
            raise ValueError("scaling factor must be positive")
        self.factor = float(factor)

    def forward(self, x, jac=False):
        x = np.asarray(x, dtype=float)
        y = self.factor * x
        if not jac:
            return y, None
        return y, np.broadcast_to(self.factor * np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def invert(self, x):
        return np.asarray(x, dtype=float) / self.factor


class PlanarFlowMap(Primitive):
    """Time-``t0 -> t1`` flow of a compactly supported field."""

    domain = "plane"

    def __init__(self, field: TimeField, t0: float = 0.0, t1: float = 1.0,
                 steps_per_unit: int = DEFAULT_STEPS):
        self.field = field
        self.t0, self.t1 = float(t0), float(t1)
        self.steps_per_unit = int(steps_per_unit)
        self.support_radius = field.support_radius
        self._table = None

    def forward(self, x, jac=False):
        if jac:
            return flow(self.field, x, self.t0, self.t1, self.steps_per_unit, jacobian=True)
        return flow(self.field, x, self.t0, self.t1, self.steps_per_unit), None

    def invert(self, x):
        return flow(self.field, x, self.t1, self.t0, self.steps_per_unit)

    def surrogate(self):
        if self._table is None:
            self._table = HermiteTable.from_primitive(self, self.support_radius)
        return self._table


class HermiteTable(Primitive):
    """Bicubic Hermite interpolant of a planar map on ``[-R, R]^2``
    (identity outside), built from exact values and Jacobians."""

    domain = "plane"

    def __init__(self, lo, h, n, vals, dxs, dys, dxys, source=None):
        self.lo, self.h, self.n = float(lo), float(h), int(n)
        self.vals, self.dxs, self.dys, self.dxys = vals, dxs, dys, dxys
        self.source = source
        self.support_radius = math.sqrt(2.0) * abs(self.lo)

    @classmethod
    def from_primitive(cls, prim: Primitive, radius: float, n: int = 256):
        lo = -radius
        h = 2.0 * radius / n
        ax = lo + h * np.arange(n + 1)
        gx, gy = np.meshgrid(ax, ax, indexing="ij")
        nodes = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        v, j = prim.forward(nodes, True)
        v = v.reshape(n + 1, n + 1, 2)
        j = j.reshape(n + 1, n + 1, 2, 2)
        dxs = np.ascontiguousarray(j[..., 0])
        dys = np.ascontiguousarray(j[..., 1])
        dxys = np.gradient(dys, h, axis=0, edge_order=2)
        return cls(lo, h, n, np.ascontiguousarray(v), dxs, dys, np.ascontiguousarray(dxys), prim)

    def forward(self, x, jac=False):
        x = np.asarray(x, dtype=float)
        z = np.ascontiguousarray(x.reshape(-1, 2))
        v = np.empty_like(z)
        j = np.empty((len(z), 2, 2))
        fk.hermite_table_eval(self.lo, self.h, self.n, self.vals, self.dxs, self.dys,
                              self.dxys, z, v, j)
        v = v.reshape(x.shape)
        return (v, j.reshape(x.shape[:-1] + (2, 2))) if jac else (v, None)

    def invert(self, x):
        if self.source is not None:
            return self.source.invert(x)
        return newton_invert(lambda z: self.forward(z, True), x)


class ChartConjugation(Primitive):
    """Sphere map ``R^T chart^{-1} inner chart R`` for planar primitives
    that are the identity outside a bounded disk (or fix infinity)."""

    domain = "sphere"

    def __init__(self, inner, chart: str = "north", pre_rotation: Rotation | None = None):
        if chart not in CHARTS:
            raise ValueError(f"unknown chart {chart!r}")
        self.inner = inner if isinstance(inner, DiffeoChain) else DiffeoChain(list(inner))
        if self.inner.domain not in ("plane", None):
            raise ValueError("chart conjugation needs planar primitives")
        self.chart = chart
        self.pre_rotation = pre_rotation
        self.sign = 1.0 if chart == "north" else -1.0
        self.support_radius = max((getattr(p, "support_radius", math.inf)
                                   for p in self.inner.primitives), default=0.0)

    def _active(self, xr):
        # points whose chart image lies inside the inner support
        gap_ok = self.sign * xr[..., 2] < 1.0 - 1e-12
        y = np.zeros(xr.shape[:-1] + (2,))
        y[gap_ok] = CHARTS[self.chart][0](xr[gap_ok])
        r2 = (y * y).sum(axis=-1)
        return gap_ok & (r2 < self.support_radius ** 2), y

    def forward(self, x, jac=False):
        x = _sphere_points(x)
        rot = self.pre_rotation
        xr = rot.apply(x) if rot is not None else x
        act, y = self._active(xr)
        out = xr.copy()
        if jac:
            jr = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()
        if act.any():
            ya, ja = self.inner.forward(y[act], jac)
            _, inv, cjac, invjac = CHARTS[self.chart]
            out[act] = inv(ya)
            if jac:
                jr[act] = invjac(ya) @ ja @ cjac(xr[act])
        if rot is not None:
            out = rot.inverse.apply(out)
        if not jac:
            return out, None
        m = rot.matrix if rot is not None else np.eye(3)
        return out, m.T @ jr @ m @ tangent_projector(x)

    def invert(self, x):
        x = _sphere_points(x)
        rot = self.pre_rotation
        xr = rot.apply(x) if rot is not None else x
        act, y = self._active(xr)
        out = xr.copy()
        if act.any():
            out[act] = CHARTS[self.chart][1](self.inner.invert(y[act]))
        return rot.inverse.apply(out) if rot is not None else out

    def surrogate(self):
        sub = self.inner.surrogate()
        if sub is self.inner:
            return self
        return ChartConjugation(sub, self.chart, self.pre_rotation)


class BlendMap(Primitive):
    """Sphere map equal to ``base`` outside ``p^{-1}(B(eps))`` and, in the
    north chart, to ``(1 - t gamma) fbar + t gamma y`` inside, where
    ``fbar = p base p^{-1}`` and ``gamma = gamma_flatten(eps, .)``."""

    domain = "sphere"

    def __init__(self, base: "DiffeoChain", eps: float, t: float, jet=None):
        self.base = base
        self.eps = float(eps)
        self.t = float(t)
        gamma_flatten(self.eps, np.zeros(2))  # validates eps
        # ambient evaluation near the base point has absolute error ~1e-16,
        # which swamps fbar(y) - y = O(|y|^2) once eps is tiny
        if jet is None and self.eps <= JET_EPS:
            jet = fbar_hessian(base)
        self.jet = jet

    def _fbar(self, y, jac):
        x = stereo_north_inv(y)
        fx, jf = self.base.forward(x, jac)
        fb = stereo_north(fx)
        dfb = stereo_north_jac(fx) @ jf @ stereo_north_inv_jac(y) if jac else None
        if self.jet is not None:
            near = (y * y).sum(axis=-1) < (2.0 * self.eps) ** 2
            if near.any():
                hy = np.einsum("kij,nj->nki", self.jet, y[near])
                fb[near] = y[near] + 0.5 * np.einsum("nki,ni->nk", hy, y[near])
                if jac:
                    dfb[near] = np.eye(2) + hy
        return fb, dfb

    def _inside(self, x):
        # |p(x)| < eps  <=>  x in the small cap around the south pole
        south = x[..., 2] < 0
        y = np.zeros(x.shape[:-1] + (2,))
        y[south] = stereo_north(x[south])
        return south & ((y * y).sum(axis=-1) < self.eps ** 2), y

    def chart_map(self, y, jac=False):
        """The blended planar map on B(2 eps) and its Jacobian."""
        y = np.asarray(y, dtype=float)
        fb, dfb = self._fbar(y, jac)
        tg = self.t * gamma_flatten(self.eps, y)
        s = (1.0 - tg)[..., None] * fb + tg[..., None] * y
        if not jac:
            return s, None
        grad = gamma_flatten_grad(self.eps, y)
        ds = ((1.0 - tg)[..., None, None] * dfb + tg[..., None, None] * np.eye(2)
              + self.t * (y - fb)[..., :, None] * grad[..., None, :])
        return s, ds

    def forward(self, x, jac=False):
        x = _sphere_points(x)
        out, jout = self.base.forward(x, jac)
        if self.t == 0.0:
            return out, jout
        inside, y = self._inside(x)
        if inside.any():
            s, ds = self.chart_map(y[inside], jac)
            out = out.copy()
            out[inside] = stereo_north_inv(s)
            if jac:
                jout = jout.copy()
                jout[inside] = (stereo_north_inv_jac(s) @ ds @ stereo_north_jac(x[inside])
                                @ tangent_projector(x[inside]))
        return out, jout

    def invert(self, x):
        x = _sphere_points(x)
        pre = self.base.invert(x)
        if self.t == 0.0:
            return pre
        inside, _ = self._inside(pre)
        if inside.any():
            target = stereo_north(x[inside])
            r = self.eps
            y = newton_invert(lambda z: self.chart_map(z, True), target,
                              seed_box=(-r, r), seed_n=32)
            pre = pre.copy()
            pre[inside] = stereo_north_inv(y)
        return pre

    def surrogate(self):
        sub = self.base.surrogate()
        return self if sub is self.base else BlendMap(sub, self.eps, self.t, self.jet)


JET_EPS = 1e-6
_JET_STEP = 1e-4


def fbar_hessian(base: "DiffeoChain"):
    """Second derivatives ``H[k, i, j]`` at 0 of the north-chart map of ``base``,
    by central differences of its exact Jacobian."""
    h = _JET_STEP
    y = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    fx, jf = base.forward(stereo_north_inv(y), True)
    dfb = stereo_north_jac(fx) @ jf @ stereo_north_inv_jac(y)
    hess = np.empty((2, 2, 2))
    hess[:, :, 0] = (dfb[0] - dfb[1]) / (2 * h)
    hess[:, :, 1] = (dfb[2] - dfb[3]) / (2 * h)
    # symmetrize in the two derivative slots
    return 0.5 * (hess + hess.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# chains


@dataclass(frozen=True)
class DiffeoChain:
    """Composition of primitives applied left to right."""

    primitives: tuple = ()

    def __init__(self, primitives=()):
        prims = tuple(primitives)
        domains = {p.domain for p in prims}
        if len(domains) > 1:
            raise ValueError("cannot mix sphere and planar primitives in one chain")
        object.__setattr__(self, "primitives", prims)

    @property
    def domain(self):
        return self.primitives[0].domain if self.primitives else None

    def __len__(self):
        return len(self.primitives)

    def then(self, *others) -> "DiffeoChain":
        """Chain applying ``self`` first and then ``others`` in order."""
        prims = list(self.primitives)
        for o in others:
            prims.extend(o.primitives if isinstance(o, DiffeoChain) else [o])
        return DiffeoChain(prims)

    def forward(self, x, jac=False):
        x = np.asarray(x, dtype=float)
        dim = x.shape[-1]
        j = np.broadcast_to(np.eye(dim), x.shape[:-1] + (dim, dim)).copy() if jac else None
        if jac and dim == 3:
            j = tangent_projector(x)
        for i, p in enumerate(self.primitives):
            try:
                x, jp = p.forward(x, jac)
            except Exception as exc:
                raise ChainEvaluationError(i, p, exc) from exc
            if jac:
                j = jp @ j
        return x, j

    def evaluate(self, x):
        return self.forward(x, False)[0]

    def jacobian(self, x):
        return self.forward(x, True)[1]

    def invert(self, x):
        x = np.asarray(x, dtype=float)
        for i in range(len(self.primitives) - 1, -1, -1):
            p = self.primitives[i]
            try:
                x = p.invert(x)
            except Exception as exc:
                raise ChainEvaluationError(i, p, exc) from exc
        return x

    def surrogate(self) -> "DiffeoChain":
        subs = [p.surrogate() for p in self.primitives]
        if all(a is b for a, b in zip(subs, self.primitives)):
            return self
        return DiffeoChain(subs)


def evaluate(chain: DiffeoChain, x):
    return chain.evaluate(x)


def jacobian(chain: DiffeoChain, x):
    return chain.jacobian(x)


def invert(chain: DiffeoChain, x):
    return chain.invert(x)


def tangent_basis(x):
    """Orthonormal tangent frames ``(t1, t2)`` with ``t1 x t2 = x``."""
    x = _sphere_points(x)
    ref = np.where(np.abs(x[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    t1 = normalize(ref - (ref * x).sum(axis=-1, keepdims=True) * x)
    t2 = np.cross(x, t1)
    return t1, t2


def sphere_det(jac, x, fx):
    """Oriented area factor of an ambient sphere Jacobian at ``x``."""
    t1, t2 = tangent_basis(x)
    a = np.einsum("...ij,...j->...i", jac, t1)
    b = np.einsum("...ij,...j->...i", jac, t2)
    return (np.cross(a, b) * fx).sum(axis=-1)


def chart_jacobian(chain: DiffeoChain, y, chart: str = "north"):
    """Jacobian of ``chart o chain o chart^{-1}`` at planar points ``y``."""
    fwd, inv, cjac, invjac = CHARTS[chart]
    x = inv(y)
    fx, j = chain.forward(x, True)
    return fwd(fx), cjac(fx) @ j @ invjac(y)


# ---------------------------------------------------------------------------
# Newton inversion of planar maps


def newton_invert(fn_jac, target, seed=None, seed_box=None, seed_n: int = 32,
                  tol: float = 1e-12, max_iter: int = 50):
    """Solve ``F(z) = target`` for planar maps by damped Newton iteration.

    Parameters
    ----------
    fn_jac : callable
        ``z -> (F(z), dF(z))`` on arrays of shape ``(n, 2)``.
    target : array_like, shape (n, 2)
    seed : array_like, optional
        Initial guesses; by default the best of a ``seed_n x seed_n`` grid of
        forward images over ``seed_box`` (or the target itself).
    """
    target = np.asarray(target, dtype=float).reshape(-1, 2)
    if seed is None and seed_box is not None:
        lo, hi = seed_box
        ax = np.linspace(lo, hi, seed_n)
        g = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
        img, _ = fn_jac(g)
        d2 = ((target[:, None, :] - img[None, :, :]) ** 2).sum(axis=-1)
        z = g[np.argmin(d2, axis=1)]
    elif seed is None:
        z = target.copy()
    else:
        z = np.asarray(seed, dtype=float).reshape(-1, 2).copy()
    fz, jz = fn_jac(z)
    res = np.linalg.norm(fz - target, axis=1)
    scale = np.maximum(1.0, np.linalg.norm(target, axis=1))
    for _ in range(max_iter):
        todo = res > tol * scale
        if not todo.any():
            break
        try:
            step = np.linalg.solve(jz[todo], (target[todo] - fz[todo])[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise InversionError("singular Jacobian during Newton inversion") from exc
        lam = np.ones(todo.sum())
        zt, rt = z[todo], res[todo]
        for _ in range(30):
            cand = zt + lam[:, None] * step
            fc, jc = fn_jac(cand)
            rc = np.linalg.norm(fc - target[todo], axis=1)
            ok = rc < rt
            if ok.all():
                break
            lam = np.where(ok, lam, 0.5 * lam)
        z[todo] = cand
        fz[todo], jz[todo], res[todo] = fc, jc, rc
    bad = res > tol * scale * 10
    if bad.any():
        i = int(np.argmax(bad))
        raise InversionError(f"Newton inversion failed at target {target[i]} (residual {res[i]:.3e})")
    return z
