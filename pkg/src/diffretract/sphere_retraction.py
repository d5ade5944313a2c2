"""Retraction of orientation-preserving sphere diffeomorphisms onto SO(3).

The path ``P_t(f)`` runs in two halves. The first half ``Q`` straightens the
differential of ``f`` at the base point ``x0`` (the south pole) into an
orthonormal frame by composing with the flow of a cut-off linear field. The
second half conjugates by the rotation ``alpha(f)`` that carries this frame to
``(x0, e1, e2)``, leaving a map ``f1`` that fixes ``x0`` with identity
differential, and retracts ``f1`` to the identity: ``S`` flattens ``f1`` to the
identity on a cap of radius ``eps(f1)`` about ``x0``, and ``T`` hands the
remaining map, seen from the opposite chart, to the square retraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffeo_engine import (
    DEFAULT_STEPS,
    BlendMap,
    ChartConjugation,
    DiffeoChain,
    PlanarFlowMap,
    Primitive,
    QField,
    RotationMap,
    chart_jacobian,
    sphere_det,
)
from .smoothcore import (
    DiskGrid,
    clock_pair,
    disk_samples,
    gamma_gauge,
    sobolev3_sq,
)
from .sphere_geometry import (
    E1,
    E2,
    SOUTH_POLE,
    ChartDomainError,
    Rotation,
    frame_alpha,
    gram_frame,
    sphere_grid,
    stereo_north,
    stereo_north_inv,
    stereo_south,
    stereo_south_inv,
    stereo_south_jac,
    stereo_south_inv_jac,
    tangent_projector,
)
from .square_retraction import CENTER, SquareMap, stage_f

SOBOLEV_C = 10.0
# chart radius outside which S_1(f) is the identity, in units of 1/eps
IDENTITY_RADIUS = 8.0
# half-width of the square in units of 1/eps
SQUARE_HALF_WIDTH = 12.0
IDENTITY_TOL = 1e-13
# smallest usable length scale 2/a of the scaled square; finite-difference
# steps are 1e-4 of it and must stay well above the spacing of doubles near 1/2
MIN_SQUARE_SCALE = 1e-10


class GuaranteeError(RuntimeError):
    """A sampled guarantee that the construction relies on does not hold."""


class GeometryError(RuntimeError):
    """A map is not the identity where the construction requires it."""


class ResolutionError(RuntimeError):
    """The scaled square is too fine to resolve in double precision."""


def _x0():
    return SOUTH_POLE[None, :]


def check_orientation(f: DiffeoChain, n: int = 16) -> float:
    """Minimum Jacobian determinant of ``f`` on an ``n x n`` sphere grid."""
    _, _, pts = sphere_grid(n)
    fx, j = f.forward(pts, True)
    det = float(np.min(sphere_det(j, pts, fx)))
    if det <= 0:
        raise ValueError(f"map is not an orientation-preserving diffeomorphism (det {det:.3e})")
    return det


def is_identity(f: DiffeoChain, n: int = 64, tol: float = IDENTITY_TOL) -> bool:
    """True when ``f`` moves no point of the ``n x n`` grid (nor ``x0``) by more than ``tol``."""
    if len(f) == 0:
        return True
    _, _, pts = sphere_grid(n)
    pts = np.concatenate([pts, _x0(), -_x0()])
    return float(np.max(np.abs(f.evaluate(pts) - pts))) <= tol


# ---------------------------------------------------------------------------
# stage Q


@dataclass(frozen=True)
class QData:
    """Frame data of ``f`` at ``x0``.

    ``df e1 = a u1`` and ``df e2 = b u1 + c u2`` with ``(u1, u2)`` orthonormal;
    ``alpha`` carries ``(f(x0), u1, u2)`` to ``(x0, e1, e2)`` and
    ``g1 = [[a, b], [0, c]]^{-1}``.
    """

    f: DiffeoChain
    fx0: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    alpha: Rotation
    a: float
    b: float
    c: float
    g1: np.ndarray

    @property
    def orthonormal(self) -> bool:
        return bool(np.max(np.abs(self.g1 - np.eye(2))) <= 1e-14)


def q_data(f: DiffeoChain, validate: bool = True) -> QData:
    if validate:
        check_orientation(f)
    fx0, j = f.forward(_x0(), True)
    fx0, j = fx0[0], j[0]
    u1, u2, a, b, c = gram_frame(j @ E1, j @ E2, fx0)
    alpha = frame_alpha(fx0, u1, u2)
    g1 = np.array([[1.0 / a, -b / (a * c)], [0.0, 1.0 / c]])
    return QData(f, fx0, u1, u2, alpha, a, b, c, g1)


def q_psi(qd: QData, t: float, steps_per_unit: int = DEFAULT_STEPS) -> Primitive | None:
    """``Psi_{f,t}``: the north-chart flow of the cut-off field ``rho (g1 - I) g_t^{-1} z``
    up to time ``t``, conjugated by ``p o alpha``. ``None`` stands for the identity."""
    if t == 0.0 or qd.orthonormal:
        return None
    flow_map = PlanarFlowMap(QField(qd.g1), 0.0, float(t), steps_per_unit)
    return ChartConjugation([flow_map], "north", qd.alpha)


def stage_q(f: DiffeoChain, t: float, qd: QData | None = None,
            steps_per_unit: int = DEFAULT_STEPS) -> DiffeoChain:
    """``Q_t(f) = Psi_{f,t} o f``."""
    qd = qd or q_data(f)
    psi = q_psi(qd, t, steps_per_unit)
    return f if psi is None else f.then(psi)


# ---------------------------------------------------------------------------
# eps


@dataclass(frozen=True)
class EpsilonReport:
    eps1: float
    eps: float
    sobolev_h: float
    sobolev_gauge: float
    c: float = SOBOLEV_C
    max_dfbar_dev: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.eps <= 0.5 and self.eps <= 0.5 * self.eps1 * (1 + 1e-12)):
            raise GuaranteeError(f"inconsistent eps report: eps1={self.eps1}, eps={self.eps}")


def fbar(f1: DiffeoChain, y):
    """``p o f1 o p^{-1}`` on planar points."""
    return stereo_north(f1.evaluate(stereo_north_inv(np.asarray(y, dtype=float))))


def check_omega1(f1: DiffeoChain, tol_point: float = 1e-10, tol_diff: float = 1e-8):
    fx0, j = f1.forward(_x0(), True)
    if np.max(np.abs(fx0[0] - SOUTH_POLE)) > tol_point:
        raise ValueError("map does not fix the base point")
    dev = np.max(np.abs(j[0] - tangent_projector(SOUTH_POLE)))
    if dev > tol_diff:
        raise ValueError(f"differential at the base point differs from the identity by {dev:.3e}")


def epsilon(f1: DiffeoChain, c: float = SOBOLEV_C, fd_step: float = 1e-2,
            n_check: int = 256, validate: bool = True) -> EpsilonReport:
    """Radius ``eps(f1)`` of the cap on which ``S`` flattens ``f1``.

    ``eps1 = (1/c) [1/c^2 + |h_f|_3^2]^{-1/2}`` with ``h_f`` the height of
    ``f1 o p^{-1}`` on B(1); then ``eps = (1/(8c)) [1/(16 c^2 eps1^2) +
    |gamma g_f|_3^2]^{-1/2}`` with the gauge ``g_f`` built from ``d fbar - I``
    and cut off by ``gamma`` on B(3 eps1 / 4). Both guarantees (``fbar``
    defined on B(2 eps), ``|d fbar - I| < 1/4`` on B(eps)) are re-verified on
    ``n_check`` points.
    """
    if validate:
        check_omega1(f1)
    grid = DiskGrid(radius=1.0, derivative_step=fd_step)

    def height(y):
        return f1.evaluate(stereo_north_inv(y))[:, 2]

    sob_h = sobolev3_sq(height, grid)
    eps1 = (1.0 / c) / math.sqrt(1.0 / c ** 2 + sob_h)

    def gauge(y):
        _, jb = chart_jacobian(f1, y, "north")
        dev = ((jb - np.eye(2)) ** 2).sum(axis=(1, 2))
        return gamma_gauge(eps1, y) * np.sqrt(1.0 / 64.0 + dev)

    ggrid = DiskGrid(radius=0.75 * eps1, derivative_step=fd_step)
    sob_g = sobolev3_sq(gauge, ggrid)
    eps = (1.0 / (8.0 * c)) / math.sqrt(1.0 / (16.0 * c ** 2 * eps1 ** 2) + sob_g)
    eps = min(eps, 0.5)
    # sampled guarantees
    try:
        fbar(f1, disk_samples(n_check, 2.0 * eps))
    except ChartDomainError as exc:
        raise GuaranteeError(f"fbar undefined on B(2 eps): {exc}") from exc
    _, jb = chart_jacobian(f1, disk_samples(n_check, eps), "north")
    worst = float(np.max(np.linalg.norm(jb - np.eye(2), ord=2, axis=(1, 2))))
    if worst >= 0.25:
        raise GuaranteeError(f"|d fbar - I| reaches {worst:.3f} on B(eps)")
    return EpsilonReport(eps1, eps, sob_h, sob_g, c, worst)


# ---------------------------------------------------------------------------
# stage S


def stage_s(f1: DiffeoChain, eps: float, t: float, n_check: int = 256) -> DiffeoChain:
    """Blend ``fbar`` towards the identity on B(eps): ``S_t = f1`` outside
    ``p^{-1}(B(eps))`` and ``S_1`` is the identity on ``p^{-1}(B(eps/2))``."""
    if t == 0.0:
        return f1
    blend = BlendMap(f1, eps, t)
    _, ds = blend.chart_map(disk_samples(n_check, eps), True)
    worst = float(np.max(np.linalg.norm(ds - np.eye(2), ord=2, axis=(1, 2))))
    if worst >= 1.0:
        raise GuaranteeError(f"|d S_t - I| reaches {worst:.3f} on B(eps) at t = {t}")
    return DiffeoChain([blend])


# ---------------------------------------------------------------------------
# stage T


class SphereSquareMap(SquareMap):
    """A sphere map that is the identity on ``p^{-1}(B(eps/2))``, seen in the
    south chart scaled by ``1/a`` and moved to the unit square.

    ``u = (y / a + 1) / 2`` with ``y`` the south-chart coordinate. The map is
    the identity outside the disk of radius ``IDENTITY_RADIUS / (2 a eps)``
    about the centre. Its non-trivial part sits at scale ``1/a`` around the
    centre, so curve steps are rescaled by the distance to the centre.
    """

    class_tag = "F"
    pullback = True
    # a few units in the last place at 1/2
    inverse_tol = 1e-15

    def __init__(self, chain: DiffeoChain, eps: float):
        self.chain = chain
        self.eps = float(eps)
        self.a = SQUARE_HALF_WIDTH / self.eps
        self.identity_radius = IDENTITY_RADIUS / self.eps / (2.0 * self.a)
        self.collar = 0.5 - self.identity_radius
        self.delta = 2.0 / self.a
        if self.delta < MIN_SQUARE_SCALE:
            raise ResolutionError(
                f"eps = {self.eps:.3e} puts the map at scale {self.delta:.3e} in the square, "
                f"below the resolvable {MIN_SQUARE_SCALE:g}")
        self.name = "south-chart square"
        self._surrogate = chain.surrogate()

    def to_chart(self, u):
        return self.a * (2.0 * np.asarray(u, dtype=float) - 1.0)

    def from_chart(self, y):
        return 0.5 * (np.asarray(y, dtype=float) / self.a + 1.0)

    def _apply(self, chain, u, jac):
        u = np.asarray(u, dtype=float).reshape(-1, 2)
        out = u.copy()
        j = np.broadcast_to(np.eye(2), (len(u), 2, 2)).copy() if jac else None
        act = ~self.fixed_zone(u)
        if act.any():
            y = self.to_chart(u[act])
            if jac:
                fy, jy = chart_jacobian(chain, y, "south")
                j[act] = jy
            else:
                fy = stereo_south(chain.evaluate(stereo_south_inv(y)))
            out[act] = self.from_chart(fy)
        return out, j

    def forward(self, u, jac=False):
        u = np.asarray(u, dtype=float)
        out, j = self._apply(self.chain, u, jac)
        out = out.reshape(u.shape)
        return (out, j.reshape(u.shape + (2,))) if jac else (out, None)

    def field_jacobian(self, u):
        return self._apply(self._surrogate, u, True)[1]

    def invert(self, v):
        v = np.asarray(v, dtype=float)
        flat = v.reshape(-1, 2)
        out = flat.copy()
        act = ~self.fixed_zone(flat)
        if act.any():
            y = self.to_chart(flat[act])
            out[act] = self.from_chart(stereo_south(self.chain.invert(stereo_south_inv(y))))
        return out.reshape(v.shape)

    def step_scale(self, u):
        r2 = ((np.asarray(u) - CENTER) ** 2).sum(axis=-1)
        return np.minimum(1.0, 3.0 * np.sqrt(r2 + self.delta ** 2))

    def fd_step(self, u):
        return 1e-4 * self.step_scale(u)

    def trace_nodes(self, n: int = 257):
        # clustered at the centre, where the structure lives
        top = math.asinh(self.identity_radius / self.delta)
        tau = np.linspace(-top, top, n)
        nodes = CENTER[1] + self.delta * np.sinh(tau)
        nodes[0], nodes[-1] = CENTER[1] - self.identity_radius, CENTER[1] + self.identity_radius
        return nodes


class SquareConjugation(Primitive):
    """Sphere map acting through a square map in the scaled south chart
    and as the identity outside it."""

    domain = "sphere"

    def __init__(self, square: SquareMap, box: SphereSquareMap):
        self.square = square
        self.box = box

    def _active(self, x):
        x = np.asarray(x, dtype=float)
        away = x[..., 2] > -1.0 + 1e-15
        u = np.full(x.shape[:-1] + (2,), -1.0)
        if away.any():
            u[away] = self.box.from_chart(stereo_south(x[away]))
        act = away & ~self.box.fixed_zone(u)
        return act, u

    def forward(self, x, jac=False):
        x = np.asarray(x, dtype=float)
        act, u = self._active(x)
        out = x.copy()
        j = tangent_projector(x) if jac else None
        if act.any():
            v, jv = self.square.forward(u[act], jac)
            y = self.box.to_chart(v)
            out[act] = stereo_south_inv(y)
            if jac:
                j[act] = stereo_south_inv_jac(y) @ jv @ stereo_south_jac(x[act]) @ tangent_projector(x[act])
        return out, j

    def invert(self, x):
        x = np.asarray(x, dtype=float)
        act, u = self._active(x)
        out = x.copy()
        if act.any():
            out[act] = stereo_south_inv(self.box.to_chart(self.square.invert(u[act])))
        return out


def check_outside_identity(box: SphereSquareMap, n: int = 512, tol: float = 1e-12):
    """Sample the cap ``p^{-1}(B(eps/2))`` and require the chain to fix it."""
    y = disk_samples(n, 0.5 * box.eps * (1.0 - 1e-9))
    x = stereo_north_inv(y)
    err = float(np.max(np.abs(box.chain.evaluate(x) - x)))
    if err > tol:
        raise GeometryError(f"map moves the flattened cap by {err:.3e}")
    return err


def stage_t(f1_flat: DiffeoChain, eps: float, t: float,
            steps_per_unit: int = DEFAULT_STEPS) -> DiffeoChain:
    """``T_t``: the square retraction ``F_t`` applied in the scaled south chart.

    ``T_0 = f1_flat`` and ``T_1`` is the identity.
    """
    if t == 0.0:
        return f1_flat
    if t == 1.0 or len(f1_flat) == 0:
        return DiffeoChain()
    box = SphereSquareMap(f1_flat, eps)
    check_outside_identity(box)
    ft = stage_f(box, t, steps_per_unit)
    return DiffeoChain([SquareConjugation(ft, box)])


# ---------------------------------------------------------------------------
# R and P


@dataclass
class StagePlan:
    """Per-map cache of the stage data.

    ``eps_report`` and the flattened map are computed on first use, since
    only times in the second half of ``R`` need them.
    """

    f: DiffeoChain
    steps_per_unit: int = DEFAULT_STEPS
    fd_step: float = 1e-2
    sobolev_c: float = SOBOLEV_C
    qdata: QData = field(init=False)
    _f1: DiffeoChain | None = field(default=None, init=False, repr=False)
    _eps: EpsilonReport | None = field(default=None, init=False, repr=False)
    _flat: DiffeoChain | None = field(default=None, init=False, repr=False)
    _f1_identity: bool | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.qdata = q_data(self.f)

    @property
    def alpha(self) -> Rotation:
        return self.qdata.alpha

    def q(self, t: float) -> DiffeoChain:
        return stage_q(self.f, t, self.qdata, self.steps_per_unit)

    @property
    def f1(self) -> DiffeoChain:
        """``alpha(f) o Q_1(f)``, a map fixing ``x0`` with identity differential."""
        if self._f1 is None:
            self._f1 = self.q(1.0).then(RotationMap(self.alpha))
        return self._f1

    @property
    def f1_is_identity(self) -> bool:
        if self._f1_identity is None:
            self._f1_identity = is_identity(self.f1)
        return self._f1_identity

    @property
    def eps_report(self) -> EpsilonReport:
        if self._eps is None:
            self._eps = epsilon(self.f1, self.sobolev_c, self.fd_step)
        return self._eps

    def s(self, t: float) -> DiffeoChain:
        if t == 0.0 or self.f1_is_identity:
            return self.f1
        return stage_s(self.f1, self.eps_report.eps, t)

    @property
    def flat(self) -> DiffeoChain:
        """``S_1(f1)``."""
        if self._flat is None:
            self._flat = self.s(1.0)
        return self._flat

    def t_stage(self, t: float) -> DiffeoChain:
        if t == 0.0:
            return self.flat
        if t == 1.0 or self.f1_is_identity:
            return DiffeoChain()
        return stage_t(self.flat, self.eps_report.eps, t, self.steps_per_unit)

    def square_input(self) -> SphereSquareMap | None:
        """``S_1(f1)`` as a map of the unit square (``None`` when ``f1`` is the identity)."""
        if self.f1_is_identity:
            return None
        return SphereSquareMap(self.flat, self.eps_report.eps)

    def r(self, t: float) -> DiffeoChain:
        """``R_t(f1)``; a numerically trivial ``f1`` stays put."""
        if self.f1_is_identity:
            return self.f1
        half, local = clock_pair(t)
        return self.s(local) if half == "first" else self.t_stage(local)

    def check_alpha(self, tol: float = 1e-6) -> float:
        """``|alpha(f) - alpha(Q_1(f))|``; the two agree analytically."""
        other = q_data(self.q(1.0), validate=False).alpha
        dev = float(np.max(np.abs(other.matrix - self.alpha.matrix)))
        if dev > tol:
            raise GuaranteeError(f"alpha(Q_1(f)) differs from alpha(f) by {dev:.3e}")
        return dev

    def p(self, t: float) -> DiffeoChain:
        half, local = clock_pair(t)
        if half == "first":
            return self.q(local)
        inv = RotationMap(self.alpha.inverse)
        return self.r(local).then(inv)


def stage_r(f1: DiffeoChain, t: float, steps_per_unit: int = DEFAULT_STEPS) -> DiffeoChain:
    """``R_t(f1)``: ``S`` on the first half of the clock, ``T o S_1`` on the second."""
    check_omega1(f1)
    plan = StagePlan(f1, steps_per_unit)
    plan._f1 = f1
    return plan.r(t)


def retract_p(f: DiffeoChain, t: float, plan: StagePlan | None = None,
              steps_per_unit: int = DEFAULT_STEPS) -> DiffeoChain:
    """``P_t(f)``: ``Q`` on the first half, ``alpha^{-1} o R(alpha o Q_1(f))`` on the second.

    At ``t = 1`` the result is the rotation ``alpha(f)^{-1}``; the agreement of
    ``alpha(f)`` with ``alpha(Q_1(f))`` is checked there.
    """
    plan = plan or StagePlan(f, steps_per_unit)
    out = plan.p(t)
    if t == 1.0:
        plan.check_alpha()
        x = random_check_points()
        want = plan.alpha.inverse.apply(x)
        err = float(np.max(np.abs(out.evaluate(x) - want)))
        if err > 1e-6:
            raise GuaranteeError(f"P_1(f) differs from alpha(f)^-1 by {err:.3e}")
    return out


def random_check_points(n: int = 64, seed: int = 0):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
