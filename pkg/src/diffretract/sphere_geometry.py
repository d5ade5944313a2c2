"""Points of S^2, rotations, stereographic charts and tangent frames.

Charts carry the factor-2 convention::

    p(x)  = (2 x1, 2 x2) / (1 - x3)     (projection from the north pole)
    p~(x) = (2 x1, 2 x2) / (1 + x3)     (projection from the south pole)

so that ``|p~(x)| |p(x)| = 4``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

SOUTH_POLE = np.array([0.0, 0.0, -1.0])
NORTH_POLE = np.array([0.0, 0.0, 1.0])
E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])



class ChartDomainError(ValueError):
    """A point lies at (or numerically too near) the excluded pole of a chart."""


class DegenerateFrameError(ValueError):
    """Tangent vectors too small, dependent, or negatively oriented."""


def normalize(x):
    """Project nonzero 3-vectors onto the unit sphere."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize the zero vector")
    return x / n


def tangent_projector(x):
    """Orthogonal projector ``I - x x^T`` onto the tangent plane at ``x``."""
    x = np.asarray(x, dtype=float)
    return np.eye(3) - x[..., :, None] * x[..., None, :]


# ---------------------------------------------------------------------------
# rotations


@dataclass(frozen=True, eq=False)
class Rotation:
    """Element of SO(3) stored as a 3x3 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-10:
            raise ValueError("rotation matrix is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > 1e-10:
            raise ValueError("rotation matrix must have determinant +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = normalize(np.asarray(axis, dtype=float))
        return cls(_ScipyRotation.from_rotvec(axis * angle).as_matrix())

    @classmethod
    def from_quaternion(cls, quat) -> "Rotation":
        """Quaternion in scalar-last order ``(x, y, z, w)``."""
        return cls(_ScipyRotation.from_quat(quat).as_matrix())

    def as_quaternion(self) -> np.ndarray:
        return _ScipyRotation.from_matrix(self.matrix).as_quat()

    @property
    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def apply(self, x):
        return np.asarray(x, dtype=float) @ self.matrix.T


# ---------------------------------------------------------------------------
# charts


def _pole_gap(x, sign):
    # 1 - sign*x3 without cancellation near the pole (x assumed unit)
    x = np.asarray(x, dtype=float)
    x3 = x[..., 2]
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    far = sign * x3 <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        near = r2 / (1.0 + sign * x3)
    return np.where(far, 1.0 - sign * x3, near)


def _check_pole(x, sign, name):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError(f"expected 3-vectors, got shape {x.shape}")
    # the gap is computed without cancellation, so only the pole itself is excluded
    bad = ~(_pole_gap(x, sign) > 0.0)
    if np.any(bad):
        idx = np.argwhere(np.atleast_1d(bad))[0]
        raise ChartDomainError(f"{name}: point {np.atleast_2d(x)[idx[0]]} is at the excluded pole")


def stereo_north(x):
    """Chart p from the north pole; the south pole maps to the origin."""
    _check_pole(x, 1.0, "stereo_north")
    x = np.asarray(x, dtype=float)
    return 2.0 * x[..., :2] / _pole_gap(x, 1.0)[..., None]


def stereo_south(x):
    """Chart p~ from the south pole; the north pole maps to the origin."""
    _check_pole(x, -1.0, "stereo_south")
    x = np.asarray(x, dtype=float)
    return 2.0 * x[..., :2] / _pole_gap(x, -1.0)[..., None]


def _chart_inv(y, sign):
    y = np.asarray(y, dtype=float)
    s = (y * y).sum(axis=-1)
    den = s + 4.0
    x12 = 4.0 * y / den[..., None]
    x3 = sign * (s - 4.0) / den
    return np.concatenate([x12, x3[..., None]], axis=-1)


def stereo_north_inv(y):
    return _chart_inv(y, 1.0)


def stereo_south_inv(y):
    return _chart_inv(y, -1.0)


def _chart_jac(x, sign):
    # 2x3 Jacobian of the ambient formula, restricted later to tangents
    x = np.asarray(x, dtype=float)
    g = _pole_gap(x, sign)
    out = np.zeros(x.shape[:-1] + (2, 3))
    out[..., 0, 0] = 2.0 / g
    out[..., 1, 1] = 2.0 / g
    out[..., 0, 2] = sign * 2.0 * x[..., 0] / g ** 2
    out[..., 1, 2] = sign * 2.0 * x[..., 1] / g ** 2
    return out


def stereo_north_jac(x):
    _check_pole(x, 1.0, "stereo_north")
    return _chart_jac(x, 1.0)


def stereo_south_jac(x):
    _check_pole(x, -1.0, "stereo_south")
    return _chart_jac(x, -1.0)


def _chart_inv_jac(y, sign):
    y = np.asarray(y, dtype=float)
    s = (y * y).sum(axis=-1)
    den = s + 4.0
    out = np.zeros(y.shape[:-1] + (3, 2))
    eye = np.eye(2)
    out[..., :2, :] = (4.0 / den)[..., None, None] * eye - (8.0 / den ** 2)[..., None, None] * (
        y[..., :, None] * y[..., None, :])
    out[..., 2, :] = sign * (16.0 / den ** 2)[..., None] * y
    return out


def stereo_north_inv_jac(y):
    return _chart_inv_jac(y, 1.0)


def stereo_south_inv_jac(y):
    return _chart_inv_jac(y, -1.0)


CHARTS = {
    "north": (stereo_north, stereo_north_inv, stereo_north_jac, stereo_north_inv_jac),
    "south": (stereo_south, stereo_south_inv, stereo_south_jac, stereo_south_inv_jac),
}


# ---------------------------------------------------------------------------
# frames


@dataclass(frozen=True)
class TangentFrame:
    base: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("u", "v"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if abs(vec @ self.base) > 1e-10 * max(1.0, np.linalg.norm(vec)):
                raise ValueError(f"{name} is not tangent at the base point")


def gram_frame(u, v, base):
    """Orthonormalize ``u, v`` at ``base``.

    Returns
    -------
    u1, u2 : ndarray
        ``u1 = u/|u|`` and ``u2 = u1 x base``, the unit tangent with
        ``{u1, u2}`` positively oriented.
    a, b, c : float
        ``a = |u|`` and ``v = b u1 + c u2``.

    Raises
    ------
    DegenerateFrameError
        If ``|u|`` or ``c`` is below 1e-12 or ``c < 0`` (orientation reversal).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    base = np.asarray(base, dtype=float)
    TangentFrame(base, u, v)
    a = float(np.linalg.norm(u))
    if a < 1e-12:
        raise DegenerateFrameError(f"|u| = {a:.3e} is degenerate")
    u1 = u / a
    u2 = np.cross(u1, base)
    u2 /= np.linalg.norm(u2)
    b = float(v @ u1)
    c = float(v @ u2)
    if abs(c) < 1e-12:
        raise DegenerateFrameError(f"c = {c:.3e}: u and v are dependent")
    if c < 0:
        raise DegenerateFrameError(f"c = {c:.3e} < 0: frame is orientation-reversing")
    return u1, u2, a, b, c


_REFERENCE = np.column_stack([SOUTH_POLE, E1, E2])


def frame_alpha(fx0, u1, u2) -> Rotation:
    """Rotation sending ``(fx0, u1, u2)`` to ``(x0, e1, e2)``."""
    frame = np.column_stack([fx0, u1, u2]).astype(float)
    if np.max(np.abs(frame.T @ frame - np.eye(3))) > 1e-8:
        raise ValueError("frame is not orthonormal")
    if np.linalg.det(frame) * np.linalg.det(_REFERENCE) <= 0:
        raise ValueError("frame has the wrong handedness")
    m = _REFERENCE @ frame.T
    # polish to exact orthogonality (input is orthonormal to 1e-8)
    uu, _, vt = np.linalg.svd(m)
    return Rotation(uu @ vt)


def sphere_grid(n: int = 64):
    """Equiangular grid avoiding the poles.

    Returns ``theta, phi, points`` with ``theta_i = (i + 1/2) pi / n``,
    ``phi_j = 2 pi j / n`` flattened row-major (theta outer).
    """
    th = (np.arange(n) + 0.5) * np.pi / n
    ph = 2.0 * np.pi * np.arange(n) / n
    tt, pp = np.meshgrid(th, ph, indexing="ij")
    tt, pp = tt.ravel(), pp.ravel()
    pts = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1)
    return tt, pp, pts
