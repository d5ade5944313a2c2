"""Compiled RK4 kernels for the parametric planar vector fields.

Field kinds (``prm`` layout):

* ``KIND_Q``: ``prm[0:4]`` = g1 row-major. ``X_t(z) = rho(z) (g1 - I) g_t^{-1} z``
  with ``g_t = (1 - t) I + t g1``.
* ``KIND_VORTEX``: centre ``prm[0:2]``, radius ``prm[2]``, strength ``prm[3]``,
  time rate ``prm[4]``. ``X_t(z) = w (1 + tau t) b(z) J (z - c)``.
* ``KIND_TRANSLATE``: centre ``prm[0:2]``, radius ``prm[2]``, velocity
  ``prm[3:5]``, time rate ``prm[5]``. ``X_t(z) = (1 + tau t) b(z) v``.

``b`` is 1 on B(c, R/2) and 0 outside B(c, R) (smooth step in |z-c|^2/R^2).

Both radial profiles are evaluated through cubic Hermite tables of the exact
profile (value error below 1e-13). Jacobians use the derivative of the
interpolant, so values and Jacobians stay mutually consistent.
"""

import numpy as np
from numba import njit

from .smoothcore import rho_scalar, rho_slope_scalar, step_scalar, step_slope_scalar

KIND_Q = 0
KIND_VORTEX = 1
KIND_TRANSLATE = 2

STATUS_OK = 0
STATUS_DIVERGED = 1

_TAB_N = 8192


def _profile_table(fn, slope, lo, hi):
    nodes = np.linspace(lo, hi, _TAB_N + 1)
    vals = np.array([fn(u) for u in nodes])
    slopes = np.array([slope(u) for u in nodes]) * ((hi - lo) / _TAB_N)
    return vals, slopes


# rho as a function of r^2 on [1, 4]
_RHO_V, _RHO_D = _profile_table(rho_scalar, rho_slope_scalar, 1.0, 4.0)
_RHO_IH = _TAB_N / 3.0
# bump as a function of s = |z - c|^2 / R^2 on [1/4, 1]
_BUMP_V, _BUMP_D = _profile_table(lambda s: 1.0 - step_scalar(s, 0.25, 1.0, 0.1),
                                  lambda s: -step_slope_scalar(s, 0.25, 1.0, 0.1), 0.25, 1.0)
_BUMP_IH = _TAB_N / 0.75


@njit(cache=True, inline="always")
def _hermite1(vals, slopes, u):
    # u in cell units; returns value and d/du
    i = int(u)
    if i >= _TAB_N:
        i = _TAB_N - 1
    s = u - i
    f0 = vals[i]
    f1 = vals[i + 1]
    d0 = slopes[i]
    d1 = slopes[i + 1]
    s2 = s * s
    s3 = s2 * s
    v = f0 * (2.0 * s3 - 3.0 * s2 + 1.0) + d0 * (s3 - 2.0 * s2 + s) + f1 * (3.0 * s2 - 2.0 * s3) + d1 * (s3 - s2)
    dv = (f0 - f1) * (6.0 * s2 - 6.0 * s) + d0 * (3.0 * s2 - 4.0 * s + 1.0) + d1 * (3.0 * s2 - 2.0 * s)
    return v, dv


@njit(cache=True, inline="always")
def rho_table(r2):
    """``(rho, d rho / d r2)`` for ``1 < r2 < 4``."""
    v, dv = _hermite1(_RHO_V, _RHO_D, (r2 - 1.0) * _RHO_IH)
    return v, dv * _RHO_IH


@njit(cache=True)
def time_params(kind, prm, t, out):
    """Precompute the time-dependent constants of the field at time ``t``."""
    if kind == KIND_Q:
        a, b, c, d = prm[0], prm[1], prm[2], prm[3]
        ga = (1.0 - t) + t * a
        gb = t * b
        gc = t * c
        gd = (1.0 - t) + t * d
        idet = 1.0 / (ga * gd - gb * gc)
        ia, ib, ic, id_ = gd * idet, -gb * idet, -gc * idet, ga * idet
        out[0] = (a - 1.0) * ia + b * ic
        out[1] = (a - 1.0) * ib + b * id_
        out[2] = c * ia + (d - 1.0) * ic
        out[3] = c * ib + (d - 1.0) * id_
    elif kind == KIND_VORTEX:
        out[0], out[1] = prm[0], prm[1]
        out[2] = prm[2] * prm[2]
        out[3] = 1.0 / out[2]
        out[4] = prm[3] * (1.0 + prm[4] * t)
    else:
        out[0], out[1] = prm[0], prm[1]
        out[2] = prm[2] * prm[2]
        out[3] = 1.0 / out[2]
        amp = 1.0 + prm[5] * t
        out[4] = amp * prm[3]
        out[5] = amp * prm[4]


@njit(cache=True, inline="always")
def _bump(dx, dy, inv_r2):
    s = (dx * dx + dy * dy) * inv_r2
    if s <= 0.25:
        return 1.0, 0.0, 0.0
    b, db = _hermite1(_BUMP_V, _BUMP_D, (s - 0.25) * _BUMP_IH)
    db *= _BUMP_IH * 2.0 * inv_r2
    return b, db * dx, db * dy


@njit(cache=True, inline="always")
def field_tp(kind, tp, x, y):
    """Return ``(vx, vy, j00, j01, j10, j11)`` given precomputed time constants."""
    if kind == KIND_Q:
        lx = tp[0] * x + tp[1] * y
        ly = tp[2] * x + tp[3] * y
        r2 = x * x + y * y
        if r2 <= 1.0:
            return lx, ly, tp[0], tp[1], tp[2], tp[3]
        if r2 >= 4.0:
            return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
        rho, dr = rho_table(r2)
        dr *= 2.0
        gx, gy = dr * x, dr * y
        return (rho * lx, rho * ly, rho * tp[0] + lx * gx, rho * tp[1] + lx * gy,
                rho * tp[2] + ly * gx, rho * tp[3] + ly * gy)
    dx, dy = x - tp[0], y - tp[1]
    if dx * dx + dy * dy >= tp[2]:
        return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    b, bx, by = _bump(dx, dy, tp[3])
    if kind == KIND_VORTEX:
        amp = tp[4]
        vx, vy = -dy, dx
        return (amp * b * vx, amp * b * vy, amp * vx * bx, amp * (vx * by - b),
                amp * (vy * bx + b), amp * vy * by)
    vx, vy = tp[4], tp[5]
    return b * vx, b * vy, vx * bx, vx * by, vy * bx, vy * by


def field_eval(kind, prm, t, x, y):
    tp = np.zeros(8)
    time_params(kind, prm, t, tp)
    return field_tp(kind, tp, x, y)


@njit(cache=True)
def field_many(kind, prm, t, pts, out_v, out_j):
    tp = np.zeros(8)
    time_params(kind, prm, t, tp)
    for i in range(pts.shape[0]):
        r = field_tp(kind, tp, pts[i, 0], pts[i, 1])
        out_v[i, 0] = r[0]
        out_v[i, 1] = r[1]
        out_j[i, 0, 0] = r[2]
        out_j[i, 0, 1] = r[3]
        out_j[i, 1, 0] = r[4]
        out_j[i, 1, 1] = r[5]


@njit(cache=True)
def rk4_flow(kind, prm, support, pts, t0, t1, nsteps, want_jac, out_z, out_j):
    """Integrate every point from t0 to t1 with ``nsteps`` RK4 steps.

    ``out_z``/``out_j`` must hold the initial points and identity matrices.
    Points at distance >= ``support`` from the origin are fixed points of the
    field and are left alone. Returns the index of a diverged point or -1.
    """
    n = pts.shape[0]
    dt = (t1 - t0) / nsteps
    h2 = 0.5 * dt
    w6 = dt / 6.0
    limit2 = (10.0 * support + 10.0) ** 2
    sup2 = support * support
    idx = np.empty(n, np.int64)
    m = 0
    for i in range(n):
        if pts[i, 0] ** 2 + pts[i, 1] ** 2 < sup2:
            idx[m] = i
            m += 1
    tp1 = np.zeros(8)
    tp2 = np.zeros(8)
    tp4 = np.zeros(8)
    for k in range(nsteps):
        t = t0 + k * dt
        time_params(kind, prm, t, tp1)
        time_params(kind, prm, t + h2, tp2)
        time_params(kind, prm, t + dt, tp4)
        for q in range(m):
            i = idx[q]
            x = out_z[i, 0]
            y = out_z[i, 1]
            v1x, v1y, p00, p01, p10, p11 = field_tp(kind, tp1, x, y)
            v2x, v2y, q00, q01, q10, q11 = field_tp(kind, tp2, x + h2 * v1x, y + h2 * v1y)
            v3x, v3y, r00, r01, r10, r11 = field_tp(kind, tp2, x + h2 * v2x, y + h2 * v2y)
            v4x, v4y, s00, s01, s10, s11 = field_tp(kind, tp4, x + dt * v3x, y + dt * v3y)
            if want_jac:
                a00 = out_j[i, 0, 0]
                a01 = out_j[i, 0, 1]
                a10 = out_j[i, 1, 0]
                a11 = out_j[i, 1, 1]
                # K_i = DX(stage_i) (A + c_i dt K_{i-1})
                k1_00 = p00 * a00 + p01 * a10
                k1_01 = p00 * a01 + p01 * a11
                k1_10 = p10 * a00 + p11 * a10
                k1_11 = p10 * a01 + p11 * a11
                b00 = a00 + h2 * k1_00
                b01 = a01 + h2 * k1_01
                b10 = a10 + h2 * k1_10
                b11 = a11 + h2 * k1_11
                k2_00 = q00 * b00 + q01 * b10
                k2_01 = q00 * b01 + q01 * b11
                k2_10 = q10 * b00 + q11 * b10
                k2_11 = q10 * b01 + q11 * b11
                b00 = a00 + h2 * k2_00
                b01 = a01 + h2 * k2_01
                b10 = a10 + h2 * k2_10
                b11 = a11 + h2 * k2_11
                k3_00 = r00 * b00 + r01 * b10
                k3_01 = r00 * b01 + r01 * b11
                k3_10 = r10 * b00 + r11 * b10
                k3_11 = r10 * b01 + r11 * b11
                b00 = a00 + dt * k3_00
                b01 = a01 + dt * k3_01
                b10 = a10 + dt * k3_10
                b11 = a11 + dt * k3_11
                k4_00 = s00 * b00 + s01 * b10
                k4_01 = s00 * b01 + s01 * b11
                k4_10 = s10 * b00 + s11 * b10
                k4_11 = s10 * b01 + s11 * b11
                out_j[i, 0, 0] = a00 + w6 * (k1_00 + 2.0 * k2_00 + 2.0 * k3_00 + k4_00)
                out_j[i, 0, 1] = a01 + w6 * (k1_01 + 2.0 * k2_01 + 2.0 * k3_01 + k4_01)
                out_j[i, 1, 0] = a10 + w6 * (k1_10 + 2.0 * k2_10 + 2.0 * k3_10 + k4_10)
                out_j[i, 1, 1] = a11 + w6 * (k1_11 + 2.0 * k2_11 + 2.0 * k3_11 + k4_11)
            x += w6 * (v1x + 2.0 * v2x + 2.0 * v3x + v4x)
            y += w6 * (v1y + 2.0 * v2y + 2.0 * v3y + v4y)
            out_z[i, 0] = x
            out_z[i, 1] = y
            if x * x + y * y > limit2:
                return i
    return -1


@njit(cache=True)
def hermite_table_eval(lo, h, n, vals, dxs, dys, dxys, pts, out_v, out_j):
    """Bicubic Hermite evaluation of a 2-component map tabulated on an
    ``(n+1) x (n+1)`` node grid starting at ``(lo, lo)`` with spacing ``h``.
    Points outside the table are mapped by the identity."""
    hi = lo + n * h
    for p in range(pts.shape[0]):
        x = pts[p, 0]
        y = pts[p, 1]
        if x <= lo or x >= hi or y <= lo or y >= hi:
            out_v[p, 0] = x
            out_v[p, 1] = y
            out_j[p, 0, 0] = 1.0
            out_j[p, 0, 1] = 0.0
            out_j[p, 1, 0] = 0.0
            out_j[p, 1, 1] = 1.0
            continue
        fx = (x - lo) / h
        fy = (y - lo) / h
        i = min(int(fx), n - 1)
        j = min(int(fy), n - 1)
        s = fx - i
        r = fy - j
        # basis in s and derivative wrt s
        s2, s3 = s * s, s * s * s
        hs = (2 * s3 - 3 * s2 + 1, s3 - 2 * s2 + s, -2 * s3 + 3 * s2, s3 - s2)
        ds = (6 * s2 - 6 * s, 3 * s2 - 4 * s + 1, -6 * s2 + 6 * s, 3 * s2 - 2 * s)
        r2, r3 = r * r, r * r * r
        hr = (2 * r3 - 3 * r2 + 1, r3 - 2 * r2 + r, -2 * r3 + 3 * r2, r3 - r2)
        dr = (6 * r2 - 6 * r, 3 * r2 - 4 * r + 1, -6 * r2 + 6 * r, 3 * r2 - 2 * r)
        for c in range(2):
            v = 0.0
            gx = 0.0
            gy = 0.0
            for a in range(2):
                for b in range(2):
                    ii = i + a
                    jj = j + b
                    f = vals[ii, jj, c]
                    fxv = dxs[ii, jj, c] * h
                    fyv = dys[ii, jj, c] * h
                    fxy = dxys[ii, jj, c] * h * h
                    sa0, sa1 = hs[2 * a], hs[2 * a + 1]
                    da0, da1 = ds[2 * a], ds[2 * a + 1]
                    rb0, rb1 = hr[2 * b], hr[2 * b + 1]
                    db0, db1 = dr[2 * b], dr[2 * b + 1]
                    v += f * sa0 * rb0 + fxv * sa1 * rb0 + fyv * sa0 * rb1 + fxy * sa1 * rb1
                    gx += f * da0 * rb0 + fxv * da1 * rb0 + fyv * da0 * rb1 + fxy * da1 * rb1
                    gy += f * sa0 * db0 + fxv * sa1 * db0 + fyv * sa0 * db1 + fxy * sa1 * db1
            out_v[p, c] = v
            out_j[p, c, 0] = gx / h
            out_j[p, c, 1] = gy / h
    return 0


def empty_params():
    return np.zeros(8)
