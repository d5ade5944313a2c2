import mpmath as mp
import numpy as np
import pytest

from diffretract.smoothcore import (
    DiskGrid,
    SmoothStep,
    beta1,
    beta2,
    chi,
    chi_collar,
    chi_dx,
    chi_inverse,
    clock_pair,
    cutoff_rho,
    cutoff_rho_grad,
    disk_samples,
    fd_derivatives,
    gamma_flatten,
    gamma_flatten_grad,
    gamma_gauge,
    ramp_integral,
    sobolev3_sq,
)


def _mp_ramp(x):
    mp.mp.dps = 40
    f = lambda u: mp.e ** (-1 / u) / (mp.e ** (-1 / u) + mp.e ** (-1 / (1 - u)))
    return float(mp.quad(f, mp.linspace(0, x, 60)))


@pytest.mark.parametrize("x", [0.03, 0.1, 0.25, 0.4, 0.5, 0.77, 0.99])
def test_ramp_integral_matches_mpmath(x):
    ref = _mp_ramp(x)
    assert abs(ramp_integral(x) - ref) <= 1e-14 * max(ref, 1e-300) + 1e-17


def test_step_examples():
    s = SmoothStep(0.0, 1.0, 0.1)
    assert s(-0.5) == 0.0
    assert s(2.0) == 1.0
    # symmetric construction; oracle: direct integration of the plateau derivative
    mp.mp.dps = 30
    psi = lambda u: mp.e ** (-1 / u) / (mp.e ** (-1 / u) + mp.e ** (-1 / (1 - u))) if 0 < u < 1 else (0 if u <= 0 else 1)
    m = 0.1
    dens = lambda v: psi(v / m) * psi((1 - v) / m)
    total = mp.quad(dens, [0, m, 1 - m, 1])
    half = mp.quad(dens, [0, m, 0.5])
    assert abs(s(0.5) - float(half / total)) < 1e-14
    assert abs(s(0.5) - 0.5) < 1e-15


def test_step_invariants():
    s = SmoothStep(-1.0, 3.0, 0.2)
    u = np.linspace(-2, 4, 200001)
    v = s(u)
    assert v.min() == 0.0 and v.max() == 1.0
    assert np.all(v[u <= -1.0] == 0.0) and np.all(v[u >= 3.0] == 1.0)
    assert np.all(np.diff(v) >= 0)
    inner = (u > -1 + 0.2 * 4) & (u < 3 - 0.2 * 4)
    assert np.all(np.diff(v[inner]) > 0)
    d = s.derivative(u)
    assert d.max() <= 1.0 / (4 * (1 - 0.4)) * 1.05
    assert abs(d.max() - s.max_slope) < 1e-12
    # derivative consistent with values
    fd = np.gradient(v, u)
    assert np.max(np.abs(fd - d)) < 1e-6


def test_step_rejects_bad_spec():
    with pytest.raises(ValueError):
        SmoothStep(1.0, 1.0)
    with pytest.raises(ValueError):
        SmoothStep(0.0, 1.0, 0.5)


def test_cutoff_rho():
    assert cutoff_rho(np.array([0.0, 0.0])) == 1.0
    assert cutoff_rho(np.array([3.0, 0.0])) == 0.0
    mid = cutoff_rho(np.array([1.5, 0.0]))
    assert 0.0 < mid < 1.0
    r = np.linspace(0, 2.5, 2001)
    y = np.stack([r * 0.6, r * 0.8], axis=-1)
    v = cutoff_rho(y)
    assert np.all(v[r <= 1] == 1.0) and np.all(v[r >= 2] == 0.0)
    g = cutoff_rho_grad(y)
    h = 1e-6
    fd = (cutoff_rho(y + [h, 0]) - cutoff_rho(y - [h, 0])) / (2 * h)
    assert np.max(np.abs(fd - g[:, 0])) < 1e-6


@pytest.mark.parametrize("eps", [0.5, 0.25, 0.1, 0.01])
def test_gamma_flatten_gradient_bound(eps):
    r = np.linspace(0, 1.2 * eps, 512)
    y = np.stack([r, np.zeros_like(r)], axis=-1)
    g = np.linalg.norm(gamma_flatten_grad(eps, y), axis=-1)
    assert g.max() < 3.0 / eps
    # dense sweep too
    r = np.linspace(0.5 * eps, eps, 100001)
    y = np.stack([r / np.sqrt(2), r / np.sqrt(2)], axis=-1)
    assert np.linalg.norm(gamma_flatten_grad(eps, y), axis=-1).max() < 3.0 / eps


def test_gamma_flatten_values():
    assert gamma_flatten(0.5, np.array([0.2, 0.0])) == 1.0
    assert gamma_flatten(0.5, np.array([0.6, 0.0])) == 0.0
    with pytest.raises(ValueError):
        gamma_flatten(0.7, np.zeros(2))


def test_gamma_gauge_values():
    assert gamma_gauge(1.0, np.array([0.4, 0.0])) == 1.0
    assert gamma_gauge(1.0, np.array([0.8, 0.0])) == 0.0
    mid = gamma_gauge(0.5, np.array([0.3, 0.0]))
    assert 0.0 < mid < 1.0
    with pytest.raises(ValueError):
        gamma_gauge(0.0, np.zeros(2))


def test_chi_examples():
    assert chi(0.37, 1.0) == 0.37
    assert chi(0.0, 5.0) == 0.0
    assert chi(1.0, 5.0) == 5.0
    assert abs(chi_dx(0.001, 0.05) - 1.0) < 1e-9
    with pytest.raises(ValueError):
        chi(0.5, 0.0)


@pytest.mark.parametrize("r", [0.05, 0.5, 1.0, 3.0, 40.0])
def test_chi_properties(r):
    x = np.linspace(0, 1, 10001)
    d = chi_dx(x, r)
    assert d.min() > 0
    v = chi(x, r)
    assert np.all(np.diff(v) > 0)
    assert v[0] == 0.0 and abs(v[-1] - r) < 1e-14 * max(r, 1)
    w = chi_collar(r)
    ends = (x < w) | (x > 1 - w)
    assert np.max(np.abs(d[ends] - 1.0)) < 1e-9
    # finite differences of chi agree with chi_dx
    xm = np.linspace(0.01, 0.99, 197)
    fd = (chi(xm + 1e-6, r) - chi(xm - 1e-6, r)) / 2e-6
    assert np.max(np.abs(fd - chi_dx(xm, r))) < 1e-6 * max(1, r)
    s = np.linspace(0, r, 100)
    assert np.max(np.abs(chi(chi_inverse(s, r), r) - s)) < 1e-10
    assert np.max(np.abs(chi(x, 1.0) - x)) == 0.0


def test_chi_inverse_bisection_oracle():
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi(mid, 3.0) < 1.5:
            lo = mid
        else:
            hi = mid
    assert abs(chi_inverse(1.5, 3.0) - lo) < 1e-12
    assert chi_inverse(0.37, 1.0) == 0.37
    assert chi_inverse(5.0, 5.0) == 1.0
    with pytest.raises(ValueError):
        chi_inverse(6.0, 5.0)


def test_clock_pair():
    assert clock_pair(0.0) == ("first", 0.0)
    assert clock_pair(1.0) == ("second", 1.0)
    assert clock_pair(0.5) == ("second", 0.0)
    assert beta1(0.5) == 1.0 and beta2(0.5) == 0.0
    # constant near the ends
    assert np.all(beta1(np.linspace(0, 0.04, 50)) == 0.0)
    assert np.all(beta1(np.linspace(0.46, 0.5, 50)) == 1.0)
    assert np.all(beta2(np.linspace(0.5, 0.54, 50)) == 0.0)
    assert np.all(beta2(np.linspace(0.96, 1.0, 50)) == 1.0)


def test_disk_grid():
    g = DiskGrid()
    assert abs(g.integrate(np.ones(len(g.weights))) - np.pi) < 1e-10
    r = np.linalg.norm(g.nodes, axis=1)
    assert r.min() > 0 and r.max() < 1 and g.weights.min() > 0
    assert len(g.radial_nodes) == 48 and len(g.angular_nodes) == 64


def test_disk_samples():
    p = disk_samples(256, 0.3)
    assert p.shape == (256, 2)
    assert np.linalg.norm(p, axis=1).max() < 0.3


def test_fd_derivatives_examples():
    pts = DiskGrid(8, 8).nodes
    d = fd_derivatives(lambda y: y[:, 0], pts)
    assert np.max(np.abs(d[(1, 0)] - 1)) < 1e-8
    d = fd_derivatives(lambda y: y[:, 0] ** 2 * y[:, 1], pts)
    assert np.max(np.abs(d[(2, 1)] - 2)) < 1e-5
    d = fd_derivatives(lambda y: np.full(len(y), 3.0), pts)
    assert len(d) == 10
    for a, v in d.items():
        if sum(a) >= 1:
            assert np.max(np.abs(v)) < 1e-10


def test_fd_convergence_order():
    pts = DiskGrid(6, 6).nodes
    f = lambda y: np.sin(y[:, 0]) * np.cos(y[:, 1])
    x, y = pts[:, 0], pts[:, 1]
    exact = {
        (1, 0): np.cos(x) * np.cos(y), (0, 1): -np.sin(x) * np.sin(y),
        (2, 0): -np.sin(x) * np.cos(y), (1, 1): -np.cos(x) * np.sin(y),
        (0, 2): -np.sin(x) * np.cos(y),
    }
    e1 = fd_derivatives(f, pts, h=0.04, order=2)
    e2 = fd_derivatives(f, pts, h=0.02, order=2)
    for a, ref in exact.items():
        err1 = np.max(np.abs(e1[a] - ref))
        err2 = np.max(np.abs(e2[a] - ref))
        assert err2 * 3 <= err1


def test_fd_error_names_point():
    def bad(y):
        if np.any(y[:, 0] > 0.5):
            raise RuntimeError("outside")
        return y[:, 0]
    with pytest.raises(ValueError, match="stencil point"):
        fd_derivatives(bad, np.array([[0.49, 0.0]]))


def test_sobolev_closed_forms():
    assert abs(sobolev3_sq(lambda y: np.ones(len(y))) - np.pi) < 1e-6
    assert abs(sobolev3_sq(lambda y: y[:, 0]) - (np.pi / 4 + np.pi)) < 1e-5
    ref = np.pi / 24 + np.pi / 4 + np.pi / 4 + np.pi
    assert abs(sobolev3_sq(lambda y: y[:, 0] * y[:, 1]) - ref) < 1e-5
    # vector-valued fields sum their components
    two = sobolev3_sq(lambda y: np.stack([y[:, 0], np.ones(len(y))], axis=-1))
    assert abs(two - (np.pi / 4 + 2 * np.pi)) < 1e-5
