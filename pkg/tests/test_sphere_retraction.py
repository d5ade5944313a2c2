import numpy as np
import pytest

from diffretract.corpus import corpus, equivariance_rotations
from diffretract.diffeo_engine import DiffeoChain, MobiusMap, RotationMap, chart_jacobian, sphere_det
from diffretract.smoothcore import disk_samples
from diffretract.sphere_geometry import (
    SOUTH_POLE,
    Rotation,
    normalize,
    sphere_grid,
    stereo_north,
    stereo_north_inv,
)
from diffretract.sphere_retraction import (
    EpsilonReport,
    GuaranteeError,
    ResolutionError,
    StagePlan,
    check_omega1,
    epsilon,
    fbar,
    q_data,
    q_psi,
    retract_p,
    stage_q,
    stage_r,
    stage_s,
    stage_t,
)

rng = np.random.default_rng(5)
CORPUS = corpus()
A = equivariance_rotations()[0]
_, _, GRID = sphere_grid(64)
_, _, GRID32 = sphere_grid(32)


@pytest.fixture(scope="module")
def plans():
    return {name: StagePlan(f) for name, f in CORPUS.items()}


def chain_of(rotation):
    return DiffeoChain([RotationMap(rotation)])


def sup(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# ---------------------------------------------------------------------------
# Q


def test_q_data_identity():
    qd = q_data(DiffeoChain())
    assert np.allclose(qd.alpha.matrix, np.eye(3), atol=1e-15)
    assert np.allclose(qd.g1, np.eye(2), atol=1e-15)


def test_q_data_rotation():
    r = Rotation.from_axis_angle([1, 2, 3], 0.8)
    qd = q_data(chain_of(r))
    assert np.allclose(qd.alpha.matrix, r.inverse.matrix, atol=1e-12)
    assert np.allclose(qd.g1, np.eye(2), atol=1e-12)
    assert qd.orthonormal


def test_q_data_mobius_scale():
    qd = q_data(DiffeoChain([MobiusMap(2, 0, 0, 1)]))
    assert qd.a == pytest.approx(2.0, abs=1e-12)
    assert qd.c == pytest.approx(2.0, abs=1e-12)
    assert qd.b == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(qd.g1, 0.5 * np.eye(2), atol=1e-12)
    assert np.allclose(qd.g1 @ [[qd.a, qd.b], [0, qd.c]], np.eye(2), atol=1e-12)


def test_q_psi_trivial_cases():
    qd = q_data(CORPUS["mobius_loxodromic"])
    assert q_psi(qd, 0.0) is None
    assert q_psi(q_data(CORPUS["rot_x"]), 0.6) is None


@pytest.mark.parametrize("name", ["mobius_scale", "mobius_loxodromic", "flow_vortex", "composed_flows"])
def test_psi_linearization(name):
    qd = q_data(CORPUS[name])
    psi = DiffeoChain([q_psi(qd, 1.0)])
    # chart p o alpha centred at f(x0)
    h = 1e-4

    def planar(y):
        x = qd.alpha.inverse.apply(stereo_north_inv(y))
        return stereo_north(qd.alpha.apply(psi.evaluate(x)))

    cols = [(planar(np.array([[h, 0.0]])) - planar(np.array([[-h, 0.0]]))) / (2 * h),
            (planar(np.array([[0.0, h]])) - planar(np.array([[0.0, -h]]))) / (2 * h)]
    jac = np.stack([cols[0][0], cols[1][0]], -1)
    assert sup(jac, qd.g1) < 1e-5


def test_stage_q_fixes_rotations():
    r = Rotation.from_axis_angle([0, 1, 1], 1.1)
    for t in (0.0, 0.4, 1.0):
        assert sup(stage_q(chain_of(r), t).evaluate(GRID), r.apply(GRID)) < 1e-10


@pytest.mark.parametrize("name", ["mobius_loxodromic", "flow_vortex"])
def test_stage_q_equivariance(name):
    f = CORPUS[name]
    for t in (0.3, 1.0):
        left = stage_q(f.then(RotationMap(A)), t).evaluate(GRID32)
        assert sup(left, A.apply(stage_q(f, t).evaluate(GRID32))) < 1e-8


def test_stage_q_endpoint_frame():
    q1 = stage_q(CORPUS["mobius_scale"], 1.0)
    x0 = SOUTH_POLE
    h = 1e-5
    t1, t2 = np.eye(3)[0], np.eye(3)[1]
    cols = [(q1.evaluate(normalize(x0 + h * t)[None]) - q1.evaluate(normalize(x0 - h * t)[None]))[0] / (2 * h)
            for t in (t1, t2)]
    gram = np.array([[c1 @ c2 for c2 in cols] for c1 in cols])
    assert sup(gram, np.eye(2)) < 1e-6


def test_stage_q_start():
    f = CORPUS["flow_vortex"]
    assert sup(stage_q(f, 0.0).evaluate(GRID), f.evaluate(GRID)) == 0.0


# ---------------------------------------------------------------------------
# eps and S


def test_epsilon_identity():
    rep = epsilon(DiffeoChain())
    assert 0 < rep.eps <= 0.5
    assert rep.eps <= 0.5 * rep.eps1
    assert rep.max_dfbar_dev < 1e-12


def test_epsilon_mobius_composite(plans):
    plan = plans["mobius_loxodromic"]
    rep = plan.eps_report
    assert isinstance(rep, EpsilonReport)
    assert rep.eps <= 0.5 * rep.eps1
    fbar(plan.f1, disk_samples(256, 2 * rep.eps))
    _, jb = chart_jacobian(plan.f1, disk_samples(256, rep.eps), "north")
    assert np.max(np.linalg.norm(jb - np.eye(2), ord=2, axis=(1, 2))) < 0.25


def test_epsilon_precondition():
    with pytest.raises(ValueError):
        epsilon(CORPUS["mobius_loxodromic"])
    with pytest.raises(ValueError):
        check_omega1(CORPUS["mobius_scale"])


def test_report_invariants():
    with pytest.raises(GuaranteeError):
        EpsilonReport(eps1=0.1, eps=0.2, sobolev_h=1.0, sobolev_gauge=1.0)


def test_stage_s_identity():
    s = stage_s(DiffeoChain(), 0.1, 0.7)
    assert sup(s.evaluate(GRID), GRID) < 1e-15


@pytest.mark.parametrize("name", ["mobius_loxodromic", "flow_translation", "flow_vortex"])
def test_stage_s_flattens(plans, name):
    plan = plans[name]
    eps = plan.eps_report.eps
    assert sup(stage_s(plan.f1, eps, 0.0).evaluate(GRID), plan.f1.evaluate(GRID)) < 1e-12
    y = disk_samples(64, 0.5 * eps)
    blend = plan.flat.primitives[0]
    assert sup(blend.chart_map(y)[0], y) < 1e-10
    for t in (0.25, 0.5, 0.75, 1.0):
        _, ds = stage_s(plan.f1, eps, t).primitives[0].chart_map(disk_samples(256, eps), True)
        assert np.max(np.linalg.norm(ds - np.eye(2), ord=2, axis=(1, 2))) < 1.0


def test_stage_s_round_trip(plans):
    plan = plans["flow_translation"]
    s = plan.s(0.6)
    x = stereo_north_inv(disk_samples(50, 1.5 * plan.eps_report.eps))
    assert sup(s.invert(s.evaluate(x)), x) < 1e-12


# ---------------------------------------------------------------------------
# T and R


def test_stage_t_endpoints(plans):
    plan = plans["flow_translation"]
    flat, eps = plan.flat, plan.eps_report.eps
    assert sup(stage_t(flat, eps, 0.0).evaluate(GRID), flat.evaluate(GRID)) < 1e-8
    assert sup(stage_t(flat, eps, 1.0).evaluate(GRID), GRID) < 1e-7
    assert sup(stage_t(DiffeoChain(), eps, 0.4).evaluate(GRID), GRID) == 0.0


def test_stage_t_resolution_guard(plans):
    plan = plans["mobius_loxodromic"]
    with pytest.raises(ResolutionError):
        stage_t(plan.flat, plan.eps_report.eps, 0.5)


def test_stage_t_intermediate(plans):
    plan = plans["flow_translation"]
    t = stage_t(plan.flat, plan.eps_report.eps, 0.5, steps_per_unit=64)
    _, _, pts = sphere_grid(2)
    fx, j = t.forward(pts, True)
    assert np.min(sphere_det(j, pts, fx)) > 0
    # square coordinates resolve the sphere only to ~1e-16 * a (about 1e-7 here),
    # and the curve integration accumulates a few hundred such roundings
    assert sup(t.invert(fx), pts) < 1e-4
    # identity on the flattened cap
    cap = stereo_north_inv(disk_samples(20, 0.4 * plan.eps_report.eps))
    assert sup(t.evaluate(cap), cap) < 1e-14


def test_stage_r(plans):
    plan = plans["mobius_loxodromic"]
    f1 = plan.f1
    assert sup(stage_r(f1, 0.0).evaluate(GRID), f1.evaluate(GRID)) < 1e-12
    assert sup(stage_r(f1, 1.0).evaluate(GRID), GRID) < 1e-7
    # seam: S_1 from the first half equals T_0(S_1) from the second
    first = plan.s(1.0).evaluate(GRID)
    assert sup(plan.r(0.5).evaluate(GRID), first) < 1e-9
    assert sup(stage_r(DiffeoChain(), 0.8).evaluate(GRID), GRID) < 1e-15


# ---------------------------------------------------------------------------
# P


@pytest.mark.parametrize("name", ["rot_z", "rot_x", "rot_oblique"])
def test_p_fixes_rotations(plans, name):
    f = CORPUS[name]
    for t in (0.0, 0.3, 0.7, 1.0):
        assert sup(retract_p(f, t, plans[name]).evaluate(GRID), f.evaluate(GRID)) < 1e-9


def test_p_endpoints(plans):
    plan = plans["mobius_loxodromic"]
    f = CORPUS["mobius_loxodromic"]
    assert sup(retract_p(f, 0.0, plan).evaluate(GRID), f.evaluate(GRID)) < 1e-7
    p1 = retract_p(f, 1.0, plan)
    assert sup(p1.evaluate(GRID), plan.alpha.inverse.apply(GRID)) < 1e-6


@pytest.mark.parametrize("name", ["mobius_scale", "flow_translation"])
def test_p_equivariance(plans, name):
    f = CORPUS[name]
    other = StagePlan(f.then(RotationMap(A)))
    for t in (0.25, 0.5, 0.75, 1.0):
        assert sup(other.p(t).evaluate(GRID), A.apply(plans[name].p(t).evaluate(GRID))) < 1e-6


def test_p_identity(plans):
    for t in np.linspace(0, 1, 9):
        assert sup(plans["identity"].p(t).evaluate(GRID), GRID) < 1e-10


def test_p_continuity(plans):
    plan = plans["flow_vortex"]
    t = 0.2
    base = plan.p(t).evaluate(GRID)
    d1 = sup(plan.p(t + 1 / 64).evaluate(GRID), base)
    d2 = sup(plan.p(t + 1 / 128).evaluate(GRID), base)
    assert d1 < 0.2
    assert 1.5 < d1 / d2 < 2.5


def test_alpha_consistency(plans):
    assert plans["composed_flows"].check_alpha() < 1e-6


def test_orientation_validation():
    class Flip:
        domain = "sphere"

        def forward(self, x, jac=False):
            m = np.diag([1.0, 1.0, -1.0])
            return x @ m, (np.broadcast_to(m, x.shape + (3,)) if jac else None)

        def invert(self, x):
            return self.forward(x)[0]

    with pytest.raises(ValueError):
        q_data(DiffeoChain([Flip()]))
