import numpy as np
import pytest

from diffretract.square_retraction import (
    ClosedFormSquare,
    DegenerateFieldError,
    ExitTimeError,
    IdentitySquare,
    IntervalMap,
    LiftResolutionError,
    SquareClassError,
    StageEMap,
    boundary_fix,
    boundary_trace,
    check_square_class,
    edge_slide,
    field_homotopy,
    integral_curve,
    interval_retraction,
    log_lift,
    min_jacobian_det,
    pushforward_e1,
    square_suite,
    stage_e,
    stage_f,
)
from diffretract.smoothcore import SmoothStep

rng = np.random.default_rng(11)
SUITE = square_suite()


def grid(n=64):
    ax = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], -1)


def e1_field(p):
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    out[:, 0] = 1.0
    return out


_BUMP = SmoothStep(0.0, 1.0, 0.1)


def bump(p, radius=0.3):
    s = ((p - 0.5) ** 2).sum(-1) / radius ** 2
    return 1.0 - _BUMP(s)


def rotated_field(max_angle):
    def h(p):
        a = max_angle * bump(np.asarray(p, dtype=float))
        return np.stack([np.cos(a), np.sin(a)], -1) * (1.0 + 0.5 * bump(np.asarray(p, dtype=float)))[:, None]
    return h


# ---------------------------------------------------------------------------
# class checks and the suite maps


@pytest.mark.parametrize("name", list(SUITE))
def test_suite_maps_are_class_f(name):
    f = SUITE[name]
    check_square_class(f)
    assert min_jacobian_det(f) > 0
    u = rng.uniform(0, 1, (500, 2))
    assert np.max(np.abs(f.invert(f.evaluate(u)) - u)) < 1e-10


@pytest.mark.parametrize("name", list(SUITE))
def test_suite_jacobians_match_differences(name):
    f = SUITE[name]
    u = rng.uniform(0.1, 0.9, (100, 2))
    h = 1e-6
    fd = np.stack([(f.evaluate(u + [h, 0]) - f.evaluate(u - [h, 0])) / (2 * h),
                   (f.evaluate(u + [0, h]) - f.evaluate(u - [0, h])) / (2 * h)], -1)
    assert np.max(np.abs(fd - f.jacobian(u))) < 1e-7


def test_collar_violation_detected():
    f = SUITE["bump-shear"]
    wide = ClosedFormSquare(f._fwd, "F", collar=0.3, name="too wide")
    with pytest.raises(SquareClassError):
        check_square_class(wide)


def test_edge_slide_is_class_e():
    f = edge_slide()
    check_square_class(f)
    assert min_jacobian_det(f) > 0
    with pytest.raises(SquareClassError):
        stage_f(f, 0.5)


# ---------------------------------------------------------------------------
# pushforward field and lift


def test_pushforward_identity():
    h = pushforward_e1(IdentitySquare())
    p = rng.uniform(0, 1, (50, 2))
    assert np.array_equal(h(p), e1_field(p))


@pytest.mark.parametrize("name", list(SUITE))
def test_pushforward_matches_fd_column(name):
    f = SUITE[name]
    h = pushforward_e1(f)
    p = rng.uniform(0, 1, (200, 2))
    z = f.invert(p)
    d = 1e-6
    col = (f.evaluate(z + [d, 0]) - f.evaluate(z - [d, 0])) / (2 * d)
    assert np.max(np.abs(h(p) - col)) < 1e-6
    # e1 on the collar
    edge = np.stack([rng.uniform(0, 1, 100), rng.uniform(0, f.collar, 100)], -1)
    assert np.array_equal(h(edge), e1_field(edge))


def test_pushforward_degenerate():
    def fwd(u, jac):
        if not jac:
            return u.copy(), None
        j = np.broadcast_to(np.eye(2), u.shape + (2,)).copy()
        j[:, 0, 0] = 1.0 - bump(u)
        return u.copy(), j

    fake = ClosedFormSquare(fwd, "F", collar=0.2, inverse=lambda v: v.copy())
    with pytest.raises(DegenerateFieldError):
        pushforward_e1(fake)(np.array([[0.5, 0.5]]))


def test_lift_of_e1_is_zero():
    lifted = log_lift(e1_field)
    p = rng.uniform(0, 1, (100, 2))
    assert np.array_equal(lifted(p), np.zeros((100, 2)))


def test_lift_recovers_known_angle():
    lifted = log_lift(rotated_field(np.pi / 3))
    p = rng.uniform(0, 1, (500, 2))
    assert np.max(np.abs(lifted(p)[:, 1] - np.pi / 3 * bump(p))) < 1e-8
    assert lifted.residual() < 1e-9


def test_lift_unwraps_beyond_pi():
    # the angle reaches 1.5 pi in the middle: only continuity gives the right branch
    lifted = log_lift(rotated_field(1.5 * np.pi))
    p = rng.uniform(0, 1, (500, 2))
    assert np.max(np.abs(lifted(p)[:, 1] - 1.5 * np.pi * bump(p))) < 1e-8


def test_lift_resolution_error():
    def wild(p):
        a = 6000.0 * p[:, 0] * np.sin(np.pi * p[:, 1]) * np.sin(np.pi * p[:, 0])
        return np.stack([np.cos(a), np.sin(a)], -1)

    with pytest.raises(LiftResolutionError):
        log_lift(wild)


@pytest.mark.parametrize("name", list(SUITE) + ["edge-slide"])
def test_lift_of_corpus_fields(name):
    f = SUITE.get(name) or edge_slide()
    lifted = log_lift(pushforward_e1(f), 128)
    assert lifted.residual() < 1e-9
    w = f.collar
    edge = np.concatenate([np.stack([rng.uniform(0, 1, 100), rng.uniform(0, w, 100)], -1),
                           np.stack([rng.uniform(0, w, 100), rng.uniform(0, 1, 100)], -1)])
    assert np.array_equal(lifted(edge), np.zeros_like(edge))


def test_field_homotopy():
    h = rotated_field(1.0)
    lifted = log_lift(h)
    p = rng.uniform(0, 1, (200, 2))
    assert np.allclose(field_homotopy(lifted, 1.0)(p), e1_field(p), atol=0)
    assert np.max(np.abs(field_homotopy(lifted, 0.0)(p) - h(p))) < 1e-12
    for t in (0.25, 0.6):
        phi = field_homotopy(lifted, t)(p)
        mag = np.linalg.norm(h(p), axis=1) ** (1 - t)
        assert np.max(np.abs(np.linalg.norm(phi, axis=1) - mag)) < 1e-9
    ident = field_homotopy(log_lift(pushforward_e1(IdentitySquare())), 0.4)
    assert np.array_equal(ident(p), e1_field(p))


# ---------------------------------------------------------------------------
# integral curves


def test_curve_of_e1():
    curve, s_exit = integral_curve(log_lift(e1_field), 0.3)
    assert s_exit[0] == 1.0
    s = np.linspace(0, 1, 11)
    assert np.allclose(curve(s), np.stack([s, np.full(11, 0.3)], -1), atol=1e-15)
    _, s_exit = integral_curve(IdentitySquare(), np.linspace(0, 1, 9), t=0.3)
    assert np.all(s_exit == 1.0)


@pytest.mark.parametrize("t", [0.0, 0.4])
def test_curve_exit_residual(t):
    f = SUITE["composed"]
    ys = np.linspace(0.2, 0.8, 7)
    curve, s_exit = integral_curve(f, ys, t=t)
    for i in range(len(ys)):
        assert abs(curve.exit_point(i)[0] - 1.0) < 1e-10
        assert abs(curve(s_exit[i], i)[0, 0] - 1.0) < 1e-10
    # the same curves integrated in image coordinates through the grid lift
    curve_w, s_w = integral_curve(log_lift(pushforward_e1(f)), ys, t=t)
    for i in range(len(ys)):
        assert abs(curve_w.exit_point(i)[0] - 1.0) < 1e-10
    assert np.max(np.abs(s_w - s_exit)) < 1e-4


def test_curve_at_t0_follows_f():
    f = SUITE["bump-twist"]
    curve, s_exit = integral_curve(f, [0.45], t=0.0)
    s = np.linspace(0, 1, 41)
    assert abs(s_exit[0] - 1.0) < 1e-12
    assert np.max(np.abs(curve(s) - f.evaluate(np.stack([s, np.full(41, 0.45)], -1)))) < 1e-10


def test_exit_time_error():
    def slow(p):
        return e1_field(p) * (1.0 - 0.999 * bump(p, 0.4))[:, None]

    with pytest.raises(ExitTimeError):
        integral_curve(log_lift(slow), 0.5, steps_per_unit=16)


@pytest.mark.parametrize("name", list(SUITE))
def test_exit_time_smoothness_proxy(name):
    e = StageEMap(SUITE[name], 0.5)
    ys = (np.arange(64) + 0.5) / 64
    d = np.abs(np.diff(e.exit_times(ys)))
    med = np.median(np.stack([np.r_[d[1:], d[-1]], np.r_[d[0], d[:-1]]]), axis=0)
    assert np.all(d <= 10 * med + 1e-12)


# ---------------------------------------------------------------------------
# stage E


@pytest.mark.parametrize("name", list(SUITE) + ["edge-slide"])
def test_stage_e_endpoints(name):
    f = SUITE.get(name) or edge_slide()
    u = grid()
    assert np.max(np.abs(stage_e(f, 0.0).evaluate(u) - f.evaluate(u))) < 1e-7
    assert np.max(np.abs(stage_e(f, 1.0).evaluate(u) - u)) < 1e-8


def test_stage_e_of_identity():
    u = grid(32)
    assert np.max(np.abs(stage_e(IdentitySquare(), 0.5).evaluate(u) - u)) < 1e-10
    e = StageEMap(IdentitySquare(), 0.5)
    assert np.max(np.abs(e.evaluate(u) - u)) < 1e-10


@pytest.mark.parametrize("name", ["composed", "edge-slide"])
def test_stage_e_class_and_orientation(name):
    f = SUITE.get(name) or edge_slide()
    e = stage_e(f, 0.5)
    check_square_class(e)
    assert min_jacobian_det(e, 32) > 0


def test_stage_e_converges_in_steps():
    # RK4 plus cubic dense output: doubling the step count shrinks the change by ~16
    f = SUITE["bump-twist"]
    u = rng.uniform(0, 1, (200, 2))
    vals = [StageEMap(f, 0.5, n).evaluate(u) for n in (256, 512, 1024)]
    d1 = np.max(np.abs(vals[0] - vals[1]))
    d2 = np.max(np.abs(vals[1] - vals[2]))
    assert d2 < 2e-6
    assert d1 / d2 > 8


# ---------------------------------------------------------------------------
# interval maps and boundary correction


def _bumpy_interval():
    step = SmoothStep(0.0, 1.0, 0.1)

    def fn(y):
        y = np.asarray(y, dtype=float)
        return y + 0.05 * (1 - step(((y - 0.5) / 0.3) ** 2))

    return IntervalMap(fn, collar=0.2)


def test_interval_retraction_examples():
    g = IntervalMap(lambda y: np.asarray(y) + 0.8 * np.asarray(y) * (1 - np.asarray(y)), collar=0.0)
    assert abs(interval_retraction(g, 0.5)(0.5) - 0.6) < 1e-15
    assert interval_retraction(g, 1.0).is_identity
    ident = interval_retraction(IntervalMap.identity(), 0.3)
    y = np.linspace(0, 1, 11)
    assert np.array_equal(ident(y), y)


def test_interval_retraction_monotone():
    g = _bumpy_interval().check()
    for t in np.linspace(0, 1, 9):
        gt = interval_retraction(g, t)
        assert np.min(gt.derivative(np.linspace(0, 1, 501))) > 0


def test_interval_inverse():
    g = _bumpy_interval()
    y = rng.uniform(0, 1, 300)
    assert np.max(np.abs(g(g.inverse(y)) - y)) < 1e-12


def test_interval_check_rejects():
    with pytest.raises(SquareClassError):
        IntervalMap(lambda y: 1.0 - np.asarray(y), collar=0.0).check()
    with pytest.raises(SquareClassError):
        IntervalMap(lambda y: np.asarray(y) ** 2, collar=0.1).check()


def test_boundary_trace():
    assert boundary_trace(IdentitySquare()).is_identity
    y = np.linspace(0, 1, 101)
    for f in SUITE.values():
        assert boundary_trace(f).is_identity
        direct = f.evaluate(np.stack([np.ones(101), y], -1))[:, 1]
        assert np.array_equal(direct, y)
    f = edge_slide()
    g = boundary_trace(f)
    y = rng.uniform(0, 1, 100)
    direct = f.evaluate(np.stack([np.ones(100), y], -1))[:, 1]
    assert np.max(np.abs(g(y) - direct)) < 1e-12


def test_boundary_fix():
    u = rng.uniform(0, 1, (300, 2))
    f = SUITE["composed"]
    assert np.max(np.abs(boundary_fix(f).evaluate(u) - f.evaluate(u))) < 1e-10
    assert isinstance(boundary_fix(IdentitySquare()), IdentitySquare)
    p = boundary_fix(edge_slide())
    assert p.class_tag == "F"
    check_square_class(p)
    assert min_jacobian_det(p) > 0
    assert np.max(np.abs(p.invert(p.evaluate(u)) - u)) < 1e-9


# ---------------------------------------------------------------------------
# stage F


@pytest.mark.parametrize("name", list(SUITE))
def test_stage_f_endpoints(name):
    f = SUITE[name]
    u = grid()
    assert np.max(np.abs(stage_f(f, 0.0).evaluate(u) - f.evaluate(u))) < 1e-7
    assert np.max(np.abs(stage_f(f, 1.0).evaluate(u) - u)) < 1e-8


def test_stage_f_of_identity():
    u = grid(32)
    assert np.max(np.abs(stage_f(IdentitySquare(), 0.5).evaluate(u) - u)) < 1e-10


@pytest.mark.parametrize("t", [0.25, 0.75])
def test_stage_f_intermediate(t):
    f = SUITE["composed"]
    ft = stage_f(f, t)
    assert ft.class_tag == "F"
    check_square_class(ft)
    assert min_jacobian_det(ft, 32) > 0
