"""Command-line interface: ``diffretract {retract,verify,trace}``.

Exit status: 0 on success, 2 for unreadable arguments or spec files, 3 when
the pipeline fails, 4 when ``verify`` finds a failing invariant.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import equivariance_rotations
from .diffeo_engine import RotationMap, chart_jacobian, sphere_det
from .smoothcore import clock_pair, disk_samples
from .specfile import SpecError, load_spec
from .sphere_geometry import sphere_grid, stereo_north, stereo_north_inv
from .sphere_retraction import StagePlan, fbar, retract_p
from .square_retraction import (
    T_MAX,
    log_lift,
    min_jacobian_det,
    pushforward_e1,
    stage_e,
    stage_f,
)

EXIT_OK, EXIT_PARSE, EXIT_PIPELINE, EXIT_INVARIANT = 0, 2, 3, 4
FRAME_HEADER = ["t", "theta", "phi", "x", "y", "z", "fx", "fy", "fz"]
LOCAL_TIMES = [k / 8 for k in range(9)]


class PipelineError(RuntimeError):
    """A stage of the retraction failed; ``stage`` and ``t`` locate it."""

    def __init__(self, stage: str, t, cause: Exception):
        where = stage if t is None else f"{stage} at t={t:g}"
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.stage, self.t, self.cause = stage, t, cause


def _fmt(v) -> str:
    return f"{float(v) + 0.0:.17g}"


def _plan(chain, args) -> StagePlan:
    try:
        return StagePlan(chain, args.rk4_steps, args.fd_step, args.sobolev_c)
    except Exception as exc:
        raise PipelineError("Q", None, exc) from exc


def _stage_name(t: float) -> str:
    half, _ = clock_pair(t)
    if half == "first":
        return "Q"
    return "S" if t < 0.5 else "R"


def evaluate_path(plan: StagePlan, t: float, pts):
    try:
        return retract_p(plan.f, t, plan).evaluate(pts)
    except Exception as exc:
        raise PipelineError(_stage_name(t), t, exc) from exc


# ---------------------------------------------------------------------------
# retract


def cmd_retract(chain, t_values, grid: int, args) -> str:
    """CSV of ``P_t(f)`` on the sphere grid, one row per (t, point)."""
    plan = _plan(chain, args)
    th, ph, pts = sphere_grid(grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRAME_HEADER)
    for t in t_values:
        img = evaluate_path(plan, t, pts)
        ts = _fmt(t)
        for i in range(len(pts)):
            w.writerow([ts, _fmt(th[i]), _fmt(ph[i]), *map(_fmt, pts[i]), *map(_fmt, img[i])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# verify


@dataclass
class CheckRecord:
    name: str
    stage: str
    t: float | None
    metric: float
    threshold: float
    passed: bool
    note: str = ""

    def as_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        for k in ("metric", "t"):
            if d[k] is not None and not np.isfinite(d[k]):
                d[k] = str(d[k])
        return d


class Verifier:
    """Runs the invariant checks for one map and collects records."""

    def __init__(self, plan: StagePlan, grid: int):
        self.plan = plan
        self.grid = grid
        _, _, self.pts = sphere_grid(grid)
        self.records: list[CheckRecord] = []
        self.timings: dict[str, float] = {}

    def record(self, name, stage, t, metric, threshold, passed, note=""):
        self.records.append(CheckRecord(name, stage, t, float(metric), float(threshold),
                                        bool(passed), note))

    def below(self, name, stage, t, fn, threshold):
        """Record ``fn() < threshold``; an exception counts as a failure."""
        try:
            metric = fn()
        except Exception as exc:
            self.record(name, stage, t, np.nan, threshold, False, f"{type(exc).__name__}: {exc}")
            return
        self.record(name, stage, t, metric, threshold, metric < threshold)

    def positive(self, name, stage, t, fn):
        try:
            metric = fn()
        except Exception as exc:
            self.record(name, stage, t, np.nan, 0.0, False, f"{type(exc).__name__}: {exc}")
            return
        self.record(name, stage, t, metric, 0.0, metric > 0)

    def sup(self, a, b):
        return float(np.max(np.abs(a - b)))

    def min_det(self, chain):
        fx, j = chain.forward(self.pts, True)
        return float(np.min(sphere_det(j, self.pts, fx)))

    def timed(self, key, fn):
        t0 = time.perf_counter()
        fn()
        self.timings[key] = round(time.perf_counter() - t0, 3)

    # -- groups

    def endpoints(self):
        plan, pts = self.plan, self.pts
        f = plan.f
        t0 = time.perf_counter()
        self.below("P_0 = f", "P", 0.0, lambda: self.sup(plan.p(0.0).evaluate(pts), f.evaluate(pts)), 1e-7)
        elapsed = time.perf_counter() - t0
        self.record("P_0 runtime [s]", "P", 0.0, elapsed, 60.0, elapsed < 60.0)
        self.below("P_1 = alpha^-1", "P", 1.0,
                   lambda: self.sup(retract_p(f, 1.0, plan).evaluate(pts),
                                    plan.alpha.inverse.apply(pts)), 1e-6)

        def ortho():
            img = plan.p(1.0).evaluate(pts)
            m = np.linalg.lstsq(pts, img, rcond=None)[0].T
            return float(np.max(np.abs(m.T @ m - np.eye(3))))

        self.below("P_1 orthogonality", "P", 1.0, ortho, 1e-6)

    def rotation_or_equivariance(self):
        plan, pts = self.plan, self.pts
        f = plan.f
        if plan.f1_is_identity and plan.qdata.orthonormal:
            for t in (0.0, 0.3, 0.7, 1.0):
                self.below("P_t(A) = A", "P", t, lambda t=t: self.sup(plan.p(t).evaluate(pts),
                                                                    f.evaluate(pts)), 1e-9)
            return
        for k, a in enumerate(equivariance_rotations()):
            other = StagePlan(f.then(RotationMap(a)), plan.steps_per_unit, plan.fd_step,
                              plan.sobolev_c)
            for t in (0.25, 0.5, 0.75, 1.0):
                self.below(f"equivariance A{k + 1}", "P", t,
                           lambda t=t, a=a, o=other: self.sup(o.p(t).evaluate(pts),
                                                              a.apply(plan.p(t).evaluate(pts))), 1e-6)

    def frames(self):
        plan = self.plan
        qd = plan.qdata

        def frame():
            x0 = np.array([[0.0, 0.0, -1.0]])
            j = plan.q(1.0).jacobian(x0)[0]
            cols = j[:, :2]
            return float(np.max(np.abs(cols.T @ cols - np.eye(2))))

        self.below("Q_1 frame orthonormal", "Q", 1.0, frame, 1e-6)

        def linearization():
            psi = plan.q(1.0)
            if len(psi) == len(plan.f):
                return float(np.max(np.abs(qd.g1 - np.eye(2))))
            prim = psi.primitives[-1]
            h = 1e-4

            def planar(y):
                x = qd.alpha.inverse.apply(stereo_north_inv(y))
                return stereo_north(qd.alpha.apply(prim.evaluate(x)))

            e = np.eye(2)
            jac = np.stack([(planar(h * e[k][None]) - planar(-h * e[k][None]))[0] / (2 * h)
                            for k in range(2)], -1)
            return float(np.max(np.abs(jac - qd.g1)))

        self.below("Psi_1 linearization = g1", "Q", 1.0, linearization, 1e-5)

    def epsilon(self):
        plan = self.plan

        def evaluable():
            y = disk_samples(256, 2 * plan.eps_report.eps)
            val = fbar(plan.f1, y)
            return float(np.sum(~np.isfinite(val)))

        def dfbar_dev():
            _, jb = chart_jacobian(plan.f1, disk_samples(256, plan.eps_report.eps), "north")
            return float(np.max(np.linalg.norm(jb - np.eye(2), ord=2, axis=(1, 2))))

        self.below("fbar evaluable on B(2 eps)", "S", None, evaluable, 0.5)
        self.below("|dfbar - I| on B(eps)", "S", None, dfbar_dev, 0.25)

    def orientation(self):
        plan = self.plan
        for t in LOCAL_TIMES:
            self.positive("det P", "P", t, lambda t=t: self.min_det(retract_p(plan.f, t, plan)))
        for t in LOCAL_TIMES:
            self.positive("det Q", "Q", t, lambda t=t: self.min_det(plan.q(t)))
        for t in LOCAL_TIMES:
            self.positive("det S", "S", t, lambda t=t: self.min_det(plan.s(t)))
        for t in LOCAL_TIMES:
            self.positive("det T", "T", t, lambda t=t: self.min_det(plan.t_stage(t)))
        if plan.f1_is_identity:
            return
        for t in LOCAL_TIMES:
            self.positive("det E", "E", t,
                          lambda t=t: min_jacobian_det(stage_e(plan.square_input(), t,
                                                               plan.steps_per_unit), self.grid))
            self.positive("det F", "F", t,
                          lambda t=t: min_jacobian_det(stage_f(plan.square_input(), t,
                                                               plan.steps_per_unit), self.grid))

    def convergence(self):
        plan = self.plan
        fine = StagePlan(plan.f, 2 * plan.steps_per_unit, plan.fd_step, plan.sobolev_c)
        self.below("P_1 step doubling", "P", 1.0,
                   lambda: self.sup(retract_p(plan.f, 1.0, plan).evaluate(self.pts),
                                    retract_p(fine.f, 1.0, fine).evaluate(self.pts)), 1e-8)

    def run(self):
        for key in ("endpoints", "rotation_or_equivariance", "frames", "epsilon", "orientation",
                    "convergence"):
            self.timed(key, getattr(self, key))
        return self

    def report(self, source: str) -> dict:
        failed = [r for r in self.records if not r.passed]
        return {
            "input": source,
            "grid": self.grid,
            "records": [r.as_dict() for r in self.records],
            "summary": {"pass": not failed, "checks": len(self.records), "failed": len(failed)},
            "runtime_s": self.timings,
        }


def cmd_verify(chain, grid: int, args, source: str = "") -> dict:
    plan = _plan(chain, args)
    return Verifier(plan, grid).run().report(source)


# ---------------------------------------------------------------------------
# trace


def cmd_trace(chain, y_samples: int, args) -> str:
    """CSV ``stage,quantity,index,value`` of stage diagnostics."""
    plan = _plan(chain, args)
    rows = []

    def add(stage, name, value, index=""):
        rows.append([stage, name, index, _fmt(value)])

    qd = plan.qdata
    for name in ("a", "b", "c"):
        add("Q", name, getattr(qd, name))
    for (i, j), v in np.ndenumerate(qd.g1):
        add("Q", f"g1_{i}{j}", v)
    try:
        rep = plan.eps_report
    except Exception as exc:
        raise PipelineError("S", None, exc) from exc
    add("S", "eps1", rep.eps1)
    add("S", "eps", rep.eps)
    add("S", "sobolev_h", rep.sobolev_h)
    add("S", "sobolev_gauge", rep.sobolev_gauge)
    add("S", "max_dfbar_dev", rep.max_dfbar_dev)
    try:
        box = plan.square_input()
        if box is None:
            ys = (np.arange(y_samples) + 0.5) / y_samples
            exits = np.ones(y_samples)
            lift_max = 0.0
        else:
            ys = box.trace_nodes(y_samples + 2)[1:-1]
            exits = stage_e(box, 0.0, plan.steps_per_unit).exit_times(ys)
            lift = log_lift(pushforward_e1(box))
            lift_max = float(np.max(np.abs(lift.theta)))
    except Exception as exc:
        raise PipelineError("T", 0.0, exc) from exc
    if np.any(~np.isfinite(exits)) or np.any(exits >= T_MAX):
        raise PipelineError("T", 0.0, RuntimeError("exit time not finite or beyond T_max"))
    for i, (y, s) in enumerate(zip(ys, exits)):
        add("E", "y", y, i)
        add("E", "exit_time", s, i)
    add("E", "max_lift_angle", lift_max)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "quantity", "index", "value"])
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# entry point


def _t_list(text: str):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("t values must lie in [0, 1]")
    return vals


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", required=True, help="JSON spec of the diffeomorphism")
    common.add_argument("--output", help="output file (default: stdout)")
    common.add_argument("--grid", type=_positive_int, default=64, help="sphere grid size n (n x n points)")
    common.add_argument("--rk4-steps", type=_positive_int, default=256, help="RK4 steps per unit time")
    common.add_argument("--fd-step", type=float, default=1e-2, help="relative FD step for Sobolev terms")
    common.add_argument("--sobolev-c", type=float, default=10.0, help="Sobolev constant c")
    p = argparse.ArgumentParser(prog="diffretract", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("retract", parents=[common], help="write P_t(f) on the sphere grid as CSV")
    r.add_argument("--t", type=_t_list, default=[0.0, 0.5, 1.0], help="comma-separated times")
    sub.add_parser("verify", parents=[common], help="run the invariant checks, write a JSON report")
    tr = sub.add_parser("trace", parents=[common], help="write stage diagnostics as CSV")
    tr.add_argument("--y-samples", type=_positive_int, default=16, help="heights for exit times")
    return p


def _emit(text: str, path):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    if args.fd_step <= 0 or args.sobolev_c <= 0:
        print("error: --fd-step and --sobolev-c must be positive", file=sys.stderr)
        return EXIT_PARSE
    try:
        chain, _ = load_spec(args.input)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        if args.command == "retract":
            _emit(cmd_retract(chain, args.t, args.grid, args), args.output)
            return EXIT_OK
        if args.command == "trace":
            _emit(cmd_trace(chain, args.y_samples, args), args.output)
            return EXIT_OK
        report = cmd_verify(chain, args.grid, args, str(args.input))
    except PipelineError as exc:
        print(f"pipeline error in stage {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    _emit(json.dumps(report, indent=2) + "\n", args.output)
    for rec in report["records"]:
        status = "PASS" if rec["pass"] else "FAIL"
        t = "-" if rec["t"] is None else rec["t"]
        print(f"{status} {rec['name']} [{rec['stage']}] t={t} metric={rec['metric']} "
              f"threshold={rec['threshold']} {rec['note']}".rstrip(), file=sys.stderr)
    return EXIT_OK if report["summary"]["pass"] else EXIT_INVARIANT


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
