import csv
import io
import json

import numpy as np
import pytest

from diffretract.cli import EXIT_INVARIANT, EXIT_OK, EXIT_PARSE, FRAME_HEADER, main
from diffretract.corpus import corpus, corpus_specs, rotations
from diffretract.specfile import dump_spec
from diffretract.sphere_retraction import StagePlan
from diffretract.square_retraction import T_MAX

SPECS = corpus_specs()


@pytest.fixture
def spec_path(tmp_path):
    def write(name, doc=None):
        path = tmp_path / f"{name}.json"
        dump_spec(SPECS[name] if doc is None else doc, path)
        return str(path)

    return write


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    return header, [r for r in reader]


def test_retract_rotation(spec_path, capsys):
    code, out, _ = run(capsys, "retract", "--input", spec_path("rot_z"), "--grid", 4, "--t", "1")
    assert code == EXIT_OK
    header, body = rows(out)
    assert header == FRAME_HEADER
    assert len(body) == 16
    data = np.array(body, dtype=float)
    expected = rotations()["rot_z"].apply(data[:, 3:6])
    assert np.max(np.abs(data[:, 6:9] - expected)) < 1e-9


def test_retract_identity(spec_path, capsys):
    code, out, _ = run(capsys, "retract", "--input", spec_path("identity"), "--grid", 6,
                       "--t", "0,0.3,0.8,1")
    assert code == EXIT_OK
    data = np.array(rows(out)[1], dtype=float)
    assert np.max(np.abs(data[:, 6:9] - data[:, 3:6])) < 1e-10


def test_retract_mobius_rows(spec_path, capsys, tmp_path):
    out_path = tmp_path / "frames.csv"
    code, _, _ = run(capsys, "retract", "--input", spec_path("mobius_scale"), "--grid", 8,
                     "--t", "0,0.5,1", "--output", out_path)
    assert code == EXIT_OK
    raw = out_path.read_bytes()
    assert b"\r" not in raw
    _, body = rows(raw.decode())
    assert len(body) == 3 * 8 * 8
    data = np.array(body, dtype=float)
    last = data[data[:, 0] == 1.0]
    alpha = StagePlan(corpus()["mobius_scale"]).alpha
    assert np.max(np.abs(last[:, 6:9] - alpha.inverse.apply(last[:, 3:6]))) < 1e-6


def test_retract_deterministic(spec_path, capsys):
    path = spec_path("mobius_loxodromic")
    first = run(capsys, "retract", "--input", path, "--grid", 4, "--t", "0.25,1")[1]
    second = run(capsys, "retract", "--input", path, "--grid", 4, "--t", "0.25,1")[1]
    assert first == second


def test_seventeen_digits(spec_path, capsys):
    out = run(capsys, "retract", "--input", spec_path("rot_x"), "--grid", 2, "--t", "1")[1]
    value = rows(out)[1][0][1]
    assert float(value) == np.pi / 4


def test_verify_rotation(spec_path, capsys, tmp_path):
    report_path = tmp_path / "report.json"
    code, _, err = run(capsys, "verify", "--input", spec_path("rot_oblique"), "--grid", 16,
                       "--output", report_path)
    assert code == EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["summary"]["pass"]
    fixed = [r for r in report["records"] if r["name"] == "P_t(A) = A"]
    assert {r["t"] for r in fixed} == {0.0, 0.3, 0.7, 1.0}
    assert all(r["pass"] for r in fixed)
    assert "FAIL" not in err


def test_verify_identity(spec_path, capsys, tmp_path):
    report_path = tmp_path / "report.json"
    code, _, _ = run(capsys, "verify", "--input", spec_path("identity"), "--grid", 16,
                     "--output", report_path)
    assert code == EXIT_OK
    report = json.loads(report_path.read_text())
    for rec in report["records"]:
        assert set(rec) >= {"name", "stage", "t", "metric", "threshold", "pass"}
        if rec["threshold"] > 0 and "runtime" not in rec["name"]:
            assert rec["metric"] <= 1e-10
    assert set(report["runtime_s"]) >= {"endpoints", "orientation"}


def test_verify_invariant_failure_is_reported(spec_path, capsys, tmp_path):
    # eps ~ 1e-15 is below what stage T can resolve; the failure must surface as exit 4
    report_path = tmp_path / "report.json"
    code, _, err = run(capsys, "verify", "--input", spec_path("mobius_scale"), "--grid", 8,
                       "--output", report_path)
    assert code == EXIT_INVARIANT
    report = json.loads(report_path.read_text())
    failed = [r for r in report["records"] if not r["pass"]]
    assert failed and all("ResolutionError" in r["note"] for r in failed)
    assert {r["stage"] for r in failed} <= {"P", "T", "E", "F"}
    assert "FAIL det T" in err


def test_non_invertible_mobius(spec_path, capsys):
    doc = json.loads(json.dumps(SPECS["mobius_scale"]))
    doc["primitives"][0]["params"] = {"a_re": 1.0, "b_re": 2.0, "c_re": 0.5, "d_re": 1.0}
    code, out, err = run(capsys, "verify", "--input", spec_path("mobius_scale", doc))
    assert code == EXIT_PARSE
    assert out == ""
    assert "not invertible" in err


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(version=7),
    lambda d: d["primitives"][0].update(kind="shear"),
    lambda d: d["primitives"][0]["params"].update(angle="fast"),
    lambda d: d["primitives"][0]["params"].update(spin=1.0),
    lambda d: d["metadata"].update(n=3),
])
def test_spec_validation(spec_path, capsys, mutate):
    doc = json.loads(json.dumps(SPECS["rot_z"]))
    mutate(doc)
    assert run(capsys, "retract", "--input", spec_path("rot_z", doc))[0] == EXIT_PARSE


def test_bad_arguments(spec_path, capsys):
    path = spec_path("identity")
    assert run(capsys, "retract", "--input", path, "--t", "0,2")[0] == EXIT_PARSE
    assert run(capsys, "retract", "--input", path, "--grid", "0")[0] == EXIT_PARSE
    assert run(capsys, "verify", "--input", path, "--fd-step", "-1")[0] == EXIT_PARSE
    assert run(capsys, "frobnicate")[0] == EXIT_PARSE


def trace_table(out):
    _, body = rows(out)
    return {(r[0], r[1], r[2]): float(r[3]) for r in body}


def test_trace_identity(spec_path, capsys):
    code, out, _ = run(capsys, "trace", "--input", spec_path("identity"), "--y-samples", 8)
    assert code == EXIT_OK
    table = trace_table(out)
    assert 0 < table[("S", "eps", "")] <= 0.5
    exits = [v for (s, q, _), v in table.items() if q == "exit_time"]
    assert len(exits) == 8 and all(v == 1.0 for v in exits)


def test_trace_rotation(spec_path, capsys):
    table = trace_table(run(capsys, "trace", "--input", spec_path("rot_x"))[1])
    assert table[("Q", "a", "")] == pytest.approx(1.0, abs=1e-12)
    assert table[("Q", "c", "")] == pytest.approx(1.0, abs=1e-12)
    assert table[("Q", "b", "")] == pytest.approx(0.0, abs=1e-12)


def test_trace_corpus_member(spec_path, capsys):
    code, out, _ = run(capsys, "trace", "--input", spec_path("flow_translation"),
                       "--y-samples", 6)
    assert code == EXIT_OK
    exits = [v for (s, q, _), v in trace_table(out).items() if q == "exit_time"]
    assert len(exits) == 6
    assert all(np.isfinite(v) and 0 < v < T_MAX for v in exits)
