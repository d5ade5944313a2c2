"""JSON description of sphere diffeomorphisms.

A spec document looks like::

    {"version": 1,
     "primitives": [{"kind": "mobius", "params": {"a_re": 2, "d_re": 1}},
                    {"kind": "rotation", "params": {"axis_x": 0, "axis_y": 0,
                                                    "axis_z": 1, "angle": 0.7}}],
     "metadata": {"name": "example"}}

Primitives apply in list order. Flow kinds act in a stereographic chart
(``chart`` 0 for north, 1 for south) after an optional pre-rotation given by
``rot_axis_*`` and ``rot_angle``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .diffeo_engine import (
    ChartConjugation,
    DiffeoChain,
    MobiusMap,
    PlanarFlowMap,
    RotationMap,
    TranslationField,
    VortexField,
)
from .sphere_geometry import Rotation

SPEC_VERSION = 1


class SpecError(ValueError):
    """The document is not a valid diffeomorphism spec."""


_ROT = ("rot_axis_x", "rot_axis_y", "rot_axis_z", "rot_angle")
_FLOW_COMMON = ("center_x", "center_y", "radius")

# kind -> (required params, optional params with defaults)
KINDS = {
    "rotation": (("axis_x", "axis_y", "axis_z", "angle"), {}),
    "mobius": (("a_re", "d_re"), {"a_im": 0.0, "b_re": 0.0, "b_im": 0.0, "c_re": 0.0,
                                  "c_im": 0.0, "d_im": 0.0}),
    "vortex_flow": (_FLOW_COMMON + ("strength",),
                    {"tau": 0.0, "chart": 0.0, **{k: 0.0 for k in _ROT}}),
    "translation_flow": (_FLOW_COMMON + ("velocity_x", "velocity_y"),
                         {"tau": 0.0, "chart": 0.0, **{k: 0.0 for k in _ROT}}),
}


def _params(index, kind, params):
    if not isinstance(params, dict):
        raise SpecError(f"primitive {index}: params must be an object")
    required, optional = KINDS[kind]
    missing = [k for k in required if k not in params]
    if missing:
        raise SpecError(f"primitive {index} ({kind}): missing params {missing}")
    unknown = sorted(set(params) - set(required) - set(optional))
    if unknown:
        raise SpecError(f"primitive {index} ({kind}): unknown params {unknown}")
    out = dict(optional)
    for k, v in params.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise SpecError(f"primitive {index} ({kind}): param {k} must be a finite number")
        out[k] = float(v)
    return out


def _rotation(axis, angle, where):
    axis = np.asarray(axis, dtype=float)
    if angle == 0.0:
        return Rotation.identity()
    if np.linalg.norm(axis) == 0.0:
        raise SpecError(f"{where}: rotation axis must be nonzero")
    return Rotation.from_axis_angle(axis, angle)


def _flow(kind, p, where):
    center = [p["center_x"], p["center_y"]]
    if kind == "vortex_flow":
        field = VortexField(center, p["radius"], p["strength"], p["tau"])
    else:
        field = TranslationField(center, p["radius"], [p["velocity_x"], p["velocity_y"]], p["tau"])
    if p["chart"] not in (0.0, 1.0):
        raise SpecError(f"{where}: chart must be 0 (north) or 1 (south)")
    pre = _rotation([p[k] for k in _ROT[:3]], p["rot_angle"], where)
    chart = "north" if p["chart"] == 0.0 else "south"
    return ChartConjugation([PlanarFlowMap(field)], chart, None if p["rot_angle"] == 0.0 else pre)


def build_primitive(index: int, entry):
    if not isinstance(entry, dict) or "kind" not in entry:
        raise SpecError(f"primitive {index}: expected an object with 'kind' and 'params'")
    kind = entry["kind"]
    if kind not in KINDS:
        raise SpecError(f"primitive {index}: unknown kind {kind!r}")
    p = _params(index, kind, entry.get("params", {}))
    where = f"primitive {index} ({kind})"
    try:
        if kind == "rotation":
            return RotationMap(_rotation([p["axis_x"], p["axis_y"], p["axis_z"]], p["angle"], where))
        if kind == "mobius":
            coef = [complex(p[f"{n}_re"], p[f"{n}_im"]) for n in "abcd"]
            return MobiusMap(*coef)
        return _flow(kind, p, where)
    except SpecError:
        raise
    except ValueError as exc:
        raise SpecError(f"{where}: {exc}") from exc


def build_chain(doc) -> DiffeoChain:
    """Validate a spec document (a dict) and build its chain."""
    if not isinstance(doc, dict):
        raise SpecError("spec must be a JSON object")
    if doc.get("version") != SPEC_VERSION:
        raise SpecError(f"unsupported spec version {doc.get('version')!r}")
    prims = doc.get("primitives")
    if not isinstance(prims, list):
        raise SpecError("'primitives' must be a list")
    meta = doc.get("metadata", {})
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise SpecError("'metadata' must map strings to strings")
    return DiffeoChain([build_primitive(i, e) for i, e in enumerate(prims)])


def load_spec(path) -> tuple[DiffeoChain, dict]:
    """Read a spec file; returns the chain and the metadata."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as exc:
        raise SpecError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path} is not valid JSON: {exc}") from exc
    return build_chain(doc), dict(doc.get("metadata", {}))


def dump_spec(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
