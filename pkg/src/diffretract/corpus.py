"""Fixed test corpus: ten sphere diffeomorphisms as spec documents, plus the
rotations used for equivariance checks."""

from __future__ import annotations

from .diffeo_engine import DiffeoChain
from .specfile import SPEC_VERSION, build_chain
from .sphere_geometry import Rotation
from .square_retraction import square_suite  # noqa: F401  re-exported


def _rotation(axis, angle):
    return {"kind": "rotation",
            "params": {"axis_x": axis[0], "axis_y": axis[1], "axis_z": axis[2], "angle": angle}}


def _mobius(a, b, c, d):
    params = {}
    for name, z in zip("abcd", (a, b, c, d)):
        z = complex(z)
        params[f"{name}_re"] = z.real
        if z.imag:
            params[f"{name}_im"] = z.imag
    return {"kind": "mobius", "params": params}


_VORTEX = {"kind": "vortex_flow",
           "params": {"center_x": 0.3, "center_y": -0.2, "radius": 1.0, "strength": 1.5,
                      "tau": 0.5, "chart": 0, "rot_axis_x": 1.0, "rot_axis_y": 1.0,
                      "rot_axis_z": 0.0, "rot_angle": 0.4}}
_TRANSLATION = {"kind": "translation_flow",
                "params": {"center_x": 0.1, "center_y": 0.0, "radius": 1.2,
                           "velocity_x": 0.4, "velocity_y": 0.25, "chart": 1}}
_ROTATIONS = {
    "rot_z": ([0, 0, 1], 0.7),
    "rot_x": ([1, 0, 0], 2.1),
    "rot_oblique": ([1, -2, 0.5], -1.3),
}

ROTATION_MEMBERS = tuple(_ROTATIONS)


def _doc(name, prims):
    return {"version": SPEC_VERSION, "primitives": prims, "metadata": {"name": name}}


def corpus_specs() -> dict[str, dict]:
    """Spec documents of the ten members: identity, 3 rotations, 2 Moebius maps,
    2 chart-conjugated flows and 2 compositions."""
    docs = {"identity": _doc("identity", [])}
    for name, (axis, angle) in _ROTATIONS.items():
        docs[name] = _doc(name, [_rotation(axis, angle)])
    docs["mobius_scale"] = _doc("mobius_scale", [_mobius(2, 0, 0, 1)])
    docs["mobius_loxodromic"] = _doc("mobius_loxodromic", [_mobius(2, 0.3, -0.1, 1)])
    docs["flow_vortex"] = _doc("flow_vortex", [_VORTEX])
    docs["flow_translation"] = _doc("flow_translation", [_TRANSLATION])
    docs["composed_mobius_flow"] = _doc("composed_mobius_flow", [
        _mobius(2, 0, 0, 1), _VORTEX, _rotation(*_ROTATIONS["rot_z"])])
    docs["composed_flows"] = _doc("composed_flows", [
        _TRANSLATION, _rotation(*_ROTATIONS["rot_x"]), _mobius(2, 0.3, -0.1, 1)])
    return docs


def corpus() -> dict[str, DiffeoChain]:
    return {name: build_chain(doc) for name, doc in corpus_specs().items()}


def rotations() -> dict[str, Rotation]:
    return {name: Rotation.from_axis_angle(axis, angle) for name, (axis, angle) in _ROTATIONS.items()}


def equivariance_rotations() -> list[Rotation]:
    """The two rotations used for equivariance checks."""
    return [Rotation.from_axis_angle([0.3, 1, -0.4], 0.9),
            Rotation.from_axis_angle([-1, 0.2, 0.6], 2.6)]
