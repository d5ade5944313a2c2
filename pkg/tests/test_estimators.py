import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from diffretract import SphereRetraction, SquareRetraction
from diffretract.corpus import corpus, rotations
from diffretract.sphere_geometry import sphere_grid
from diffretract.sphere_retraction import StagePlan
from diffretract.square_retraction import edge_slide, square_suite

CORPUS = corpus()
_, _, GRID = sphere_grid(16)


def test_sphere_endpoints():
    f = CORPUS["mobius_loxodromic"]
    est = SphereRetraction(t=0.0).fit(f)
    assert np.max(np.abs(est.transform(GRID) - f.evaluate(GRID))) < 1e-7
    est.set_params(t=1.0)
    expected = StagePlan(f).alpha.inverse.apply(GRID)
    assert np.max(np.abs(est.transform(GRID) - expected)) < 1e-6
    assert np.allclose(est.rotation_.matrix, StagePlan(f).alpha.inverse.matrix, atol=1e-14)


def test_sphere_fixes_rotation():
    est = SphereRetraction(t=0.3).fit(CORPUS["rot_x"])
    assert np.max(np.abs(est.transform(GRID) - rotations()["rot_x"].apply(GRID))) < 1e-9


def test_sphere_path_matches_plan():
    f = CORPUS["flow_vortex"]
    est = SphereRetraction().fit(f)
    assert np.array_equal(est.path(0.2).evaluate(GRID), est.plan_.p(0.2).evaluate(GRID))


def test_sphere_validation():
    with pytest.raises(NotFittedError):
        SphereRetraction().transform(GRID)
    est = SphereRetraction().fit(CORPUS["identity"])
    with pytest.raises(ValueError):
        est.transform(GRID[:, :2])
    with pytest.raises(ValueError):
        est.path(1.5)
    with pytest.raises(TypeError):
        SphereRetraction().fit(GRID)


def test_clone_keeps_params():
    est = SphereRetraction(t=0.4, steps_per_unit=128, sobolev_c=5.0)
    twin = clone(est)
    assert twin.get_params() == est.get_params()


@pytest.mark.parametrize("name", ["bump-shear", "edge-slide"])
def test_square_endpoints(name):
    f = square_suite().get(name) or edge_slide()
    ax = (np.arange(16) + 0.5) / 16
    u = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    est = SquareRetraction(t=0.0).fit(f)
    assert np.max(np.abs(est.transform(u) - f.evaluate(u))) < 1e-7
    est.set_params(t=1.0)
    assert np.max(np.abs(est.transform(u) - u)) < 1e-8
    expected = "F" if f.class_tag == "F" else "E"
    assert est.path(0.5).class_tag == expected


def test_square_validation():
    with pytest.raises(TypeError):
        SquareRetraction().fit(CORPUS["identity"])
    est = SquareRetraction().fit(square_suite()["bump-twist"])
    with pytest.raises(ValueError):
        est.transform(GRID)
