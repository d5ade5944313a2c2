"""scikit-learn style wrappers around the sphere and square retractions.

``fit(f)`` caches the per-map stage data; ``transform(X)`` evaluates the
deformed map at time ``t`` on points ``X``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .diffeo_engine import DEFAULT_STEPS, DiffeoChain
from .sphere_retraction import SOBOLEV_C, StagePlan, retract_p
from .square_retraction import LIFT_GRID, SquareMap, stage_e, stage_f


def _check_time(t):
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


class SphereRetraction(BaseEstimator, TransformerMixin):
    """Deformation ``P_t`` of a sphere diffeomorphism towards a rotation.

    Parameters
    ----------
    t : float
        Path time in [0, 1]; ``t = 0`` gives the map itself, ``t = 1`` the
        rotation ``alpha(f)^{-1}``.
    steps_per_unit : int
        RK4 steps per unit time for every flow along the path.
    fd_step : float
        Relative finite-difference step for the Sobolev terms of ``eps``.
    sobolev_c : float
        Sobolev constant entering ``eps``.

    Attributes
    ----------
    plan_ : StagePlan
        Stage data of the fitted map.
    rotation_ : Rotation
        The endpoint ``alpha(f)^{-1}``.
    """

    def __init__(self, t=1.0, steps_per_unit=DEFAULT_STEPS, fd_step=1e-2, sobolev_c=SOBOLEV_C):
        self.t = t
        self.steps_per_unit = steps_per_unit
        self.fd_step = fd_step
        self.sobolev_c = sobolev_c

    def fit(self, f: DiffeoChain, y=None):
        if not isinstance(f, DiffeoChain):
            raise TypeError("fit expects a DiffeoChain")
        self.plan_ = StagePlan(f, int(self.steps_per_unit), float(self.fd_step),
                               float(self.sobolev_c))
        self.rotation_ = self.plan_.alpha.inverse
        return self

    def path(self, t=None) -> DiffeoChain:
        """The chain ``P_t(f)`` (at the estimator's ``t`` by default)."""
        check_is_fitted(self, "plan_")
        t = _check_time(self.t if t is None else t)
        return retract_p(self.plan_.f, t, self.plan_)

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 3:
            raise ValueError(f"expected sphere points of shape (n, 3), got {X.shape}")
        return self.path().evaluate(X)


class SquareRetraction(BaseEstimator, TransformerMixin):
    """Deformation of a square diffeomorphism towards the identity.

    Class F maps follow ``F_t``; class E maps follow ``E_t``.

    Parameters
    ----------
    t : float
        Path time in [0, 1].
    steps_per_unit : int
        RK4 steps per unit curve parameter.
    grid_n : int
        Initial resolution of the lift grid.
    """

    def __init__(self, t=1.0, steps_per_unit=DEFAULT_STEPS, grid_n=LIFT_GRID):
        self.t = t
        self.steps_per_unit = steps_per_unit
        self.grid_n = grid_n

    def fit(self, f: SquareMap, y=None):
        if not isinstance(f, SquareMap):
            raise TypeError("fit expects a SquareMap")
        self.map_ = f
        self.stage_ = stage_f if f.class_tag == "F" else stage_e
        return self

    def path(self, t=None) -> SquareMap:
        check_is_fitted(self, "map_")
        t = _check_time(self.t if t is None else t)
        return self.stage_(self.map_, t, int(self.steps_per_unit), int(self.grid_n))

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError(f"expected square points of shape (n, 2), got {X.shape}")
        return self.path().evaluate(X)
