"""Scikit-learn style wrapper around the discrete semigroup."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .evolve import Stepper
from .generator import assemble
from .problem import CoefficientSet, Grid


class SemigroupTransformer(TransformerMixin, BaseEstimator):
    """Apply ``T_t`` (backward Euler) to functions sampled at cell centres.

    Each row of ``X`` is one function ``u`` on the grid.  ``fit`` assembles
    and factorizes; ``transform`` returns ``T_horizon u`` row by row.

    Parameters
    ----------
    coefficients : CoefficientSet
    grid : Grid
    extension : {"neumann", "dirichlet"}
    dt, horizon : float
        Time step and final time; ``horizon`` must be a multiple of ``dt``.
    scheme : {"backward_euler", "crank_nicolson"}
    solver : {"direct", "lu", "cg"}
    """

    def __init__(self, coefficients: CoefficientSet = None, grid: Grid = None, extension="neumann",
                 dt=1e-3, horizon=1.0, scheme="backward_euler", solver="direct"):
        self.coefficients = coefficients
        self.grid = grid
        self.extension = extension
        self.dt = dt
        self.horizon = horizon
        self.scheme = scheme
        self.solver = solver

    def fit(self, X=None, y=None):
        if self.coefficients is None or self.grid is None:
            raise ValueError("coefficients and grid are required")
        steps = int(round(self.horizon / self.dt))
        if steps < 1 or abs(steps * self.dt - self.horizon) > 1e-9 * self.horizon:
            raise ValueError(f"horizon={self.horizon} is not a positive multiple of dt={self.dt}")
        self.generator_ = assemble(self.coefficients, self.grid, self.extension)
        self.stepper_ = Stepper(self.generator_, self.dt, self.scheme, solver=self.solver)
        self.n_steps_ = steps
        self.n_features_in_ = self.generator_.size
        return self

    def _check(self, X):
        check_is_fitted(self, "stepper_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns; the grid has {self.n_features_in_} cells")
        return X

    def transform(self, X):
        U = self._check(X).T.copy()
        for _ in range(self.n_steps_):
            U = self.stepper_.step(U)
        return U.T

    def path(self, X):
        """All stamps: array of shape ``(n_steps + 1, n_samples, n_cells)``."""
        U = self._check(X).T.copy()
        out = np.empty((self.n_steps_ + 1,) + U.T.shape)
        out[0] = U.T
        for k in range(self.n_steps_):
            U = self.stepper_.step(U)
            out[k + 1] = U.T
        return out
