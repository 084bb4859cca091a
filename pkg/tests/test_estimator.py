import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from markovfp.estimator import SemigroupTransformer
from markovfp.evolve import step_semigroup
from markovfp.generator import assemble
from markovfp.problem import CoefficientSet, Grid

CO = CoefficientSet.isotropic(rho="exp(-x1^2)")
G = Grid.uniform(-4, 4, 64)


def test_params_round_trip():
    est = SemigroupTransformer(CO, G, dt=0.01, horizon=0.1)
    p = est.get_params()
    assert p["dt"] == 0.01 and p["extension"] == "neumann"
    c = clone(est).set_params(extension="dirichlet")
    assert c.extension == "dirichlet" and est.extension == "neumann"


def test_transform_matches_semigroup():
    X = np.random.default_rng(0).uniform(size=(3, G.size))
    est = SemigroupTransformer(CO, G, extension="dirichlet", dt=0.01, horizon=0.1).fit()
    Y = est.transform(X)
    ref = step_semigroup(assemble(CO, G, "dirichlet"), X.T, 0.01, 10)[-1].T
    assert np.allclose(Y, ref, rtol=0, atol=1e-14)


def test_path_shape_and_endpoints():
    X = np.ones((2, G.size))
    est = SemigroupTransformer(CO, G, dt=0.02, horizon=0.1).fit(X)
    P = est.path(X)
    assert P.shape == (6, 2, G.size)
    assert np.array_equal(P[0], X) and np.allclose(P[-1], 1, atol=1e-13)


def test_validation():
    with pytest.raises(NotFittedError):
        SemigroupTransformer(CO, G).transform(np.ones((1, G.size)))
    est = SemigroupTransformer(CO, G, dt=0.01, horizon=0.1).fit()
    with pytest.raises(ValueError, match="columns"):
        est.transform(np.ones((1, 5)))
    with pytest.raises(ValueError, match="multiple"):
        SemigroupTransformer(CO, G, dt=0.03, horizon=0.1).fit()
    with pytest.raises(ValueError):
        SemigroupTransformer().fit()
