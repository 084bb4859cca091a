import numpy as np
import pytest

from markovfp import expr as ex
from markovfp.generator import (AssemblyError, assemble, consistency_error, derive_drift, drift_expressions,
                                factorize_sigma, friedrichs_reference, write_coo)
from markovfp.problem import CoefficientSet, Grid, sample_field


def test_classical_laplacian_n4():
    g = Grid.uniform(0, 1, 4)
    L = assemble(CoefficientSet.isotropic(), g).L.toarray()
    h2 = 0.25 ** 2
    expected = np.array([[-1, 1, 0, 0], [1, -2, 1, 0], [0, 1, -2, 1], [0, 0, 1, -1]]) / h2
    assert np.allclose(L, expected, rtol=1e-14, atol=0)
    assert np.allclose(L.sum(axis=1), 0, atol=1e-12)


def test_dirichlet_wall_at_half_cell():
    g = Grid.uniform(0, 1, 4)
    L = assemble(CoefficientSet.isotropic(), g, "dirichlet").L.toarray()
    assert L[0, 0] == pytest.approx(-3 / 0.25 ** 2)
    assert L.sum(axis=1)[0] < 0 and L.sum(axis=1)[1] == pytest.approx(0, abs=1e-12)


def test_killing_shifts_diagonal():
    g = Grid.uniform(-2, 2, 16)
    co = CoefficientSet.isotropic(rho="exp(-x1^2)")
    L0 = assemble(co, g).L
    L1 = assemble(CoefficientSet.isotropic(rho="exp(-x1^2)", c="-1"), g).L
    assert np.allclose((L1 - L0).toarray(), -np.eye(16), rtol=0, atol=1e-12 * abs(L0).max())


def test_ou_invariants():
    g = Grid.uniform(-8, 8, 256)
    gen = assemble(CoefficientSet.isotropic(rho="exp(-x1^2)"), g)
    inv = gen.invariants()
    assert inv["symmetry"] <= 1e-12
    assert inv["nsd"] <= 1e-10
    assert inv["min_offdiag"] >= 0
    assert inv["row_sum_defect"] <= 1e-12


def test_linear_test_function_interior():
    g = Grid.uniform(-8, 8, 256)
    co = CoefficientSet.isotropic(rho="exp(-x1^2)")
    Lphi = assemble(co, g).apply(sample_field("x1", g))
    x = g.axis_centers(0)
    inner = np.abs(x) < 2
    # phi'' - 2 x phi' = -2x, second order in h
    assert np.max(np.abs(Lphi + 2 * x)[inner]) <= 20 * (16 / 256) ** 2


def test_consistency_order_two():
    co = CoefficientSet.isotropic(rho="exp(-x1^2)")
    errs = [consistency_error(co, Grid.uniform(-8, 8, n), "sin(x1)") for n in (128, 256, 512)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 2) <= 0.3)


def test_consistency_2d_cross_term():
    co = CoefficientSet(a=[["2 + sin(x1) * cos(x2)", "0.3 * tanh(x1 * x2)"],
                           ["0.3 * tanh(x1 * x2)", "1.5 + 0.5 * cos(x1)"]], rho="exp(-(x1^2 + x2^2) / 2)")
    errs = [consistency_error(co, Grid((-4, -4), (4, 4), (n, n)), "sin(x1) + cos(x2)") for n in (64, 128, 256)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.7)


def test_2d_invariants_with_cross_term():
    co = CoefficientSet(a=[["2", "0.5"], ["0.5", "1"]], rho="exp(-(x1^2 + x2^2) / 2)", c="-0.5")
    gen = assemble(co, Grid((-3, -3), (3, 3), (24, 24)))
    inv = gen.invariants()
    assert inv["symmetry"] <= 1e-12 and inv["nsd"] <= 1e-10 and inv["min_offdiag"] >= 0
    assert inv["row_sum_defect"] <= 1e-12


def test_strong_cross_term_fails_loudly():
    # with h1 = 4 h2 the face weight a11 h2 / h1 drops below |a12|
    co = CoefficientSet(a=[["1", "0.9"], ["0.9", "1"]])
    with pytest.raises(AssemblyError, match="loses positivity"):
        assemble(co, Grid((-1, -1), (1, 1), (8, 32)))


def test_drift_formulas():
    cases = [("1", "exp(-x1^2)", 0.7, -1.4), ("1", "1", 0.7, 0.0), ("1 + x1^2", "1", 0.7, 1.4)]
    for a, rho, x, b in cases:
        e = drift_expressions(CoefficientSet.isotropic(a=a, rho=rho))[0]
        assert ex.evaluate(e, [x]) == pytest.approx(b, abs=1e-14)


def test_drift_survives_underflowing_density():
    g = Grid.uniform(-30, 30, 64)
    dv = derive_drift(CoefficientSet.isotropic(rho="exp(-x1^4)"), g)
    assert np.all(np.isfinite(dv.values))
    assert dv.values[0, 0] == pytest.approx(-4 * g.axis_centers(0)[0] ** 3)


@pytest.mark.parametrize("A,sigma", [
    (np.eye(2), np.eye(2)),
    (np.array([[4.0, 2.0], [2.0, 2.0]]), np.array([[2.0, 0.0], [1.0, 1.0]])),
    (np.diag([0.0, 1.0]), np.diag([0.0, 1.0])),
])
def test_sigma_factor(A, sigma):
    s = factorize_sigma(A)
    assert np.allclose(s, sigma, atol=1e-14)
    assert np.allclose(s @ s.T, A, atol=1e-14)


def test_reference_matches_neumann():
    co = CoefficientSet.isotropic(rho="exp(-x1^2)", c="-1")
    g = Grid.uniform(-4, 4, 64)
    ref = friedrichs_reference(co, g)
    assert ref.reference and (ref.L != assemble(co, g).L).nnz == 0
    assert np.allclose(np.asarray(ref.L.sum(axis=1)).ravel(), -1, atol=1e-10)


def test_weighted_form_uses_effective_diffusion():
    g = Grid.uniform(-3, 3, 48)
    w = assemble(CoefficientSet.isotropic(rho="exp(-x1^2)", form="weighted"), g)
    d = assemble(CoefficientSet.isotropic(a="exp(-x1^2)", rho="exp(-x1^2)"), g)
    assert np.allclose(w.L.toarray(), d.L.toarray(), rtol=1e-14, atol=0)


def test_coo_export(tmp_path):
    g = Grid.uniform(0, 1, 4)
    gen = assemble(CoefficientSet.isotropic(), g)
    write_coo(tmp_path / "m.coo", gen)
    lines = (tmp_path / "m.coo").read_text().splitlines()
    assert lines[0].startswith("# extension=neumann")
    entries = [tuple(l.split()) for l in lines[1:]]
    assert len(entries) == gen.L.nnz
    M = np.zeros((4, 4))
    for r, c, v in entries:
        M[int(r), int(c)] = float(v)
    assert np.array_equal(M, gen.L.toarray())
