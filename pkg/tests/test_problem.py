import csv

import numpy as np
import pytest

from markovfp import expr as ex
from markovfp.problem import (CoefficientSet, DiscreteMeasure, Grid, ScenarioError, dump_scenario,
                              normalize_initial, parse_scenario, sample_field, write_field_csv)

BASE = """
[grid]
lo = [-8.0]
hi = [8.0]
n = [256]
[coefficients]
a = "1"
rho = "{rho}"
c = "{c}"
[initial]
u = "max(0, 1 - (x1 / 2)^2)^4"
[time]
T = 1.0
dt = 0.001
"""


def test_fixture_loads(ou_fixture):
    s = ou_fixture
    assert s.grid == Grid((-8.0,), (8.0,), (256,))
    assert s.coefficients.rho == ex.parse("exp(-x1^2)")
    assert s.n_steps == 1000
    assert s.extensions == ("neumann", "dirichlet")


def test_positive_killing_rejected():
    with pytest.raises(ScenarioError, match="c must be <= 0"):
        parse_scenario(BASE.format(rho="1", c="1"))


def test_negative_density_rejected():
    with pytest.raises(ScenarioError, match="rho must be > 0"):
        parse_scenario(BASE.format(rho="-1", c="0"))


def test_nonsymmetric_matrix_rejected():
    text = BASE.replace('a = "1"', "").replace("[grid]\n", "[grid]\ndim = 2\n")
    text = text.replace("lo = [-8.0]", "lo = [-1.0, -1.0]").replace("hi = [8.0]", "hi = [1.0, 1.0]")
    text = text.replace("n = [256]", "n = [8, 8]").format(rho="1", c="0")
    text = text.replace('[coefficients]', '[coefficients]\na12 = "1"\na21 = "0"\na11 = "2"\na22 = "2"')
    with pytest.raises(ScenarioError, match="not symmetric"):
        parse_scenario(text)


def test_indefinite_matrix_rejected():
    co = CoefficientSet(a=[["1", "2"], ["2", "1"]])
    with pytest.raises(ScenarioError, match="nonnegative definite"):
        co.validate(Grid((-1, -1), (1, 1), (4, 4)))


def test_unknown_key_rejected():
    with pytest.raises(ScenarioError, match="unknown keys"):
        parse_scenario(BASE.format(rho="1", c="0").replace('c = "0"', 'c = "0"\nkill = "1"'))


def test_bad_expression_position():
    with pytest.raises(ScenarioError, match=r"rho: .*byte offset 4"):
        parse_scenario(BASE.format(rho="exp(", c="0"))


def test_zero_field():
    g = Grid.uniform(0, 1, 4)
    assert np.array_equal(sample_field("0", g), np.zeros(4))


def test_cell_centres():
    g = Grid.uniform(0, 1, 4)
    assert np.allclose(sample_field("x1", g), [0.125, 0.375, 0.625, 0.875], rtol=0, atol=0)


def test_gaussian_centre_value():
    v = sample_field("exp(-x1^2)", Grid.uniform(-8, 8, 256))
    assert v.max() == pytest.approx(np.exp(-0.03125 ** 2), rel=1e-15)
    assert v.max() == pytest.approx(0.99902, abs=1e-5)


def test_sample_error_names_cell():
    g = Grid.uniform(-1, 1, 4)
    with pytest.raises(ScenarioError) as err:
        sample_field("ln(x1)", g)
    assert err.value.point is not None


def test_uniform_mass():
    g = Grid.uniform(0, 1, 10)
    m = normalize_initial(np.ones(10), np.ones(10), g)
    assert np.allclose(m.mass, 0.1, rtol=0, atol=1e-16)


def test_normalised_total_is_one():
    g = Grid.uniform(-8, 8, 256)
    m = normalize_initial(sample_field("exp(-x1^2)", g), np.ones(g.size), g)
    assert abs(m.total - 1.0) <= 1e-15


def test_point_mass():
    g = Grid.uniform(0, 1, 10)
    u = np.zeros(10)
    u[3] = 5.0
    m = normalize_initial(u, np.ones(10), g)
    assert m.mass[3] == 1.0 and m.total == 1.0


def test_measure_rejects_excess_mass():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.full(4, 0.5), Grid.uniform(0, 1, 4))


def test_zero_initial_rejected():
    with pytest.raises(ValueError):
        normalize_initial(np.zeros(4), np.ones(4), Grid.uniform(0, 1, 4))


def test_dump_round_trip(ou_fixture):
    again = parse_scenario(dump_scenario(ou_fixture), "again")
    assert again.grid == ou_fixture.grid
    assert again.coefficients == ou_fixture.coefficients
    assert again.initial == ou_fixture.initial
    assert (again.T, again.dt, again.extensions) == (ou_fixture.T, ou_fixture.dt, ou_fixture.extensions)


def test_field_csv_header(tmp_path):
    g = Grid((0, 0), (1, 1), (4, 4))
    write_field_csv(tmp_path / "f.csv", g, sample_field("x1 + x2", g))
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0] == ["x1", "x2", "value"]
    assert len(rows) == 17
    x1, x2, v = map(float, rows[2])
    assert v == pytest.approx(x1 + x2)


def test_grid_ordering_2d():
    g = Grid((0, 0), (1, 2), (4, 8))
    pts = g.points()
    assert pts[1, 1] - pts[0, 1] == pytest.approx(0.25)
    assert pts[1, 0] == pts[0, 0]


def test_grid_rejects_tiny():
    with pytest.raises(ScenarioError):
        Grid.uniform(0, 1, 2)


def test_weighted_form_flux():
    co = CoefficientSet(a=[["1"]], rho="exp(-x1^2)", form="weighted")
    assert co.flux_diffusion()[0][0] == ex.BinOp("*", co.rho, ex.Num(1.0))
