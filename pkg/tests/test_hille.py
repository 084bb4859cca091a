import math

import mpmath
import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gamma, gammainc

from markovfp import hille as hl


def log_I1_cubic(x):
    """``log I1(x)`` for ``b = x^3`` from the closed-form inner integral, scaled by ``e^{-B(x)}``."""
    inner = lambda y: 4 ** -0.75 * gamma(0.25) * gammainc(0.25, y ** 4 / 4)
    Bx = x ** 4 / 4
    val, _ = quad(lambda y: math.exp(y ** 4 / 4 - Bx) * inner(y), 0, x, epsrel=1e-12, limit=400,
                  points=[x * (1 - 2.0 ** -k) for k in range(1, 10)])
    return Bx + math.log(val)


class TestAntiderivative:
    def test_linear(self):
        assert hl.antiderivative_B("-x1", 2.0) == pytest.approx(-2.0, rel=1e-12)

    def test_zero(self):
        assert hl.antiderivative_B("0", 5.0) == 0.0

    def test_cubic(self):
        assert hl.antiderivative_B("-x1^3", 2.0) == pytest.approx(-4.0, rel=1e-12)


class TestLadder:
    def test_brownian_closed_form(self):
        lad = hl.log_integral_ladder("0", K=8)
        assert np.allclose(lad["log_I"], [math.log(c * c / 2) for c in lad["cutoffs"]], rtol=1e-9)

    @pytest.mark.parametrize("b,variant", [("-x1", "I1"), ("-x1", "I2"), ("-x1^3", "I1"), ("x1^3", "I2")])
    def test_matches_nested_quadrature(self, b, variant):
        lad = hl.log_integral_ladder(b, 1, variant, K=6)
        ref = math.log(hl.ladder_values(b, 1, variant, [4.0])[0])
        assert lad["log_I"][0] == pytest.approx(ref, rel=1e-8)

    def test_explosive_matches_closed_form(self):
        lad = hl.log_integral_ladder("x1^3", 1, "I1", K=6)
        assert lad["log_I"][0] == pytest.approx(log_I1_cubic(4.0), rel=1e-9)
        assert lad["log_I"][1] == pytest.approx(log_I1_cubic(8.0), rel=1e-9)

    def test_explosive_against_mpmath(self):
        mpmath.mp.dps = 30
        inner = lambda y: mpmath.mpf(4) ** -0.75 * mpmath.gammainc(0.25, 0, y ** 4 / 4)
        pts = [0, 2, 3, 3.5, 3.75, 3.9, 3.97, 4]
        ref = mpmath.log(mpmath.quad(lambda y: mpmath.exp(y ** 4 / 4) * inner(y), pts))
        lad = hl.log_integral_ladder("x1^3", 1, "I1", K=6)
        assert lad["log_I"][0] == pytest.approx(float(ref), rel=1e-10)

    def test_reflection(self):
        # b(x) = x1 + x1^2 is not odd, so the two directions differ
        plus = hl.log_integral_ladder("x1 + x1^2", 1, "I1", K=6)["log_I"][0]
        minus = hl.log_integral_ladder("x1 + x1^2", -1, "I1", K=6)["log_I"][0]
        ref = math.log(hl.ladder_values("x1 + x1^2", -1, "I1", [4.0])[0])
        assert minus == pytest.approx(ref, rel=1e-8) and plus != pytest.approx(minus)

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            hl.log_integral_ladder("0", 1, "I3")
        with pytest.raises(ValueError):
            hl.log_integral_ladder("0", K=3)


class TestClassification:
    def test_brownian(self):
        v = hl.hille_classify("0")
        assert (v.L0_solvable, v.L_solvable) == (True, True)
        assert v.I1 == v.I2 == {"+": hl.DIVERGES, "-": hl.DIVERGES}

    def test_log_growth_is_divergence(self):
        r = hl.classify_integral("-x1", 1, "I1")
        assert r["classification"] == hl.DIVERGES

    def test_cubic_restoring(self):
        v = hl.hille_classify("-x1^3")
        assert v.I1 == {"+": hl.CONVERGES, "-": hl.CONVERGES}
        assert v.I2 == {"+": hl.DIVERGES, "-": hl.DIVERGES}
        assert (v.L0_solvable, v.L_solvable) == (False, False)

    def test_short_ladder_stays_honest(self):
        r = hl.classify_integral("x1^3", 1, "I2", K=8)
        assert r["classification"] in (hl.CONVERGES, hl.INCONCLUSIVE)

    def test_verdict_serialises(self):
        d = hl.hille_classify("0", K=8).to_dict()
        assert list(d) == ["drift", "I1", "I2", "L0_solvable", "L_solvable", "traces"]
