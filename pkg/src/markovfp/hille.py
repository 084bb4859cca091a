"""Hille's one-dimensional solvability tests through two iterated exponential integrals.

With ``B(y) = int_0^y b``::

    I1(x) = int_0^x e^{B(y)} int_0^y e^{-B(u)} du dy
    I2(x) = int_0^x e^{-B(y)} int_0^y e^{B(u)} du dy

Problem L0 is solvable iff ``I1`` diverges at both ends; problem L needs in
addition that ``I2`` diverges at both ends.

Both integrals are evaluated in the log domain.  ``G(y) = e^{B(y)} int_0^y e^{-B}``
solves ``G' = b G + 1``, so ``l = log G`` solves ``l' = b + e^{-l}``, a
well-scaled ODE even when ``|B|`` is far beyond the double range.  The outer
integral ``I = int G`` obeys ``(log I)' = exp(log G - log I)``.  Both are
integrated in ``s = log y`` with a stiff solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp

from . import expr as ex
from .reports import _plain

__all__ = ["DIVERGES", "CONVERGES", "INCONCLUSIVE", "HilleVerdict", "antiderivative_B",
           "classify_integral", "hille_classify", "ladder_values", "log_integral_ladder"]

DIVERGES, CONVERGES, INCONCLUSIVE = "diverges", "converges", "inconclusive"
DIVERGE_FACTOR = 10.0      # last rung vs four rungs earlier
CAUCHY_TOL = 1e-8          # relative increment for convergence
NONSHRINK_RATIO = 0.95     # increments that stop shrinking signal (e.g. logarithmic) growth
_Y0 = 1e-6


class QuadratureError(RuntimeError):
    pass


def antiderivative_B(b, x: float) -> float:
    """``B(x) = int_0^x b(s) ds`` by adaptive quadrature (relative tolerance 1e-10)."""
    f = ex.compile_scalar(ex.as_expression(b))
    val, err = quad(lambda s: f(0.0, s), 0.0, float(x), epsrel=1e-10, epsabs=0.0, limit=200,
                    full_output=False)
    if not math.isfinite(val) or err > 1e-8 * max(1.0, abs(val)):
        raise QuadratureError(f"quadrature of b on [0, {x}] did not converge (estimate {val}, error {err})")
    return float(val)


def _drift_fn(b, direction: int, variant: str):
    """Drift seen by ``I1`` on ``[0, inf)`` after reflecting and/or flipping sign."""
    f = ex.compile_scalar(ex.as_expression(b))
    # x -> -x maps b(s) to -b(-s); I2 swaps the roles of B and -B
    sign = (1.0 if variant == "I1" else -1.0) * (1.0 if direction > 0 else -1.0)
    return lambda y: sign * f(0.0, direction * y)


def log_integral_ladder(b, direction: int = 1, variant: str = "I1", K: int = 16,
                        rtol: float = 1e-11) -> dict:
    """``log I(2^k)`` for ``k = 2..K`` along the chosen direction."""
    if variant not in ("I1", "I2") or direction not in (1, -1):
        raise ValueError("variant must be I1/I2 and direction +1/-1")
    if K < 6:
        raise ValueError("ladder needs K >= 6")
    beta = _drift_fn(b, direction, variant)

    # independent variable s = log y keeps the ladder (11 decades in y) well scaled;
    # the second state is the gap D = log G - log I, which stays O(1) even when
    # log G itself grows like a power of y
    def rhs(s, state):
        lg, gap = state
        y = math.exp(s)
        dlg = y * (beta(y) + math.exp(min(-lg, 700.0)))
        return [dlg, dlg - y * math.exp(min(gap, 700.0))]

    def jac(s, state):
        lg, gap = state
        y = math.exp(s)
        e1 = y * math.exp(min(-lg, 700.0))
        return [[-e1, 0.0], [-e1, -y * math.exp(min(gap, 700.0))]]

    cutoffs = [2.0 ** k for k in range(2, K + 1)]
    s_eval = [math.log(c) for c in cutoffs]
    s0 = [math.log(_Y0), math.log(2.0) - math.log(_Y0)]
    try:
        with np.errstate(over="ignore"):   # Radau's error norm may overflow on rejected trial steps
            sol = solve_ivp(rhs, (math.log(_Y0), s_eval[-1]), s0, method="Radau", jac=jac,
                            t_eval=s_eval, rtol=rtol, atol=1e-12)
    except (OverflowError, ValueError, ex.EvaluationError) as err:
        return {"cutoffs": cutoffs, "log_I": [], "ok": False, "message": str(err)}
    ok = sol.status == 0 and np.all(np.isfinite(sol.y))
    return {"cutoffs": cutoffs[: sol.y.shape[1]], "log_I": (sol.y[0] - sol.y[1]).tolist(), "ok": bool(ok),
            "message": sol.message}


def ladder_values(b, direction: int, variant: str, cutoffs) -> list:
    """Nested adaptive quadrature of the iterated integral: an independent check.

    The inner exponentials are combined as ``exp(+-(B(y) - B(u)))``; usable
    only at moderate cutoffs where that stays in range.
    """
    beta = _drift_fn(b, direction, variant)
    B = lambda y: quad(beta, 0.0, y, epsrel=1e-11, epsabs=1e-13, limit=200)[0]
    out = []
    for x in cutoffs:
        def outer(y):
            By = B(y)
            return quad(lambda u: math.exp(By - B(u)), 0.0, y, epsrel=1e-10, limit=200)[0]

        out.append(quad(outer, 0.0, float(x), epsrel=1e-9, limit=200)[0])
    return out


def _classify_logs(log_I: list) -> tuple:
    if len(log_I) < 5:
        return INCONCLUSIVE, "ladder too short"
    L = np.asarray(log_I)
    if L[-1] - L[-5] >= math.log(DIVERGE_FACTOR):
        return DIVERGES, f"last rung exceeds {DIVERGE_FACTOR:g}x the value four rungs earlier"
    inc = np.exp(L[1:] - L[-1]) - np.exp(L[:-1] - L[-1])   # increments relative to the last value
    if inc[-1] < CAUCHY_TOL:
        return CONVERGES, f"relative increment {inc[-1]:.2e} below {CAUCHY_TOL:g}"
    tail = inc[-4:]
    if np.all(tail > 0) and np.all(tail[1:] / tail[:-1] >= NONSHRINK_RATIO):
        return DIVERGES, "increments stopped shrinking (unbounded slow growth)"
    return INCONCLUSIVE, "neither divergence nor Cauchy stability detected"


def classify_integral(b, direction: int = 1, variant: str = "I1", K: int = 16) -> dict:
    """Classification and trace for one integral in one direction."""
    lad = log_integral_ladder(b, direction, variant, K)
    if not lad["ok"]:
        return {"classification": INCONCLUSIVE, "reason": f"integration failed: {lad['message']}",
                "cutoffs": lad["cutoffs"], "log_I": lad["log_I"]}
    cls, reason = _classify_logs(lad["log_I"])
    return {"classification": cls, "reason": reason, "cutoffs": lad["cutoffs"], "log_I": lad["log_I"]}


@dataclass(frozen=True)
class HilleVerdict:
    drift: str
    I1: dict                  # {"+": classification, "-": classification}
    I2: dict
    L0_solvable: object       # True / False / None (inconclusive)
    L_solvable: object
    traces: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _plain({"drift": self.drift, "I1": self.I1, "I2": self.I2,
                       "L0_solvable": self.L0_solvable, "L_solvable": self.L_solvable,
                       "traces": self.traces})


def _both_diverge(cls: dict):
    vals = set(cls.values())
    if vals == {DIVERGES}:
        return True
    if CONVERGES in vals:
        return False
    return None


def hille_classify(b, K: int = 16) -> HilleVerdict:
    e = ex.as_expression(b)
    I1, I2, traces = {}, {}, {}
    for variant, store in (("I1", I1), ("I2", I2)):
        for direction, tag in ((1, "+"), (-1, "-")):
            res = classify_integral(e, direction, variant, K)
            store[tag] = res["classification"]
            traces[f"{variant}{tag}"] = res
    l0 = _both_diverge(I1)
    i2 = _both_diverge(I2)
    if l0 is False:
        lsol = False
    elif l0 is None or i2 is None:
        lsol = None
    else:
        lsol = bool(i2)
    return HilleVerdict(ex.to_string(e), I1, I2, l0, lsol, traces)
