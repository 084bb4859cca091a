"""Acceptance criteria, one test each, with a PASS/FAIL line on the terminal."""
import json
import math
import time
import warnings

import numpy as np
import pytest
from scipy.integrate import IntegrationWarning, quad

from markovfp import checkers as ck
from markovfp import evolve as ev
from markovfp import expr as ex
from markovfp import harness as hs
from markovfp import hille as hl
from markovfp.cli import main
from markovfp.generator import assemble, consistency_error
from markovfp.problem import CoefficientSet, Grid

from conftest import FIXTURES

CATALOG = hs.catalog()


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return emit


def test_generator_invariants(verdict):
    t0 = time.perf_counter()
    bad = []
    for name, s in CATALOG.items():
        for ext in ("neumann", "dirichlet"):
            inv = assemble(s.coefficients, s.grid, ext).invariants(n_random=100)
            checks = [inv["symmetry"] <= 1e-12, inv["nsd"] <= 1e-10, inv["min_offdiag"] >= 0]
            if ext == "neumann" and s.coefficients.c == ex.parse("0"):
                checks.append(inv["row_sum_defect"] <= 1e-12)
            if not all(checks):
                bad.append((name, ext, inv))
    elapsed = time.perf_counter() - t0
    verdict(1, not bad and elapsed < 10,
            f"invariants on {len(CATALOG)} scenarios x 2 closures in {elapsed:.1f}s, violations {bad}")


def test_submarkov(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for s in CATALOG.values():
        for ext in ("neumann", "dirichlet"):
            r = ev.check_submarkov(assemble(s.coefficients, s.grid, ext), s.dt, 1000, trials=100)
            worst = max(worst, -r.estimates["min"], r.estimates["max"] - 1.0)
    elapsed = time.perf_counter() - t0
    verdict(2, worst <= 1e-12 and elapsed < 60,
            f"max range violation {worst:.2e} over 1000 steps in {elapsed:.1f}s")


def test_mass_identity(verdict):
    doc = hs.run_convergence_study(CATALOG["ou_killing"], n_ladder=[])
    vals = [r["value"] for r in doc["rows"] if r["quantity"] == "mass_identity"]
    C = max(abs(v) / dt for v, dt in zip(vals, doc["dt_ladder"]))
    order = doc["orders"]["mass_identity"]["richardson"]
    s = CATALOG["ou"]
    path = ev.solve_fpke(assemble(s.coefficients, s.grid, "neumann"), s.initial_measure(), s.dt, 1.0)
    drift = float(np.max(np.abs(path.total_mass() - path.total_mass()[0])))
    verdict(3, order >= 0.9 and drift <= 1e-10 and np.isfinite(C),
            f"killing defect <= {C:.3f} dt with order {order:.3f}; conservative drift {drift:.1e}")


def test_weak_residual_and_duality(verdict):
    doc = hs.run_convergence_study(CATALOG["ou"], n_ladder=[])
    finest = {r["quantity"]: abs(r["value"]) for r in doc["rows"] if r["dt"] == 1e-3}
    names = [f"{kind}[{k}]" for kind in ("weak_residual", "duality") for k in range(3)]
    size = max(finest[n] for n in names)
    order = min(doc["orders"][n]["richardson"] for n in names)
    verdict(4, size <= 5e-3 and order >= 0.9,
            f"largest residual {size:.2e} at dt=1e-3, n=512; smallest order {order:.3f}")


def test_generator_consistency(verdict):
    co = CoefficientSet.isotropic(rho="exp(-x1^2)")
    ns = [128, 256, 512]
    errs = [consistency_error(co, Grid.uniform(-8, 8, n), "sin(x1)") for n in ns]
    order = hs.loglog_order(errs, [16 / n for n in ns])
    verdict(5, order >= 1.8, f"errors {[f'{e:.3e}' for e in errs]}, order {order:.3f}")


def test_uniqueness_proxy(verdict):
    ou = CATALOG["ou"]
    diffs = []
    for half in (4, 6, 8):
        s = ou.with_box((-half,), (half,), (64 * half,))
        diffs.append(hs.run_uniqueness_proxy(s, hille=False))
    full = diffs[-1]
    out = hs.run_uniqueness_proxy(CATALOG["outward_drift"], hille=False)
    l1 = [r.l1_difference for r in diffs]
    ok = (full.l1_difference <= 1e-6 and full.boundary_max <= 1e-9 and out.l1_difference >= 1e-2
          and l1[0] > l1[1] > l1[2])
    verdict(6, ok, f"OU boxes 4/6/8: {[f'{v:.2e}' for v in l1]}, boundary {full.boundary_max:.1e}; "
                   f"outward drift {out.l1_difference:.3f}")


def _oracle_log_G(B, y):
    shift = max(B(y), 0.0)
    pts = sorted({y * 2.0 ** -j for j in range(1, 40)} | {y - y * 2.0 ** -j for j in range(1, 40)})
    val = quad(lambda u: math.exp(B(y) - B(u) - shift), 0.0, y, points=pts, limit=400, epsrel=1e-12)[0]
    return shift + math.log(val)


def _oracle_increments(B, cutoffs=(4, 8, 16, 32)):
    """``log int_{x_{k-1}}^{x_k} G`` by nested quadrature, ``G(y) = int_0^y e^{B(y) - B(u)} du``."""
    edges = [1e-6, *cutoffs]
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        top = max(_oracle_log_G(B, a), _oracle_log_G(B, b))
        pts = [b - (b - a) * 2.0 ** -j for j in range(1, 30)]
        val = quad(lambda y: math.exp(_oracle_log_G(B, y) - top), a, b, points=pts, limit=400,
                   epsrel=1e-10)[0]
        out.append(top + math.log(val))
    return np.array(out)


def _oracle_class(log_inc):
    step = log_inc[-1] - log_inc[-2]
    if step >= math.log(0.9):
        return hl.DIVERGES
    return hl.CONVERGES if step <= math.log(0.5) else hl.INCONCLUSIVE


HILLE_TABLE = {"0": ((True, True), lambda y: 0.0),
               "-x1": ((True, True), lambda y: -y * y / 2),
               "-x1^3": ((False, False), lambda y: -y ** 4 / 4),
               "x1^3": ((True, False), lambda y: y ** 4 / 4)}


def test_hille_table(verdict):
    rows, mismatches = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        for drift, (expected, B) in HILLE_TABLE.items():
            v = hl.hille_classify(drift)
            got = (v.L0_solvable, v.L_solvable)
            rows.append(f"{drift}: ({'yes' if got[0] else 'no'}, {'yes' if got[1] else 'no'})")
            if got != expected:
                mismatches.append((drift, got))
            for variant, store in (("I1", v.I1), ("I2", v.I2)):
                for tag, sgn in (("+", 1), ("-", -1)):
                    Bv = (lambda y, B=B, sgn=sgn, flip=1 if variant == "I1" else -1: flip * B(sgn * y))
                    inc = _oracle_increments(Bv)
                    ladder = v.traces[f"{variant}{tag}"]["log_I"][:4]
                    close = np.allclose(np.logaddexp.accumulate(inc), ladder, rtol=1e-7, atol=0)
                    if not close or _oracle_class(inc) != store[tag]:
                        mismatches.append((drift, variant + tag, store[tag], _oracle_class(inc)))
    symmetric = all(hl.hille_classify(b).L_solvable == hl.hille_classify(m).L_solvable
                    for b, m in (("x1", "-x1"), ("x1^3", "-x1^3")))
    verdict(7, not mismatches and symmetric,
            f"{'; '.join(rows)}; oracle mismatches {mismatches}; L symmetric under b -> -b: {symmetric}")


def test_checker_sanity(verdict):
    g = Grid.uniform(-8, 8, 256)
    lyap = ck.check_lyapunov(CoefficientSet.isotropic(rho="exp(-x1^2 / 2)"), g)
    cubic = ck.check_lyapunov(CoefficientSet.isotropic(b="x1^3"), Grid.uniform(-4, 4, 256))
    radii = [2.0, 1.0, 0.5, 0.25]
    flat = [o for _, o in ck.vmo_oscillation("2.5", radii, Grid.uniform(-4, 4, 64, dim=2))]
    lip = [o for _, o in ck.vmo_oscillation("x1 + 0.5 * sin(x1)", radii, Grid.uniform(-4, 4, 256))]
    g2 = Grid.uniform(-2, 2, 64, dim=2)
    co = CoefficientSet(a=[["1 + x1^2", "0"], ["0", "1"]])
    ball = ((0.5, 0.0), 1.0)
    est = ck.check_H1(co, g2, balls=[ball]).estimates["balls"][0]
    gm_err = max(abs(est["gamma"] - 1.0), abs(est["M"] - 3.25) / 3.25)
    ok = (lyap.passed and lyap.estimates["C"] <= 4 and cubic.verdict == "fail"
          and all(o == 0 for o in flat) and all(a > b for a, b in zip(lip, lip[1:])) and gm_err <= 0.05)
    verdict(8, ok, f"Lyapunov C={lyap.estimates['C']:.3g} (OU), x^3 {cubic.verdict}; "
                   f"VMO const {max(flat)}, Lipschitz {[f'{o:.3f}' for o in lip]}; H1 rel err {gm_err:.3f}")


def _random_expr(rng, depth):
    if depth == 0 or rng.random() < 0.25:
        return rng.choice(["x1", "x2"]) if rng.random() < 0.6 else repr(round(rng.uniform(-3, 3), 3))
    op = rng.choice(["sin", "cos", "tanh", "exp", "sq", "+", "-", "*", "/"])
    a = _random_expr(rng, depth - 1)
    if op in ("sin", "cos", "tanh"):
        return f"{op}({a})"
    if op == "exp":
        return f"exp(tanh({a}))"
    if op == "sq":
        return f"({a})^2"
    b = _random_expr(rng, depth - 1)
    return f"({a}) / (1 + ({b})^2)" if op == "/" else f"({a}) {op} ({b})"


def test_expressions(verdict):
    rng = np.random.default_rng(7)
    h, bad_fd, bad_rt = 1e-5, [], []
    for _ in range(1000):
        src = _random_expr(rng, 4)
        e = ex.parse(src)
        x = rng.uniform(-2, 2, size=2)
        k = int(rng.integers(2))
        d = ex.evaluate(ex.differentiate(e, f"x{k + 1}"), list(x))
        f = ex.compile_scalar(e)
        shift = lambda s: f(0.0, *(x + s * np.eye(2)[k]))
        fd = (-shift(2 * h) + 8 * shift(h) - 8 * shift(-h) + shift(-2 * h)) / (12 * h)
        if abs(d - fd) > 1e-5 * (1 + abs(d)):
            bad_fd.append((src, d, fd))
        if ex.parse(ex.to_string(e)) != e:
            bad_rt.append(src)
    verdict(9, not bad_fd and not bad_rt,
            f"1000 random cases: {len(bad_fd)} derivative mismatches, {len(bad_rt)} round-trip failures")


def test_reproducible_json(tmp_path, verdict):
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        args = ["compare-extensions", str(FIXTURES / "ou.toml"), "--grid", "128", "--dt", "0.01",
                "--seed", "3", "--threads", "2", "--out", str(out)]
        main(args)
        d = out / "ou_fixture"
        blobs.append(((d / "compare.json").read_bytes(), (d / "report.json").read_bytes()))
    json.loads(blobs[0][0])
    verdict(10, blobs[0] == blobs[1], f"compare.json {len(blobs[0][0])} bytes identical: {blobs[0] == blobs[1]}")
