"""Scenario catalog, the extension-comparison experiment, convergence studies and reports."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkers as ck
from . import evolve as ev
from . import expr as ex
from .generator import assemble, consistency_error, drift_expressions, friedrichs_reference, write_coo
from .hille import HilleVerdict, hille_classify
from .problem import Scenario, ScenarioError, load_scenario, parse_scenario, sample_field
from .reports import FAIL, INCONCLUSIVE, PASS, ConditionReport, _plain, worst

__all__ = [
    "PROXY_TOL", "BOUNDARY_TOL", "catalog", "catalog_names", "resolve_scenario", "ExperimentResult",
    "run_uniqueness_proxy", "run_checks", "run_verification", "run_convergence_study",
    "richardson_order", "loglog_order", "render_report", "write_path_csv", "exit_code", "run_many",
]

PROXY_TOL = 1e-6        # L1 path difference regarded as "same solution"
BOUNDARY_TOL = 1e-9     # mass within 2h of the boundary that keeps the truncation valid


# ---------------------------------------------------------------- catalog


def catalog_names() -> list:
    files = resources.files("markovfp") / "scenarios"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".toml"))


def catalog() -> dict:
    """Bundled scenarios by name."""
    files = resources.files("markovfp") / "scenarios"
    return {name: parse_scenario((files / f"{name}.toml").read_text(encoding="utf-8"), name)
            for name in catalog_names()}


def resolve_scenario(ref: str) -> Scenario:
    """A path to a scenario file or the name of a bundled scenario."""
    path = Path(ref)
    if path.suffix == ".toml" or path.exists():
        return load_scenario(path)
    if ref in catalog_names():
        return catalog()[ref]
    raise ScenarioError(f"no scenario file or catalog entry named {ref!r}; "
                        f"catalog: {', '.join(catalog_names())}")


# ---------------------------------------------------------------- experiment


@dataclass
class ExperimentResult:
    scenario: str
    extensions: tuple
    times: np.ndarray
    l1_difference: float                  # max over stamps of sum |mu - mu~|
    path_difference: np.ndarray           # per stamp
    midpoint: dict                        # convex-midpoint density comparison
    mass: dict                            # extension -> total mass per stamp
    boundary_mass: dict                   # extension -> mass within 2h of the boundary per stamp
    residuals: dict                       # extension -> weak residual battery
    reference_residuals: dict             # extension -> defect against the reference generator, phi = 1
    mass_defect: dict                     # extension -> mass identity defect
    membership: dict                      # extension -> ConditionReport
    checks: dict                          # id -> ConditionReport
    applicability: dict
    hille: Optional[HilleVerdict] = None
    meta: dict = field(default_factory=dict)

    @property
    def boundary_max(self) -> float:
        return float(max(v.max() for v in self.boundary_mass.values()))

    @property
    def proxy(self) -> ConditionReport:
        """Agreement of the two extensions, certified only when the boundary stays unreached."""
        est = {"l1_difference": self.l1_difference, "boundary_mass": self.boundary_max,
               "tolerance": PROXY_TOL, "boundary_tolerance": BOUNDARY_TOL}
        if self.l1_difference <= PROXY_TOL and self.boundary_max <= BOUNDARY_TOL:
            return ConditionReport("PROXY", PASS, estimates=est, note="extensions agree")
        if self.boundary_max > BOUNDARY_TOL:
            return ConditionReport("PROXY", INCONCLUSIVE, estimates=est,
                                   note="mass reaches the boundary; the difference reflects the truncation")
        k = int(np.argmax(self.path_difference))
        return ConditionReport("PROXY", FAIL, estimates=est,
                               witness={"t": float(self.times[k]), "l1": float(self.path_difference[k])},
                               note="extensions differ with the boundary unreached")

    def to_dict(self) -> dict:
        return _plain({
            "scenario": self.scenario,
            "extensions": list(self.extensions),
            "proxy": self.proxy.to_dict(),
            "l1_difference": self.l1_difference,
            "boundary_mass_max": self.boundary_max,
            "midpoint": {k: v for k, v in self.midpoint.items() if k != "l1_curve"},
            "final_mass": {k: float(v[-1]) for k, v in self.mass.items()},
            "residuals": self.residuals,
            "reference_residuals": self.reference_residuals,
            "mass_defect": self.mass_defect,
            "membership": {k: v.to_dict() for k, v in sorted(self.membership.items())},
            "checks": {k: v.to_dict() for k, v in sorted(self.checks.items())},
            "applicability": self.applicability,
            "hille": self.hille.to_dict() if self.hille else None,
            "meta": self.meta,
        })

    def curves(self) -> dict:
        out = {"t": self.times, "l1_difference": self.path_difference,
               "l1_midpoint": self.midpoint["l1_curve"]}
        for e in self.extensions:
            out[f"mass_{e}"] = self.mass[e]
            out[f"boundary_{e}"] = self.boundary_mass[e]
        return out


def _hille_applicable(s: Scenario) -> bool:
    co = s.coefficients
    return co.dim == 1 and co.form == "divergence" and ex.constant_value(co.a[0][0]) == 1.0


def run_checks(s: Scenario, seed: int = 0, hille: bool = True) -> tuple:
    reports = ck.run_all(s.coefficients, s.grid, seed=seed)
    applic = ck.theorem_applicability(reports, s.coefficients)
    hv = hille_classify(drift_expressions(s.coefficients)[0]) if hille and _hille_applicable(s) else None
    return reports, applic, hv


def run_uniqueness_proxy(s: Scenario, seed: int = 0, hille: bool = True) -> ExperimentResult:
    """Evolve the initial measure under both closures and compare the paths."""
    nu = s.initial_measure()
    lo, hi = np.array(s.grid.lo), np.array(s.grid.hi)
    support = s.grid.points()[nu.mass > 0]
    margin = float(np.min(np.minimum(support - lo, hi - support)))
    width = float(np.min(hi - lo))
    if margin < 0.1 * width:
        raise ScenarioError(f"initial measure comes within {margin:g} of the boundary; "
                            f"the comparison needs at least 10% of the box width ({0.1 * width:g})")
    ref = friedrichs_reference(s.coefficients, s.grid)
    alt = assemble(s.coefficients, s.grid, "dirichlet")
    p_ref, p_alt = ev.solve_fpke_pair(ref, alt, nu, s.dt, s.T)
    paths = {"neumann": p_ref, "dirichlet": p_alt}
    diff = np.abs(p_ref.masses - p_alt.masses).sum(axis=1)
    midpoint = ev.convex_midpoint_compare(p_ref, p_alt)
    battery = ev.default_battery(s.grid, s.T)
    phi_one = ev.TestFunctionPair("1", f"1 - t / {float(s.T)!r}", s.T)
    res, refres, mdef, memb, mass, bmass = {}, {}, {}, {}, {}, {}
    for name, p in paths.items():
        res[name] = [ev.weak_residual(p, s.coefficients, pair) for pair in battery]
        refres[name] = ev.reference_residual(p, ref, phi_one)
        mdef[name] = ev.mass_balance_killing(p, s.coefficients.c)
        memb[name] = ev.check_sp_membership(p, s.coefficients, nu, battery)
        mass[name] = p.total_mass()
        bmass[name] = ev.boundary_mass(p)
    reports, applic, hv = run_checks(s, seed, hille)
    reports["PATHGROWTH"] = ck.check_path_growth(s.coefficients, p_ref)
    reports = dict(sorted(reports.items()))
    return ExperimentResult(
        scenario=s.name, extensions=("neumann", "dirichlet"), times=p_ref.times,
        l1_difference=float(diff.max()), path_difference=diff, midpoint=midpoint, mass=mass,
        boundary_mass=bmass, residuals=res, reference_residuals=refres, mass_defect=mdef,
        membership=memb, checks=reports, applicability=applic, hille=hv,
        meta={"grid": s.grid.ident(), "dt": s.dt, "T": s.T, "seed": seed})


def run_verification(s: Scenario, seed: int = 0, trials: int = 100,
                     steps: Optional[int] = None) -> dict:
    """Identities and class membership for each requested extension."""
    nu = s.initial_measure()
    battery = ev.default_battery(s.grid, s.T)
    out = {}
    for ext in s.extensions:
        gen = assemble(s.coefficients, s.grid, ext)
        path = ev.solve_fpke(gen, nu, s.dt, s.T)
        u0 = nu.mass / gen.weights
        dual = [ev.verify_duality(gen, u0, p.phi, s.T, s.dt) for p in battery]
        inv = gen.invariants(seed=seed)
        out[ext] = {
            "invariants": inv,
            "submarkov": ev.check_submarkov(gen, s.dt, steps or s.n_steps, trials, seed).to_dict(),
            "membership": ev.check_sp_membership(path, s.coefficients, nu, battery).to_dict(),
            "duality": dual,
            "weak_residuals": [ev.weak_residual(path, s.coefficients, p) for p in battery],
            "mass_defect": ev.mass_balance_killing(path, s.coefficients.c),
            "final_mass": float(path.total_mass()[-1]),
        }
    return _plain({"scenario": s.name, "extensions": out})


# ---------------------------------------------------------------- convergence


def richardson_order(values: Sequence[float], ratio: float = 2.0) -> float:
    """Order from three rungs of a signed quantity ``v(h) = v* + C h^p``."""
    v1, v2, v3 = values[-3:]
    num, den = v1 - v2, v2 - v3
    if den == 0 or num == 0 or (num > 0) != (den > 0):
        return math.nan
    return math.log(num / den) / math.log(ratio)


def loglog_order(values: Sequence[float], steps: Sequence[float]) -> float:
    """Least-squares slope of ``log |v|`` against ``log step``."""
    v = np.abs(np.asarray(values, float))
    if v.size < 2 or np.any(v == 0):
        return math.nan
    return float(np.polyfit(np.log(np.asarray(steps, float)), np.log(v), 1)[0])


def run_convergence_study(s: Scenario, dt_ladder: Sequence[float] = (4e-3, 2e-3, 1e-3),
                          n_ladder: Optional[Sequence[int]] = None, phi: Optional[str] = None) -> dict:
    """Measured orders of the weak residuals, duality, mass identity (in ``dt``) and consistency (in ``h``)."""
    dt_ladder = sorted(dt_ladder, reverse=True)
    n0 = s.grid.n[0]
    n_ladder = list(n_ladder) if n_ladder is not None else [n0 // 4, n0 // 2, n0]
    gen = friedrichs_reference(s.coefficients, s.grid)
    nu = s.initial_measure()
    battery = ev.default_battery(s.grid, s.T)
    u0 = nu.mass / gen.weights
    rows = []
    series = {}
    for dt in dt_ladder:
        path = ev.solve_fpke(gen, nu, dt, s.T)
        for k, pair in enumerate(battery):
            series.setdefault(f"weak_residual[{k}]", []).append(ev.weak_defect(path, s.coefficients, pair))
            series.setdefault(f"duality[{k}]", []).append(
                float(ev.duality_residuals(gen, u0, pair.phi, s.T, dt, signed=True)[-1]))
        tot = path.total_mass()
        killed = ev.trapezoid_cumulative(path.masses @ sample_field(s.coefficients.c, s.grid), dt)
        series.setdefault("mass_identity", []).append(float((tot[0] - tot + killed)[-1]))
    orders = {}
    for name, vals in sorted(series.items()):
        p_r = richardson_order(vals) if len(vals) >= 3 else math.nan
        p_l = loglog_order(vals, dt_ladder)
        orders[name] = {"richardson": p_r, "loglog": p_l}
        for dt, v in zip(dt_ladder, vals):
            rows.append({"quantity": name, "dt": dt, "n": n0, "value": v})
    phi = phi or " + ".join(f"sin(x{k + 1})" for k in range(s.grid.dim))
    cons = []
    for n in n_ladder:
        g = s.grid.with_box(s.grid.lo, s.grid.hi, n)
        cons.append(consistency_error(s.coefficients, g, phi))
        rows.append({"quantity": "consistency", "dt": None, "n": n, "value": cons[-1]})
    widths = [(s.grid.hi[0] - s.grid.lo[0]) / n for n in n_ladder]
    orders["consistency"] = {"loglog": loglog_order(cons, widths)}
    for i, r in enumerate(rows):
        prev = rows[i - 1] if i and rows[i - 1]["quantity"] == r["quantity"] else None
        r["ratio"] = (abs(prev["value"] / r["value"]) if prev and r["value"] else None)
    return _plain({"scenario": s.name, "dt_ladder": dt_ladder, "n_ladder": n_ladder, "phi": phi,
                   "rows": rows, "orders": orders})


# ---------------------------------------------------------------- reports


def exit_code(verdicts) -> int:
    """0 if everything passed, 2 on any failure, 3 if only inconclusive verdicts remain."""
    v = worst(verdicts) if verdicts else PASS
    return {PASS: 0, FAIL: 2, INCONCLUSIVE: 3}[v]


def write_path_csv(path, sol: ev.SolutionPath) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "cell_index", "mass"])
        for k, t in enumerate(sol.times):
            for i, m in enumerate(sol.masses[k]):
                w.writerow([repr(float(t)), i, repr(float(m))])


def _write_curves(path, curves: dict) -> None:
    keys = list(curves)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in zip(*(curves[k] for k in keys)):
            w.writerow([repr(float(v)) for v in row])


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _markdown(docs: list) -> str:
    lines = ["# Uniqueness proxy report", ""]
    if not docs:
        lines.append("No results.")
    for d in docs:
        lines += [f"## {d['scenario']}", ""]
        if "proxy" in d:
            p = d["proxy"]
            lines.append(f"- extension comparison: {p['verdict']} (L1 difference "
                         f"{p['estimates']['l1_difference']:.3e}, boundary mass "
                         f"{p['estimates']['boundary_mass']:.3e})")
        app = d.get("applicability")
        if app:
            for name, st in app["theorems"].items():
                extra = f" (blocked by {st['blocking']})" if st["blocking"] else ""
                lines.append(f"- {name}: {st['status']}{extra}")
            lines.append(f"- selected theorem: {app['selected'] or 'none (no applicable theorem)'}")
        if d.get("checks"):
            lines += ["", "| condition | verdict |", "|---|---|"]
            lines += [f"| {k} | {v['verdict']} |" for k, v in sorted(d["checks"].items())]
        h = d.get("hille")
        if h:
            fmt = lambda v: "inconclusive" if v is None else ("yes" if v else "no")  # noqa: E731
            lines.append("")
            lines.append(f"- Hille (drift {h['drift']}): L0 solvable {fmt(h['L0_solvable'])}, "
                         f"L solvable {fmt(h['L_solvable'])}")
        lines.append("")
    return "\n".join(lines)


def render_report(results: Sequence, out_dir) -> dict:
    """Write ``report.json``, ``report.md`` and one ``<scenario>_curves.csv`` per experiment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs, written = [], []
    for r in sorted(results, key=lambda r: r.scenario if hasattr(r, "scenario") else r["scenario"]):
        if isinstance(r, ExperimentResult):
            docs.append(r.to_dict())
            cpath = out / f"{r.scenario}_curves.csv"
            _write_curves(cpath, r.curves())
            written.append(cpath.name)
        else:
            docs.append(_plain(r))
    dump_json({"results": docs}, out / "report.json")
    (out / "report.md").write_text(_markdown(docs), encoding="utf-8")
    return {"files": ["report.json", "report.md"] + written, "results": docs}


def collect_reports(directory) -> list:
    """Per-scenario result documents found under ``directory`` (``*/compare.json`` and ``*/check.json``)."""
    base = Path(directory)
    docs = {}
    for name in ("check.json", "compare.json"):
        for p in sorted(base.glob(f"*/{name}")):
            d = json.loads(p.read_text(encoding="utf-8"))
            docs.setdefault(d["scenario"], {}).update(d)
    return [docs[k] for k in sorted(docs)]


def run_many(fn, items: Sequence, threads: int = 1) -> list:
    """Map ``fn`` over ``items`` in a thread pool; results keep the input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def export_generators(s: Scenario, out_dir) -> list:
    out = Path(out_dir)
    paths = []
    for ext in s.extensions:
        p = out / f"generator_{ext}.coo"
        write_coo(p, assemble(s.coefficients, s.grid, ext))
        paths.append(p.name)
    return paths
