"""Command line interface: ``markovfp <command> [scenario ...] [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evolve as ev
from . import harness as hs
from .expr import EvaluationError, ExprSyntaxError
from .generator import AssemblyError, assemble
from .hille import hille_classify
from .problem import ScenarioError, write_field_csv

log = logging.getLogger("markovfp")


def _parse_box(text: str) -> tuple:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--box expects 'lo,hi', got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"--box needs lo < hi, got {text!r}")
    return lo, hi


def _parse_grid(text: str) -> tuple:
    try:
        n = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--grid expects N or N1,N2, got {text!r}") from None
    if any(k < 4 for k in n):
        raise argparse.ArgumentTypeError("--grid needs at least 4 cells per axis")
    return n


def _scenario(ref: str, args):
    s = hs.resolve_scenario(ref)
    if args.box is not None or args.grid is not None:
        d = s.grid.dim
        lo, hi = (s.grid.lo, s.grid.hi) if args.box is None else ((args.box[0],) * d, (args.box[1],) * d)
        n = None if args.grid is None else (args.grid * d if len(args.grid) == 1 else args.grid)
        s = s.with_box(lo, hi, n)
    if args.dt is not None:
        s = s.replace(dt=args.dt)
    return s.validate()


def _out_dir(args, name: str) -> Path:
    p = Path(args.out) / name
    p.mkdir(parents=True, exist_ok=True)
    return p


def _verdict_table(rows) -> str:
    rows = list(rows)
    if not rows:
        return ""
    w = max(len(r[0]) for r in rows)
    return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)


# ---------------------------------------------------------------- commands


def cmd_check(s, args) -> int:
    reports, applic, hv = hs.run_checks(s, seed=args.seed)
    doc = {"scenario": s.name, "grid": s.grid.ident(),
           "checks": {k: r.to_dict() for k, r in reports.items()},
           "applicability": applic, "hille": hv.to_dict() if hv else None}
    hs.dump_json(doc, _out_dir(args, s.name) / "check.json")
    rows = [(k, r.verdict) for k, r in reports.items()]
    rows += [(name, st["status"]) for name, st in applic["theorems"].items()]
    rows.append(("selected", applic["selected"] or "none"))
    print(f"[{s.name}]\n" + _verdict_table(rows))
    statuses = {st["status"] for st in applic["theorems"].values()}
    if applic["selected"]:
        return 0
    return 2 if statuses == {"not applicable"} else 3


def cmd_solve(s, args) -> int:
    out = _out_dir(args, s.name)
    nu = s.initial_measure()
    summary = {"scenario": s.name, "grid": s.grid.ident(), "dt": s.dt, "T": s.T, "extensions": {}}
    write_field_csv(out / "initial.csv", s.grid, nu.mass / s.grid.cell_volume)
    for ext in s.extensions:
        gen = assemble(s.coefficients, s.grid, ext)
        path = ev.solve_fpke(gen, nu, s.dt, s.T)
        hs.write_path_csv(out / f"path_{ext}.csv", path)
        write_field_csv(out / f"final_{ext}.csv", s.grid, path.masses[-1] / s.grid.cell_volume)
        summary["extensions"][ext] = {"final_mass": float(path.total_mass()[-1]),
                                      "boundary_mass_max": float(ev.boundary_mass(path).max())}
    summary["generators"] = hs.export_generators(s, out)
    hs.dump_json(summary, out / "solve.json")
    print(f"[{s.name}]\n" + _verdict_table(
        (ext, f"final mass {v['final_mass']:.12g}") for ext, v in summary["extensions"].items()))
    return 0


def cmd_verify(s, args) -> int:
    doc = hs.run_verification(s, seed=args.seed)
    hs.dump_json(doc, _out_dir(args, s.name) / "verify.json")
    verdicts, rows = [], []
    for ext, v in doc["extensions"].items():
        for key in ("submarkov", "membership"):
            verdicts.append(v[key]["verdict"])
            rows.append((f"{ext}.{key}", v[key]["verdict"]))
        rows.append((f"{ext}.max_duality", f"{max(v['duality']):.3e}"))
    print(f"[{s.name}]\n" + _verdict_table(rows))
    return hs.exit_code(verdicts)


def cmd_compare(s, args) -> int:
    res = hs.run_uniqueness_proxy(s, seed=args.seed)
    out = _out_dir(args, s.name)
    hs.dump_json(res.to_dict(), out / "compare.json")
    hs.render_report([res], out)
    p = res.proxy
    print(f"[{s.name}]\n" + _verdict_table([
        ("extension comparison", p.verdict),
        ("l1_difference", f"{res.l1_difference:.3e}"),
        ("boundary_mass", f"{res.boundary_max:.3e}"),
        ("selected theorem", res.applicability["selected"] or "none"),
    ]))
    return hs.exit_code([p.verdict])


def cmd_study(s, args) -> int:
    doc = hs.run_convergence_study(s)
    out = _out_dir(args, s.name)
    hs.dump_json(doc, out / "study.json")
    with open(out / "study.csv", "w", encoding="utf-8") as fh:
        fh.write("quantity,dt,n,value,ratio\n")
        for r in doc["rows"]:
            fh.write(",".join("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else str(r[k]))
                              for k in ("quantity", "dt", "n", "value", "ratio")) + "\n")
    rows = [(k, ", ".join(f"{m}={v:.3f}" if isinstance(v, float) else f"{m}={v}" for m, v in o.items()))
            for k, o in doc["orders"].items()]
    print(f"[{s.name}]\n" + _verdict_table(rows))
    return 0


def cmd_hille(args) -> int:
    v = hille_classify(args.drift, K=args.ladder)
    doc = v.to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        hs.dump_json(doc, out / "hille.json")
    fmt = {True: "yes", False: "no", None: "inconclusive"}
    summary = {k: doc[k] for k in ("drift", "I1", "I2", "L0_solvable", "L_solvable")}
    print(json.dumps(summary, sort_keys=True))
    header = "cutoff      " + "  ".join(f"{k:>14}" for k in sorted(v.traces))
    lines = [header]
    cut = next(iter(v.traces.values()))["cutoffs"]
    for i, c in enumerate(cut):
        vals = []
        for k in sorted(v.traces):
            li = v.traces[k]["log_I"]
            vals.append(f"{li[i]:>14.6g}" if i < len(li) else f"{'-':>14}")
        lines.append(f"{c:<12g}" + "  ".join(vals))
    print("log I along the ladder:\n" + "\n".join(lines))
    print(f"L0 solvable: {fmt[v.L0_solvable]}; L solvable: {fmt[v.L_solvable]}")
    return 3 if v.L0_solvable is None or v.L_solvable is None else 0


def cmd_report(args) -> int:
    docs = hs.collect_reports(args.directory)
    out = Path(args.out) if args.out_given else Path(args.directory)
    written = hs.render_report(docs, out)
    print("\n".join(str(out / f) for f in written["files"]))
    return 0


_SCENARIO_COMMANDS = {
    "check": (cmd_check, "hypothesis checkers and theorem applicability"),
    "solve": (cmd_solve, "evolve the initial measure; export paths, fields and generator matrices"),
    "verify": (cmd_verify, "sub-Markov, duality, weak residual and class membership checks"),
    "compare-extensions": (cmd_compare, "Neumann vs Dirichlet uniqueness proxy"),
    "study": (cmd_study, "convergence orders in dt and h"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dt", type=float, help="time step override")
    common.add_argument("--grid", type=_parse_grid, help="cells per axis, N or N1,N2")
    common.add_argument("--box", type=_parse_box, help="box 'lo,hi' applied to every axis")
    common.add_argument("--out", default=None, help="output directory (default: results)")
    common.add_argument("--threads", type=int, default=1, help="scenarios processed in parallel")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="markovfp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_fn, help_) in _SCENARIO_COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("scenarios", nargs="+", help="scenario file or catalog name")
    hp = sub.add_parser("hille", parents=[common], help="one-dimensional Hille solvability test")
    hp.add_argument("--drift", required=True, help="drift b(x1) as an expression")
    hp.add_argument("--ladder", type=int, default=16, help="largest cutoff exponent K (cutoffs 2^k)")
    rp = sub.add_parser("report", parents=[common], help="collect results under a directory")
    rp.add_argument("directory")
    sub.add_parser("catalog", help="list bundled scenarios")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "catalog":
            print("\n".join(hs.catalog_names()))
            return 0
        if args.command == "hille":
            return cmd_hille(args)
        args.out_given = args.out is not None
        if args.out is None:
            args.out = "results"
        if args.command == "report":
            return cmd_report(args)
        fn = _SCENARIO_COMMANDS[args.command][0]
        scenarios = [_scenario(ref, args) for ref in args.scenarios]
        codes = hs.run_many(lambda s: fn(s, args), scenarios, args.threads)
        return max(codes, key=lambda c: {0: 0, 3: 1, 2: 2}[c])
    except (ScenarioError, ExprSyntaxError, EvaluationError, AssemblyError, ev.SolverError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
