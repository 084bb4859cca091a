"""Numerical tests of the uniqueness hypotheses on a truncated box.

Integrability over ``R^d`` cannot be decided from samples.  ``L^p_loc``
conditions are tested by comparing two resolutions of the same quadrature,
and global conditions by comparing nested boxes.  Neither test is a proof,
which is what the ``inconclusive`` verdict is for.  Every report names the
box it was computed on.
"""
from __future__ import annotations

import logging
import math
from dataclasses import replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import expr as ex
from .generator import drift_expressions, factorize_sigma_field, log_density_gradient
from .problem import CoefficientSet, Grid, sample_field
from .reports import FAIL, INCONCLUSIVE, PASS, ConditionReport, worst

log = logging.getLogger(__name__)

__all__ = [
    "REFINE_RATIO", "TAIL_FRACTION", "default_balls", "check_H1", "check_H2", "check_H3", "check_H4",
    "check_H3_H4", "check_weighted_density", "default_radii",
    "check_A", "vmo_oscillation", "check_vmo", "check_lyapunov", "lyapunov_lhs",
    "check_path_growth", "check_lebris_lions", "check_znu_tail", "znu_functional",
    "check_growth_splitting", "check_logrho_lp", "theorem_applicability", "THEOREMS",
    "with_refinement", "run_all",
]

REFINE_RATIO = 1.5      # quadrature/sup ratio tolerated between two resolutions or boxes
TAIL_FRACTION = 1e-3    # share of an integral allowed outside the half box
H2_REFINE = 4           # refinement factor for Lipschitz estimates
MAX_PAIRS_ALL = 2000    # nodes below which all pairs are used


def _dvar(k: int) -> str:
    return f"x{k + 1}"


def _mid(grid: Grid) -> np.ndarray:
    return np.array([(a + b) / 2 for a, b in zip(grid.lo, grid.hi)])


def _half_width(grid: Grid) -> float:
    return min((b - a) / 2 for a, b in zip(grid.lo, grid.hi))


def default_balls(grid: Grid) -> list:
    """Centred ball of a quarter box plus one off-centre ball."""
    mid, w = _mid(grid), _half_width(grid)
    off = mid.copy()
    off[0] += w / 2
    return [(tuple(mid), w / 2), (tuple(off), w / 4)]


def _ball_mask(grid: Grid, center, radius) -> np.ndarray:
    return np.linalg.norm(grid.points() - np.asarray(center, float), axis=1) <= radius


def _box_mask(grid: Grid, fraction: float) -> np.ndarray:
    mid = _mid(grid)
    half = np.array([(b - a) / 2 * fraction for a, b in zip(grid.lo, grid.hi)])
    return np.all(np.abs(grid.points() - mid) <= half + 1e-12, axis=1)


def _pt(grid: Grid, idx: int) -> list:
    return [float(v) for v in grid.points()[idx]]


def _region(grid: Grid) -> str:
    box = " x ".join(f"[{a:g}, {b:g}]" for a, b in zip(grid.lo, grid.hi))
    return f"box {box}, n={list(grid.n)}"


def _kinked(exprs) -> bool:
    return any(ex.has_kinks(e) for e in exprs)


# ---------------------------------------------------------------- ellipticity / Lipschitz


def _vertices(grid: Grid) -> np.ndarray:
    axes = [np.linspace(a, b, m + 1) for a, b, m in zip(grid.lo, grid.hi, grid.n)]
    return np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)


def _matrix_at(coeffs: CoefficientSet, pts: np.ndarray) -> np.ndarray:
    a = coeffs.flux_diffusion()
    d = coeffs.dim
    coords = [pts[:, k] for k in range(d)]
    out = np.empty((len(pts), d, d))
    for i in range(d):
        for j in range(d):
            out[:, i, j] = np.broadcast_to(ex.evaluate_array(a[i][j], 0.0, coords), len(pts))
    return out


def check_H1(coeffs: CoefficientSet, grid: Grid, balls: Optional[Sequence] = None) -> ConditionReport:
    """Local strict ellipticity: ``gamma(U) I <= A <= M(U) I`` on each ball.

    Samples are the cell centres and cell vertices inside the ball.
    """
    balls = list(balls) if balls is not None else default_balls(grid)
    pts = np.concatenate([grid.points(), _vertices(grid)])
    lam = np.linalg.eigvalsh(_matrix_at(coeffs, pts))
    per, verdicts, witness = [], [], None
    for center, radius in balls:
        mask = np.linalg.norm(pts - np.asarray(center, float), axis=1) <= radius
        if not mask.any():
            per.append({"center": list(center), "radius": radius, "nodes": 0})
            verdicts.append(INCONCLUSIVE)
            continue
        idx = np.flatnonzero(mask)
        lo, hi = lam[idx, 0], lam[idx, -1]
        k = int(np.argmin(lo))
        gamma, M = float(lo[k]), float(hi.max())
        per.append({"center": list(center), "radius": radius, "nodes": int(idx.size),
                    "gamma": gamma, "M": M})
        if gamma > 0:
            verdicts.append(PASS)
        else:
            verdicts.append(FAIL)
            witness = witness or {"point": pts[idx[k]].tolist(), "lambda_min": gamma,
                                  "ball": [list(center), radius]}
    return ConditionReport("H1", worst(verdicts), estimates={"balls": per}, witness=witness,
                           region=_region(grid))


def _lipschitz(vals: np.ndarray, pts: np.ndarray, rng) -> tuple:
    """Largest ``|f(x)-f(y)| / |x-y|`` over sampled pairs; ``vals`` has shape (nodes, k)."""
    m = len(pts)
    if m < 2:
        return 0.0, None
    if m <= MAX_PAIRS_ALL:
        i, j = np.triu_indices(m, 1)
    else:
        # nearest neighbours along the sorted first axis plus random pairs
        order = np.lexsort(pts.T[::-1])
        i1, j1 = order[:-1], order[1:]
        r = rng.integers(0, m, size=(2, 50_000))
        keep = r[0] != r[1]
        i, j = np.concatenate([i1, r[0][keep]]), np.concatenate([j1, r[1][keep]])
    best, arg = 0.0, None
    for s in range(0, len(i), 500_000):
        ii, jj = i[s:s + 500_000], j[s:s + 500_000]
        dist = np.linalg.norm(pts[ii] - pts[jj], axis=1)
        ratio = np.abs(vals[ii] - vals[jj]).max(axis=1) / dist
        k = int(np.argmax(ratio))
        if ratio[k] > best:
            best, arg = float(ratio[k]), (int(ii[k]), int(jj[k]))
    return best, arg


def _lipschitz_on(coeffs: CoefficientSet, grid: Grid, mask_fn: Callable, seed: int) -> tuple:
    A = coeffs.sample_matrix(grid).reshape(grid.size, -1)
    mask = mask_fn(grid)
    pts = grid.points()[mask]
    lam, arg = _lipschitz(A[mask], pts, np.random.default_rng(seed))
    pair = None if arg is None else [pts[arg[0]].tolist(), pts[arg[1]].tolist()]
    return lam, pair


def check_H2(coeffs: CoefficientSet, grid: Grid, balls: Optional[Sequence] = None,
             seed: int = 0) -> ConditionReport:
    """Local Lipschitz constant of ``A``, stable between the grid and a 4x refinement."""
    balls = list(balls) if balls is not None else default_balls(grid)
    fine = grid.refine(H2_REFINE)
    per, verdicts, witness = [], [], None
    for center, radius in balls:
        fn = lambda g: _ball_mask(g, center, radius)
        lam_c, _ = _lipschitz_on(coeffs, grid, fn, seed)
        lam_f, pair = _lipschitz_on(coeffs, fine, fn, seed)
        ratio = lam_f / lam_c if lam_c > 0 else (1.0 if lam_f == 0 else math.inf)
        per.append({"center": list(center), "radius": radius, "Lambda": lam_f,
                    "Lambda_coarse": lam_c, "refinement_ratio": ratio})
        if math.isfinite(lam_f) and ratio <= REFINE_RATIO:
            verdicts.append(PASS)
        else:
            verdicts.append(FAIL)
            witness = witness or {"pair": pair, "Lambda_fine": lam_f, "Lambda_coarse": lam_c,
                                  "ball": [list(center), radius]}
    return ConditionReport("H2", worst(verdicts), estimates={"balls": per}, witness=witness,
                           region=_region(grid), note=f"refinement factor {H2_REFINE}")


def _sup_stable(vals: np.ndarray, grid: Grid) -> tuple:
    """``sup|f|`` on the box and on the half box, and their ratio."""
    full = float(np.max(np.abs(vals), initial=0.0))
    half = float(np.max(np.abs(vals[_box_mask(grid, 0.5)]), initial=0.0))
    ratio = full / half if half > 0 else (1.0 if full == 0 else math.inf)
    return full, half, ratio


def _combine(cid: str, items: dict, estimates: dict, grid: Grid, **kw) -> ConditionReport:
    verdict = worst(r.verdict for r in items.values())
    witness = None
    if verdict == FAIL:
        name = next(n for n, r in items.items() if r.verdict == FAIL)
        witness = {"item": name, **items[name].witness}
    return ConditionReport(cid, verdict, estimates=estimates, witness=witness, items=items,
                           region=_region(grid), **kw)


def check_H3(coeffs: CoefficientSet, grid: Grid, seed: int = 0, effective: bool = True) -> ConditionReport:
    """Global ellipticity and Lipschitz bounds of ``A``.

    Bounds over ``R^d`` are probed on the box and its half; growth beyond the
    refinement ratio between the two is read as unboundedness.  With
    ``effective=False`` the raw matrix of the weighted form is tested.
    """
    A = coeffs.sample_matrix(grid, effective)
    lam = np.linalg.eigvalsh(A)
    half = _box_mask(grid, 0.5)
    gamma, M = float(lam[:, 0].min()), float(lam[:, -1].max())
    M_half = float(lam[half, -1].max())
    g_half = float(lam[half, 0].min())
    items = {}
    ok_gamma = gamma > 0 and g_half / gamma <= REFINE_RATIO
    ok_M = M / M_half <= REFINE_RATIO
    arg_lo, arg_hi = int(np.argmin(lam[:, 0])), int(np.argmax(lam[:, -1]))
    w = None
    if not ok_gamma:
        w = {"point": _pt(grid, arg_lo), "lambda_min": gamma, "lambda_min_half_box": g_half}
    elif not ok_M:
        w = {"point": _pt(grid, arg_hi), "M": M, "M_half_box": M_half}
    items["ellipticity"] = ConditionReport(
        "H3-ellipticity", PASS if ok_gamma and ok_M else FAIL,
        estimates={"gamma": gamma, "M": M, "gamma_half_box": g_half, "M_half_box": M_half},
        witness=w, region=_region(grid))

    view = coeffs if effective else replace(coeffs, form="divergence")
    fn_full = lambda g: np.ones(g.size, dtype=bool)
    fn_half = lambda g: _box_mask(g, 0.5)
    lam_f, pair = _lipschitz_on(view, grid, fn_full, seed)
    lam_h, _ = _lipschitz_on(view, grid, fn_half, seed)
    lam_r, _ = _lipschitz_on(view, grid.refine(2), fn_full, seed)
    ok = (lam_f <= REFINE_RATIO * max(lam_h, 1e-300) or lam_f == 0) and \
        (lam_r <= REFINE_RATIO * max(lam_f, 1e-300) or lam_r == 0)
    items["lipschitz"] = ConditionReport(
        "H3-lipschitz", PASS if ok else FAIL,
        estimates={"Lambda": lam_f, "Lambda_half_box": lam_h, "Lambda_refined": lam_r},
        witness=None if ok else {"pair": pair, "Lambda": lam_f, "Lambda_half_box": lam_h},
        region=_region(grid), note="coefficients are time independent; t-Lipschitz constant is 0")
    return _combine("H3", items, {"gamma": gamma, "M": M, "Lambda": lam_f}, grid)


def check_H4(coeffs: CoefficientSet, grid: Grid) -> ConditionReport:
    """``b in L^inf``, probed on the box and its half."""
    b_exprs = drift_expressions(coeffs, use_given=True)
    bnorm = np.sqrt(sum(sample_field(e, grid) ** 2 for e in b_exprs))
    full, hb, ratio = _sup_stable(bnorm, grid)
    ok = math.isfinite(full) and ratio <= REFINE_RATIO
    return ConditionReport(
        "H4", PASS if ok else FAIL, estimates={"sup_b": full, "sup_b_half_box": hb},
        witness=None if ok else {"point": _pt(grid, int(np.argmax(bnorm))), "b_norm": full,
                                 "sup_half_box": hb}, region=_region(grid))


def check_H3_H4(coeffs: CoefficientSet, grid: Grid, seed: int = 0) -> ConditionReport:
    """Global bounds: ``gamma``, ``M``, Lipschitz constant of ``A`` and ``sup |b|``."""
    h3 = check_H3(coeffs, grid, seed)
    h4 = check_H4(coeffs, grid)
    items = {**h3.items, "H4": h4}
    return _combine("H3_H4", items, {**h3.estimates, "sup_b": h4.estimates["sup_b"]}, grid)


# ---------------------------------------------------------------- integrability helpers


def _local_integral(expr_fn: Callable[[Grid], np.ndarray], grid: Grid, fraction: float = 0.5) -> tuple:
    """Midpoint quadrature over the central sub-box at ``grid`` and at twice its resolution."""
    vals = []
    for g in (grid, grid.refine(2)):
        mask = _box_mask(g, fraction)
        vals.append(float(np.sum(expr_fn(g)[mask]) * g.cell_volume))
    return vals[0], vals[1]


def _refinement_report(cid: str, expr_fn, grid: Grid, note: str = "", kinked: bool = False) -> ConditionReport:
    coarse, fine = _local_integral(expr_fn, grid)
    if not (math.isfinite(coarse) and math.isfinite(fine)):
        return ConditionReport(cid, INCONCLUSIVE, estimates={"coarse": coarse, "fine": fine},
                               region="half box", note="non-finite quadrature")
    ratio = fine / coarse if coarse > 0 else (1.0 if fine == 0 else math.inf)
    stable = 1 / REFINE_RATIO <= ratio <= REFINE_RATIO
    verdict = PASS if stable and not kinked else INCONCLUSIVE
    if kinked and stable:
        note = (note + "; " if note else "") + "symbolic derivative has kinks"
    return ConditionReport(cid, verdict, estimates={"coarse": coarse, "fine": fine, "ratio": ratio},
                           region="half box, n and 2n", note=note)


def _tail_fraction(vals: np.ndarray, weight: np.ndarray, grid: Grid) -> tuple:
    full = float(np.sum(vals * weight))
    half = float(np.sum((vals * weight)[_box_mask(grid, 0.5)]))
    frac = (full - half) / full if full > 0 else 0.0
    return full, half, frac


def _l1_linf(cid: str, vals: np.ndarray, weight: np.ndarray, grid: Grid) -> ConditionReport:
    """``f in L^1(weight dx) + L^inf`` probed by three increasingly permissive tests."""
    vals = np.abs(vals)
    sup, sup_half, ratio = _sup_stable(vals, grid)
    est = {"sup": sup, "sup_half_box": sup_half}
    if math.isfinite(sup) and ratio <= REFINE_RATIO:
        return ConditionReport(cid, PASS, estimates={**est, "split": "bounded"}, region=_region(grid))
    wv = weight * grid.cell_volume
    full, half, frac = _tail_fraction(vals, wv, grid)
    est.update(integral=full, integral_half_box=half, tail_fraction=frac)
    if math.isfinite(full) and frac <= TAIL_FRACTION:
        return ConditionReport(cid, PASS, estimates={**est, "split": "integrable"}, region=_region(grid))
    K = float(np.max(vals[_box_mask(grid, 0.25)], initial=0.0))
    excess = np.maximum(vals - K, 0.0)
    full, half, frac = _tail_fraction(excess, wv, grid)
    est.update(K=K, excess_integral=full, excess_tail_fraction=frac)
    if math.isfinite(full) and frac <= TAIL_FRACTION:
        return ConditionReport(cid, PASS, estimates={**est, "split": "K + integrable excess"},
                               region=_region(grid))
    return ConditionReport(cid, INCONCLUSIVE, estimates=est, region=_region(grid),
                           note="neither bounded nor integrable tail on the box")


def check_A(coeffs: CoefficientSet, grid: Grid) -> ConditionReport:
    """Structural assumption: PSD symmetric ``A``, ``c <= 0``, ``rho > 0`` and local integrability."""
    items = {}
    pts = grid.points()
    A = coeffs.sample_matrix(grid)
    asym = np.abs(A - np.swapaxes(A, 1, 2)).max(axis=(1, 2))
    lam = np.linalg.eigvalsh(A)[:, 0]
    scale = np.maximum(1.0, np.abs(A).max(axis=(1, 2)))
    bad = (asym > 1e-12) | (lam < -1e-12 * scale)
    items["psd"] = ConditionReport(
        "A-psd", FAIL if bad.any() else PASS, estimates={"min_eigenvalue": float(lam.min())},
        witness={"point": pts[np.argmax(bad)].tolist(), "lambda_min": float(lam[np.argmax(bad)])}
        if bad.any() else None, region=_region(grid))
    c = sample_field(coeffs.c, grid)
    items["c_sign"] = ConditionReport(
        "A-c", FAIL if (c > 0).any() else PASS, estimates={"max_c": float(c.max())},
        witness={"point": pts[np.argmax(c)].tolist(), "c": float(c.max())} if (c > 0).any() else None,
        region=_region(grid))
    rho = sample_field(coeffs.rho, grid)
    items["rho_positive"] = ConditionReport(
        "A-rho", FAIL if (rho <= 0).any() else PASS, estimates={"min_rho": float(rho.min())},
        witness={"point": pts[np.argmin(rho)].tolist(), "rho": float(rho.min())}
        if (rho <= 0).any() else None, region=_region(grid))

    a = coeffs.flux_diffusion()
    d = coeffs.dim
    da = [ex.differentiate(a[i][j], _dvar(i)) for i in range(d) for j in range(d)]
    lg = log_density_gradient(coeffs)
    cross = [ex._mul(a[i][j], lg[i]) for i in range(d) for j in range(d)]

    def sq_sum(exprs):
        return lambda g: sum(sample_field(e, g) ** 2 for e in exprs) * sample_field(coeffs.rho, g)

    items["grad_a"] = _refinement_report("A-grad-a", sq_sum(da), grid, kinked=_kinked(da))
    items["c_square"] = _refinement_report("A-c-square", sq_sum([coeffs.c]), grid)
    items["a_logrho"] = _refinement_report("A-a-logrho", sq_sum(cross), grid, kinked=_kinked(cross))
    probe = tuple([1.0] * d)
    witness_field = {f"x{i + 1}": ex.to_string(e) for i, e in enumerate(lg)}
    try:
        probe_vals = [ex.evaluate(e, (0.0, probe)) for e in lg]
    except ex.EvaluationError:
        probe_vals = None
    verdict = worst(r.verdict for r in items.values())
    witness = None
    if verdict == FAIL:
        name = next(n for n, r in sorted(items.items()) if r.verdict == FAIL)
        witness = {"item": name, **items[name].witness}
    return ConditionReport("A", verdict, items=items, witness=witness, region=_region(grid),
                           estimates={"log_density_gradient": witness_field,
                                      "log_density_gradient_at_ones": probe_vals})


# ---------------------------------------------------------------- VMO


def _mean_abs_pair_diff(v: np.ndarray) -> float:
    """``m^-2 sum_{y,z} |v_y - v_z|`` from sorted gaps (exactly 0 for constants)."""
    m = v.size
    if m < 2:
        return 0.0
    s = np.sort(v)
    k = np.arange(1, m)
    return float(2.0 * np.sum(np.diff(s) * k * (m - k)) / m ** 2)


def vmo_oscillation(g, R_list: Sequence[float], grid: Grid, max_centers: int = 400,
                    seed: int = 0) -> list:
    """``[(R, O(g, R))]`` where ``O`` is the sup over centres and radii ``r <= R`` of the mean oscillation.

    ``g`` is an expression or an array of node values; balls are clipped to the box.
    """
    vals = g if isinstance(g, np.ndarray) else sample_field(g, grid)
    pts = grid.points()
    rng = np.random.default_rng(seed)
    centers = np.arange(grid.size)
    if centers.size > max_centers:
        centers = np.sort(rng.choice(centers, size=max_centers, replace=False))
    radii = sorted(float(r) for r in R_list)
    osc_r = {}
    for r in radii:
        best = 0.0
        for ci in centers:
            mask = np.linalg.norm(pts - pts[ci], axis=1) <= r
            best = max(best, _mean_abs_pair_diff(vals[mask]))
        osc_r[r] = best
    out, running = [], 0.0
    for r in radii:
        running = max(running, osc_r[r])
        out.append((r, running))
    return sorted(out, key=lambda p: -p[0])


def default_radii(grid: Grid, count: int = 6) -> list:
    hmax = max(grid.h)
    R_max = _half_width(grid) / 2
    R_min = 2.0 * hmax
    return [float(r) for r in np.geomspace(R_max, R_min, count)]


def check_vmo(coeffs: CoefficientSet, grid: Grid, R_list: Optional[Sequence[float]] = None,
              seed: int = 0) -> ConditionReport:
    """VMO plausibility of every ``a^ij``: oscillation must shrink to a quarter from the largest to the smallest radius."""
    R_list = list(R_list) if R_list is not None else default_radii(grid)
    per, verdicts, witness = {}, [], None
    a = coeffs.flux_diffusion()
    for i in range(coeffs.dim):
        for j in range(i, coeffs.dim):
            curve = vmo_oscillation(a[i][j], R_list, grid, seed=seed)
            o_max, o_min = curve[0][1], curve[-1][1]
            ok = o_max == 0 or o_min <= 0.25 * o_max
            per[f"a{i + 1}{j + 1}"] = curve
            verdicts.append(PASS if ok else FAIL)
            if not ok and witness is None:
                witness = {"entry": f"a{i + 1}{j + 1}", "R_min": curve[-1][0], "O_R_min": o_min,
                           "O_R_max": o_max}
    return ConditionReport("VMO", worst(verdicts), estimates={"oscillation": per}, witness=witness,
                           region=_region(grid), note="plausibility test, not a certificate")


# ---------------------------------------------------------------- Lyapunov


def lyapunov_lhs(coeffs: CoefficientSet, grid: Grid) -> tuple:
    """Left side of the logarithmic Lyapunov inequality and its basis ``(|x|^2+1)(1+ln(|x|^2+1))``."""
    A = coeffs.sample_matrix(grid)
    x = grid.points()
    b = np.stack([sample_field(e, grid) for e in drift_expressions(coeffs, use_given=True)], -1)
    c = sample_field(coeffs.c, grid)
    r2 = (x ** 2).sum(-1)
    q = r2 + 1.0
    lhs = (2.0 * np.trace(A, axis1=1, axis2=2) - 4.0 * np.einsum("ni,nij,nj->n", x, A, x) / q
           + c * q * np.log(q) + 2.0 * (b * x).sum(-1))
    return lhs, q * (1.0 + np.log(q)), np.sqrt(r2)


def _required_C(lhs, basis, mask, C_grid) -> tuple:
    """Smallest ``C`` on the sweep with ``lhs <= C basis`` on ``mask``, or ``None``."""
    if not mask.any():
        return None, None
    need = lhs[mask] / basis[mask]
    worst_idx = int(np.argmax(need))
    feasible = C_grid[C_grid >= need[worst_idx]]
    return (float(feasible[0]) if feasible.size else None), int(np.flatnonzero(mask)[worst_idx])


def check_lyapunov(coeffs: CoefficientSet, grid: Grid, C_range: tuple = (1e-3, 1e6),
                   n_C: int = 200) -> ConditionReport:
    """Lyapunov condition with ``V = ln(|x|^2 + 1)`` on nodes with ``|x| > 1``.

    A constant must exist on the box, and the constant needed must not grow by
    more than the refinement ratio from the half box to the full box.
    """
    C_grid = np.geomspace(C_range[0], C_range[1], n_C)
    lhs, basis, r = lyapunov_lhs(coeffs, grid)
    outer = r > 1.0
    C_full, arg_full = _required_C(lhs, basis, outer, C_grid)
    C_half, _ = _required_C(lhs, basis, outer & _box_mask(grid, 0.5), C_grid)
    est = {"C": C_full, "C_half_box": C_half, "C_range": list(C_range), "points": int(outer.sum())}
    if arg_full is None:
        return ConditionReport("LYAP", INCONCLUSIVE, estimates=est, region=_region(grid),
                               note="no nodes with |x| > 1")
    witness = {"point": _pt(grid, arg_full), "lhs": float(lhs[arg_full]),
               "ratio": float(lhs[arg_full] / basis[arg_full])}
    if C_full is None:
        return ConditionReport("LYAP", FAIL, estimates=est, witness=witness, region=_region(grid),
                               note="no constant in the sweep range")
    if C_half is not None and C_full > REFINE_RATIO * C_half:
        return ConditionReport("LYAP", FAIL, estimates=est, witness=witness, region=_region(grid),
                               note="required constant grows with the box")
    return ConditionReport("LYAP", PASS, estimates=est, region=_region(grid))


# ---------------------------------------------------------------- growth along a path


def check_path_growth(coeffs: CoefficientSet, path, grid: Optional[Grid] = None) -> ConditionReport:
    """``|a|/(1+|x|^2) + |b|/(1+|x|)`` integrated against the path plus local ``L^p`` of ``b`` and ``c``."""
    from .evolve import trapezoid_cumulative

    grid = grid or path.grid
    A = coeffs.sample_matrix(grid)
    b = np.stack([sample_field(e, grid) for e in drift_expressions(coeffs, use_given=True)], -1)
    r = grid.radius()
    w = np.abs(A).sum(axis=(1, 2)) / (1 + r ** 2) + np.abs(b).sum(-1) / (1 + r)
    dt = path.dt if len(path.times) > 1 else 0.0
    full = float(trapezoid_cumulative(path.masses @ w, dt)[-1]) if dt else 0.0
    half_mask = _box_mask(grid, 0.5)
    half = float(trapezoid_cumulative(path.masses[:, half_mask] @ w[half_mask], dt)[-1]) if dt else 0.0
    frac = (full - half) / full if full > 0 else 0.0
    items = {}
    if not math.isfinite(full):
        items["path_integral"] = ConditionReport("PATHGROWTH-integral", FAIL, estimates={"value": full},
                                                 witness={"value": full})
    elif frac <= TAIL_FRACTION:
        items["path_integral"] = ConditionReport("PATHGROWTH-integral", PASS,
                                                 estimates={"value": full, "tail_fraction": frac})
    else:
        items["path_integral"] = ConditionReport(
            "PATHGROWTH-integral", INCONCLUSIVE, estimates={"value": full, "tail_fraction": frac},
            note="integral not settled inside the half box")
    p = grid.dim + 3
    b_exprs = drift_expressions(coeffs, use_given=True)
    items["b_Lp_loc"] = _refinement_report(
        "PATHGROWTH-b-Lp", lambda g: sum(np.abs(sample_field(e, g)) ** p for e in b_exprs), grid,
        note=f"p={p}", kinked=_kinked(b_exprs))
    items["c_Lp2_loc"] = _refinement_report(
        "PATHGROWTH-c-Lp", lambda g: np.abs(sample_field(coeffs.c, g)) ** (p / 2), grid, note=f"p/2={p / 2}")
    verdict = worst(r_.verdict for r_ in items.values())
    witness = {"item": "path_integral", "value": full} if verdict == FAIL else None
    return ConditionReport("PATHGROWTH", verdict, estimates={"value": full, "tail_fraction": frac},
                           items=items, witness=witness, region=_region(grid))


# ---------------------------------------------------------------- LeBris-Lions


def check_lebris_lions(coeffs: CoefficientSet, grid: Grid) -> ConditionReport:
    """``beta = b - div A``: bounded divergence and ``L^1 + L^inf`` weighted norms of ``beta`` and ``sigma``."""
    d = coeffs.dim
    a = coeffs.flux_diffusion()
    b = drift_expressions(coeffs, use_given=True)
    beta = [ex._sub(b[i], ex.Num(0.0)) for i in range(d)]
    for i in range(d):
        for j in range(d):
            beta[i] = ex._sub(beta[i], ex.differentiate(a[i][j], _dvar(j)))
    div = ex.Num(0.0)
    for i in range(d):
        div = ex._add(div, ex.differentiate(beta[i], _dvar(i)))
    r = grid.radius()
    items = {}
    divv = sample_field(div, grid)
    full, hb, ratio = _sup_stable(divv, grid)
    ok = math.isfinite(full) and ratio <= REFINE_RATIO
    items["div_beta"] = ConditionReport(
        "LBL-div-beta", PASS if ok else FAIL, estimates={"sup": full, "sup_half_box": hb,
                                                         "expression": ex.to_string(div)},
        witness=None if ok else {"point": _pt(grid, int(np.argmax(np.abs(divv)))), "div_beta": full},
        region=_region(grid))
    bn = np.sqrt(sum(sample_field(e, grid) ** 2 for e in beta))
    ones = np.ones(grid.size)
    items["beta_growth"] = _l1_linf("LBL-beta", bn / (1 + r), ones, grid)
    if coeffs.sigma is not None:
        S = np.stack([[sample_field(coeffs.sigma[i][j], grid) for j in range(d)] for i in range(d)])
        S = np.moveaxis(S, -1, 0)
        src = "given"
    else:
        S = factorize_sigma_field(coeffs.sample_matrix(grid))
        src = "factorised"
    sn = np.abs(S).max(axis=(1, 2))
    items["sigma_growth"] = replace(_l1_linf("LBL-sigma", sn / (1 + r), ones, grid), note=f"sigma {src}")
    verdict = worst(x.verdict for x in items.values())
    witness = None
    if verdict == FAIL:
        name = next(n for n, x in sorted(items.items()) if x.verdict == FAIL)
        witness = {"item": name, **items[name].witness}
    return ConditionReport("LBL", verdict, items=items, witness=witness, region=_region(grid),
                           estimates={"beta": [ex.to_string(e) for e in beta]})


# ---------------------------------------------------------------- tail functional


def znu_functional(rho_t: np.ndarray, z: np.ndarray, grid: Grid, N_list: Sequence[float],
                   times: Optional[np.ndarray] = None) -> list:
    """Annulus integrals ``int_0^T int_{N<=|x|<=2N} [...] dx dt`` clipped to the box.

    ``z`` is one density (then ``times`` gives the horizon as ``[0, T]``) or a
    stack of densities, one row per stamp.
    """
    from .evolve import trapezoid_cumulative

    z = np.atleast_2d(np.asarray(z, dtype=float))
    rho_t = np.asarray(rho_t, dtype=float)
    r = grid.radius()
    if times is None:
        times = np.array([0.0, 1.0])
    if z.shape[0] == 1:
        z = np.repeat(z, len(times), axis=0)
    dt = float(times[1] - times[0])
    base = (np.sqrt(rho_t) + rho_t) / (1 + r)
    quad = rho_t ** 2 / (1 + r ** 2)
    out = []
    for N in N_list:
        mask = (r >= N) & (r <= 2 * N)
        per_t = (z[:, mask] * base[mask] + z[:, mask] ** 2 * quad[mask]).sum(axis=1) * grid.cell_volume
        out.append(float(trapezoid_cumulative(per_t, dt)[-1]))
    return out


def check_znu_tail(rho_t, z, grid: Grid, N_list: Sequence[float], times=None) -> ConditionReport:
    """Pass when the annulus functional decreases strictly to a tenth of its first value."""
    rho_v = rho_t if isinstance(rho_t, np.ndarray) else sample_field(rho_t, grid)
    z_v = z if isinstance(z, np.ndarray) else sample_field(z, grid)
    vals = znu_functional(rho_v, z_v, grid, N_list, times)
    est = {"N": list(N_list), "values": vals}
    if all(v == 0 for v in vals):
        return ConditionReport("ZNU-tail", PASS, estimates=est, region=_region(grid))
    dec = all(b < a for a, b in zip(vals, vals[1:]))
    if dec and vals[-1] <= 0.1 * vals[0]:
        return ConditionReport("ZNU-tail", PASS, estimates=est, region=_region(grid))
    k = next((i + 1 for i, (a, b) in enumerate(zip(vals, vals[1:])) if b >= a), len(vals) - 1)
    return ConditionReport("ZNU-tail", FAIL, estimates=est, region=_region(grid),
                           witness={"N": N_list[k], "value": vals[k], "previous": vals[k - 1]})


# ---------------------------------------------------------------- theorem-level conditions


def check_growth_splitting(coeffs: CoefficientSet, grid: Grid, weighted_growth: bool) -> ConditionReport:
    """``L^1(rho dx) + L^inf`` membership of the coefficient combinations in the global hypotheses.

    ``weighted_growth=False``: ``a``, ``d_i a^ij + a^ij rho^{-1/2} d_i rho^{1/2}`` and ``c``.
    ``weighted_growth=True``: ``|a|/(1+|x|^2) + |d_i a^ij + ...|/(1+|x|)``.
    """
    d = coeffs.dim
    a = coeffs.flux_diffusion()
    lg = log_density_gradient(coeffs)
    rho = sample_field(coeffs.rho, grid)
    r = grid.radius()
    amax = np.max(np.abs(coeffs.sample_matrix(grid)).reshape(grid.size, -1), axis=1)
    comb = np.zeros(grid.size)
    for j in range(d):
        e = ex.Num(0.0)
        for i in range(d):
            e = ex._add(e, ex._add(ex.differentiate(a[i][j], _dvar(i)), ex._mul(a[i][j], lg[i])))
        comb = np.maximum(comb, np.abs(sample_field(e, grid)))
    if weighted_growth:
        rep = _l1_linf("GROWTH-weighted", amax / (1 + r ** 2) + comb / (1 + r), rho, grid)
        return replace(rep, id="GROWTH")
    items = {"a": _l1_linf("L1LINF-a", amax, rho, grid),
             "drift_part": _l1_linf("L1LINF-drift", comb, rho, grid),
             "c": _l1_linf("L1LINF-c", sample_field(coeffs.c, grid), rho, grid)}
    return ConditionReport("L1LINF", worst(x.verdict for x in items.values()), items=items,
                           region=_region(grid))


def check_logrho_lp(coeffs: CoefficientSet, grid: Grid) -> ConditionReport:
    """``rho^{-1/2} d_i rho^{1/2} in L^p_loc`` with ``p = d + 3 > d + 2``."""
    p = grid.dim + 3
    lg = log_density_gradient(coeffs)
    rep = _refinement_report("LOGRHO-Lp", lambda g: sum(np.abs(sample_field(e, g)) ** p for e in lg),
                             grid, note=f"p={p}", kinked=_kinked(lg))
    return rep


def check_weighted_density(coeffs: CoefficientSet, grid: Grid) -> ConditionReport:
    """Density hypotheses of the weighted degenerate operator: ``rho in L^1 cap L^3``, bounded ``grad sqrt(rho)``."""
    rho = sample_field(coeffs.rho, grid)
    vol = grid.cell_volume
    items = {}
    for p in (1, 3):
        full, half, frac = _tail_fraction(rho ** p, np.full(grid.size, vol), grid)
        items[f"L{p}"] = ConditionReport(f"RHO-L{p}", PASS if frac <= TAIL_FRACTION else INCONCLUSIVE,
                                         estimates={"integral": full, "tail_fraction": frac})
    sq = ex.Call("sqrt", (coeffs.rho,))
    g = np.sqrt(sum(sample_field(ex.differentiate(sq, _dvar(k)), grid) ** 2 for k in range(grid.dim)))
    full, hb, ratio = _sup_stable(g, grid)
    ok = math.isfinite(full) and ratio <= REFINE_RATIO
    items["grad_sqrt_rho"] = ConditionReport(
        "RHO-grad", PASS if ok else FAIL, estimates={"sup": full, "sup_half_box": hb},
        witness=None if ok else {"point": _pt(grid, int(np.argmax(g))), "value": full})
    verdict = worst(x.verdict for x in items.values())
    witness = {"item": "grad_sqrt_rho", **items["grad_sqrt_rho"].witness} if verdict == FAIL else None
    return ConditionReport("RHO", verdict, items=items, witness=witness, region=_region(grid))


def _structural(coeffs: CoefficientSet) -> dict:
    c0 = ex.constant_value(coeffs.c)
    r0 = ex.constant_value(coeffs.rho)
    return {"c_zero": c0 == 0.0, "rho_one": r0 == 1.0, "weighted_form": coeffs.form == "weighted",
            "divergence_form": coeffs.form == "divergence"}


# theorem -> (structural flags, report ids), tried in this order
THEOREMS = {
    "degenerate_weighted": (("weighted_form",), ("H3", "RHO")),
    "lyapunov": (("c_zero", "divergence_form"), ("A", "H1", "H2", "LOGRHO-Lp", "LYAP")),
    "lipschitz": (("c_zero", "divergence_form"), ("A", "H1", "H2", "LOGRHO-Lp", "GROWTH")),
    "vmo": (("divergence_form",), ("A", "H1", "VMO", "L1LINF")),
    "lebris_lions": (("rho_one", "c_zero", "divergence_form"), ("LBL",)),
}


def theorem_applicability(reports: dict, coeffs: CoefficientSet) -> dict:
    """Per theorem: ``applicable`` / ``not applicable`` / ``inconclusive`` with the blocking condition."""
    flags = _structural(coeffs)
    out = {}
    for name, (needs, ids) in THEOREMS.items():
        missing = [f for f in needs if not flags[f]]
        if missing:
            out[name] = {"status": "not applicable", "blocking": missing[0]}
            continue
        failing = [i for i in ids if i in reports and reports[i].verdict == FAIL]
        unknown = [i for i in ids if i not in reports or reports[i].verdict == INCONCLUSIVE]
        if failing:
            out[name] = {"status": "not applicable", "blocking": failing[0]}
        elif unknown:
            out[name] = {"status": "inconclusive", "blocking": unknown[0]}
        else:
            out[name] = {"status": "applicable", "blocking": None}
    selected = next((n for n in THEOREMS if out[n]["status"] == "applicable"), None)
    return {"theorems": out, "selected": selected}


def with_refinement(checker: Callable[..., ConditionReport], coeffs: CoefficientSet, grid: Grid,
                    **kw) -> ConditionReport:
    """Run ``checker`` on ``grid`` and on its 2x refinement; a verdict flip is logged with both witnesses."""
    coarse = checker(coeffs, grid, **kw)
    fine = checker(coeffs, grid.refine(2), **kw)
    if coarse.verdict != fine.verdict:
        log.warning("%s flips %s -> %s under refinement; coarse witness %s, fine witness %s",
                    coarse.id, coarse.verdict, fine.verdict, coarse.witness, fine.witness)
        note = f"verdict changed under refinement ({coarse.verdict} -> {fine.verdict})"
        return replace(fine, note=(fine.note + "; " if fine.note else "") + note,
                       items={**fine.items, "coarse": coarse})
    return fine


def run_all(coeffs: CoefficientSet, grid: Grid, seed: int = 0) -> dict:
    """Checker reports keyed by condition id (order fixed by id)."""
    reports = {
        "A": check_A(coeffs, grid),
        "H1": check_H1(coeffs, grid),
        "H2": check_H2(coeffs, grid, seed=seed),
        "H3_H4": check_H3_H4(coeffs, grid, seed=seed),
        "VMO": check_vmo(coeffs, grid, seed=seed),
        "LYAP": check_lyapunov(coeffs, grid),
        "LOGRHO-Lp": check_logrho_lp(coeffs, grid),
        "GROWTH": check_growth_splitting(coeffs, grid, weighted_growth=True),
        "L1LINF": check_growth_splitting(coeffs, grid, weighted_growth=False),
        "LBL": check_lebris_lions(coeffs, grid),
    }
    if coeffs.form == "weighted":
        reports["H3"] = check_H3(coeffs, grid, seed=seed, effective=False)
        reports["RHO"] = check_weighted_density(coeffs, grid)
    return dict(sorted(reports.items()))
