"""Semigroup stepping, FPKE solution paths and the identities they must satisfy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import expr as ex
from .generator import GeneratorMatrix, drift_expressions, operator_expression
from .problem import CoefficientSet, DiscreteMeasure, Grid, sample_field
from .reports import FAIL, PASS, ConditionReport, worst

__all__ = [
    "SolverError", "Stepper", "SolutionPath", "TestFunctionPair", "step_semigroup",
    "solve_fpke", "solve_fpke_pair", "verify_duality", "duality_residuals", "weak_residual",
    "weak_defect", "reference_residual", "default_battery", "check_submarkov", "check_sp_membership", "mass_balance_killing",
    "convex_midpoint_compare", "boundary_mass", "trapezoid_cumulative",
]

SCHEMES = ("backward_euler", "crank_nicolson")
SOLVERS = ("direct", "lu", "cg")
_MAX_BAND = 512   # wider bands go to the sparse LU


class SolverError(RuntimeError):
    pass


def trapezoid_cumulative(values: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoid integral on a uniform stamp grid, starting at 0."""
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    if len(values) > 1:
        out[1:] = np.cumsum(0.5 * dt * (values[1:] + values[:-1]), axis=0)
    return out


class Stepper:
    """Factorised one-step map ``u -> (I - theta dt L)^{-1} (I + (1-theta) dt L) u``.

    ``theta = 1`` is backward Euler (positivity preserving on M-matrices);
    ``theta = 1/2`` is Crank-Nicolson, which is second order but may produce
    small negative values when ``dt * |L|`` is large.
    """

    def __init__(self, gen: GeneratorMatrix, dt: float, scheme: str = "backward_euler",
                 solver: str = "direct", tol: float = 1e-12, maxiter: int = 10_000):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; use one of {SCHEMES}")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.gen, self.dt, self.scheme, self.solver = gen, float(dt), scheme, solver
        self.tol, self.maxiter = tol, maxiter
        self.theta = 1.0 if scheme == "backward_euler" else 0.5
        N = gen.size
        eye = sp.identity(N, format="csc")
        self._lhs = (eye - self.theta * self.dt * gen.L).tocsc()
        self._rhs = None if self.theta == 1.0 else (eye + (1 - self.theta) * self.dt * gen.L).tocsr()
        if solver not in SOLVERS:
            raise ValueError(f"unknown solver {solver!r}; use one of {SOLVERS}")
        # symmetric form: W (I - theta dt L) = W - theta dt F, positive definite
        self._sym = (sp.diags(gen.weights) - self.theta * self.dt * gen.form_matrix()).tocsr()
        self._band = None
        if solver == "direct":
            self._band = _banded_cholesky(self._sym)
            if self._band is None:
                self.solver = "lu"
        if self.solver == "lu":
            self._lu = spla.splu(self._lhs)
        elif self.solver == "cg":
            self._pre = sp.diags(1.0 / self._sym.diagonal())

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``(I - theta dt L) x = b`` for one or many right-hand sides."""
        b = np.asarray(b, dtype=float)
        if self._band is not None:
            w = self.gen.weights if b.ndim == 1 else self.gen.weights[:, None]
            return sla.cho_solve_banded((self._band, False), w * b, check_finite=False)
        if self.solver == "lu":
            return self._lu.solve(b)
        if b.ndim == 2:
            return np.column_stack([self.solve(b[:, k]) for k in range(b.shape[1])])
        rhs = self.gen.weights * b
        x, info = spla.cg(self._sym, rhs, rtol=self.tol, atol=0.0, maxiter=self.maxiter, M=self._pre)
        if info != 0:
            raise SolverError(f"CG did not converge (info={info}, tol={self.tol}, maxiter={self.maxiter})")
        return x

    def step(self, u: np.ndarray) -> np.ndarray:
        rhs = u if self._rhs is None else self._rhs @ u
        return self.solve(rhs)


def _banded_cholesky(M: sp.csr_matrix) -> Optional[np.ndarray]:
    """Upper banded Cholesky factor of ``M``, or ``None`` if the band is wide or ``M`` is not definite."""
    coo = M.tocoo()
    bw = int(np.abs(coo.row - coo.col).max(initial=0))
    if bw > _MAX_BAND:
        return None
    ab = np.zeros((bw + 1, M.shape[0]))
    for k in range(bw + 1):
        ab[bw - k, k:] = M.diagonal(k)
    try:
        return sla.cholesky_banded(ab, lower=False, check_finite=False)
    except np.linalg.LinAlgError:
        return None


def step_semigroup(gen: GeneratorMatrix, u, dt: float, steps: int,
                   scheme: str = "backward_euler", solver: str = "direct") -> np.ndarray:
    """Iterates ``u_0 .. u_steps`` approximating ``e^{k dt L} u``; shape ``(steps+1, N[, k])``."""
    st = Stepper(gen, dt, scheme, solver)
    u = np.asarray(u, dtype=float)
    out = np.empty((steps + 1,) + u.shape)
    out[0] = u
    for k in range(steps):
        out[k + 1] = st.step(out[k])
    return out


@dataclass(frozen=True)
class SolutionPath:
    times: np.ndarray
    masses: np.ndarray          # (stamps, cells)
    grid: Grid
    weights: np.ndarray         # reference-measure cell weights
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.masses.shape != (len(self.times), self.grid.size):
            raise ValueError("masses must have shape (stamps, cells)")
        scale = max(1.0, float(np.abs(self.masses).max(initial=0.0)))
        if (self.masses < -1e-14 * scale).any():
            k, i = np.unravel_index(np.argmin(self.masses), self.masses.shape)
            raise ValueError(f"negative mass {self.masses[k, i]:.3e} at stamp {k}, cell {i}")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def total_mass(self) -> np.ndarray:
        return np.array([math.fsum(row) for row in self.masses])

    def measure(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(np.clip(self.masses[k], 0.0, None), self.grid)

    def densities(self) -> np.ndarray:
        """Densities with respect to the reference measure ``m``."""
        return self.masses / self.weights

    def integrate(self, field_values: np.ndarray) -> np.ndarray:
        """``<field, mu_t>`` at every stamp."""
        return self.masses @ np.asarray(field_values, dtype=float)

    def with_masses(self, masses: np.ndarray, **prov) -> "SolutionPath":
        return SolutionPath(self.times, masses, self.grid, self.weights, {**self.provenance, **prov})


def _time_grid(dt: float, T: float) -> tuple:
    steps = max(1, int(round(T / dt)))
    if abs(steps * dt - T) > 1e-9 * T:
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    return steps, np.arange(steps + 1) * dt


def solve_fpke(gen: GeneratorMatrix, nu: DiscreteMeasure, dt: float, T: float,
               scheme: str = "backward_euler", solver: str = "direct") -> SolutionPath:
    """Path ``mu_t = (T_t u) m`` with ``u = d nu / d m``."""
    steps, times = _time_grid(dt, T)
    u0 = nu.mass / gen.weights
    U = step_semigroup(gen, u0, dt, steps, scheme, solver)
    return SolutionPath(times, U * gen.weights, gen.grid, gen.weights,
                        {"extension": gen.extension, "scheme": scheme, "dt": dt, "T": T})


def solve_fpke_pair(ref: GeneratorMatrix, alt: GeneratorMatrix, nu: DiscreteMeasure,
                    dt: float, T: float) -> tuple:
    """Backward-Euler paths for two generators, the second obtained as a correction.

    ``delta = u_ref - u_alt`` obeys ``(I - dt L_alt) delta' = delta + dt (L_ref - L_alt) u_ref'``,
    so the difference of the two paths is computed with relative accuracy even
    where it is far below the rounding level of the paths themselves.
    """
    if ref.grid != alt.grid:
        raise ValueError("generators live on different grids")
    steps, times = _time_grid(dt, T)
    st_ref = Stepper(ref, dt)
    st_alt = Stepper(alt, dt)
    D = (ref.L - alt.L).tocsr()
    u = nu.mass / ref.weights
    delta = np.zeros_like(u)
    U = np.empty((steps + 1, u.size))
    Delta = np.empty_like(U)
    U[0], Delta[0] = u, delta
    for k in range(steps):
        u = st_ref.step(u)
        delta = st_alt.solve(delta + dt * (D @ u))
        U[k + 1], Delta[k + 1] = u, delta
    prov = {"scheme": "backward_euler", "dt": dt, "T": T}
    p_ref = SolutionPath(times, U * ref.weights, ref.grid, ref.weights, {**prov, "extension": ref.extension})
    p_alt = SolutionPath(times, (U - Delta) * alt.weights, alt.grid, alt.weights,
                         {**prov, "extension": alt.extension, "coupled_to": ref.extension})
    return p_ref, p_alt


def boundary_mass(path: SolutionPath, width_cells: int = 2) -> np.ndarray:
    mask = path.grid.boundary_layer(width_cells)
    return path.masses[:, mask].sum(axis=1)


# ---------------------------------------------------------------- identities


def _as_values(phi, grid: Grid) -> np.ndarray:
    if isinstance(phi, (str, ex.Expression)):
        return sample_field(phi, grid)
    return np.asarray(phi, dtype=float)


def duality_residuals(gen: GeneratorMatrix, u, phi, T: float, dt: float,
                      scheme: str = "backward_euler", signed: bool = False) -> np.ndarray:
    """``|<phi, T_t u>_m - <phi, u>_m - int_0^t <L phi, T_s u>_m ds|`` per stamp."""
    steps, _ = _time_grid(dt, T)
    phi_v = _as_values(phi, gen.grid)
    u = _as_values(u, gen.grid)
    U = step_semigroup(gen, u, dt, steps, scheme)
    lphi = gen.apply(phi_v)
    lhs = U @ (gen.weights * phi_v)
    integrand = U @ (gen.weights * lphi)
    rhs = lhs[0] + trapezoid_cumulative(integrand, dt)
    return lhs - rhs if signed else np.abs(lhs - rhs)


def verify_duality(gen: GeneratorMatrix, u, phi, T: float, dt: float,
                   scheme: str = "backward_euler") -> float:
    return float(duality_residuals(gen, u, phi, T, dt, scheme).max())


@dataclass(frozen=True)
class TestFunctionPair:
    """Product test function ``f(t) phi(x)`` with ``f(T) = 0`` and compactly supported ``phi``."""

    phi: ex.Expression
    f: ex.Expression
    T: float
    __test__ = False  # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "phi", ex.as_expression(self.phi))
        object.__setattr__(self, "f", ex.as_expression(self.f))
        fT = ex.evaluate(self.f, (self.T, [0.0]))
        if fT != 0.0:
            raise ValueError(f"temporal factor must vanish at T, got f(T)={fT!r}")

    def check_support(self, grid: Grid) -> None:
        vals = sample_field(self.phi, grid)
        layer = grid.boundary_layer(2)
        if np.any(vals[layer] != 0):
            i = int(np.flatnonzero(layer & (vals != 0))[0])
            raise ValueError(f"test function {ex.to_string(self.phi)!r} does not vanish within "
                             f"2h of the boundary (cell {i})")

    def f_values(self, times: np.ndarray) -> tuple:
        df = ex.differentiate(self.f, "t")
        f = np.array([ex.evaluate(self.f, (t, [0.0])) for t in times])
        fp = np.array([ex.evaluate(df, (t, [0.0])) for t in times])
        return f, fp


def _bump(center: Sequence[float], radius: Sequence[float]) -> str:
    terms = " + ".join(f"((x{k + 1} - {c!r}) / {r!r})^2" for k, (c, r) in enumerate(zip(center, radius)))
    return f"max(0, 1 - ({terms}))^4"


def default_battery(grid: Grid, T: float) -> list:
    """Three fixed test pairs: bumps of a quarter box radius, polynomial ramps in t."""
    mid = [(a + b) / 2 for a, b in zip(grid.lo, grid.hi)]
    half = [(b - a) / 2 for a, b in zip(grid.lo, grid.hi)]
    r = [w / 4 for w in half]
    shifted = [m + w / 8 for m, w in zip(mid, half)]
    wide = [w / 3 for w in half]
    Tr = repr(float(T))
    return [
        TestFunctionPair(_bump(mid, r), f"1 - t / {Tr}", T),
        TestFunctionPair(_bump(shifted, r), f"(1 - t / {Tr})^2", T),
        TestFunctionPair(_bump(mid, wide), f"1 - (t / {Tr})^2", T),
    ]


def _weak_total(path: SolutionPath, pair: TestFunctionPair, phi_v: np.ndarray,
                lphi_v: np.ndarray) -> float:
    if abs(path.times[-1] - pair.T) > 1e-12 * max(1.0, pair.T):
        raise ValueError("test pair horizon does not match the path")
    f, fp = pair.f_values(path.times)
    mphi = path.integrate(phi_v)
    integrand = fp * mphi + f * path.integrate(lphi_v)
    return float(trapezoid_cumulative(integrand, path.dt)[-1] + f[0] * mphi[0])


def weak_defect(path: SolutionPath, coeffs: CoefficientSet, pair: TestFunctionPair) -> float:
    """Signed defect of the weak equation for ``f (x) phi`` along ``path``.

    ``int_0^T int (d/ds + L0)(f phi) dmu_s ds + int f(0) phi dmu_0`` with the
    exact operator applied to ``phi`` and trapezoidal time quadrature.
    """
    pair.check_support(path.grid)
    phi_v = sample_field(pair.phi, path.grid)
    lphi_v = sample_field(operator_expression(coeffs, pair.phi), path.grid)
    return _weak_total(path, pair, phi_v, lphi_v)


def weak_residual(path: SolutionPath, coeffs: CoefficientSet, pair: TestFunctionPair) -> float:
    return abs(weak_defect(path, coeffs, pair))


def reference_residual(path: SolutionPath, gen: GeneratorMatrix, pair: TestFunctionPair) -> float:
    """Weak defect against a discrete generator, with ``phi`` allowed to reach the boundary.

    With ``phi = 1`` and the reflecting reference generator this measures the
    mass that ``path`` loses through the boundary, which compactly supported
    test functions cannot see.
    """
    phi_v = sample_field(pair.phi, path.grid)
    return abs(_weak_total(path, pair, phi_v, gen.apply(phi_v)))


def mass_balance_killing(path: SolutionPath, c_field) -> float:
    """``max_t |nu(E) - mu_t(E) + int_0^t int c dmu_s ds|``."""
    c = _as_values(c_field, path.grid)
    tot = path.total_mass()
    killed = trapezoid_cumulative(path.masses @ c, path.dt)
    return float(np.max(np.abs(tot[0] - tot + killed)))


def check_submarkov(gen: GeneratorMatrix, dt: float, steps: int, trials: int = 100,
                    seed: int = 0, scheme: str = "backward_euler", tol: float = 1e-12) -> ConditionReport:
    """Evolve random ``0 <= u <= 1`` (plus ``u = 0`` and ``u = 1``) and record the range."""
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.0, 1.0, size=(gen.size, trials))
    U = np.column_stack([U, np.zeros(gen.size), np.ones(gen.size)])
    st = Stepper(gen, dt, scheme)
    lo, hi = float(U.min()), float(U.max())
    lo_at = hi_at = (0, 0)
    for k in range(steps):
        U = st.step(U)
        kmin, kmax = float(U.min()), float(U.max())
        if kmin < lo:
            lo, lo_at = kmin, (k + 1, int(np.argmin(U)) // U.shape[1])
        if kmax > hi:
            hi, hi_at = kmax, (k + 1, int(np.argmax(U)) // U.shape[1])
    ok = lo >= -tol and hi <= 1 + tol
    witness = None
    if not ok:
        step, cell = lo_at if lo < -tol else hi_at
        witness = {"step": step, "cell": cell, "value": lo if lo < -tol else hi}
    return ConditionReport(
        "SUBMARKOV", PASS if ok else FAIL,
        estimates={"min": lo, "max": hi, "trials": trials, "steps": steps, "dt": dt},
        witness=witness, region=f"{gen.extension} closure on {gen.grid.ident()}")


def check_sp_membership(path: SolutionPath, coeffs: CoefficientSet, nu: DiscreteMeasure,
                        battery: Optional[list] = None, threshold: Optional[float] = None,
                        ) -> ConditionReport:
    """Check the four defining properties of the subprobability solution class."""
    grid, dt = path.grid, path.dt
    battery = battery if battery is not None else default_battery(grid, float(path.times[-1]))
    thr = threshold if threshold is not None else max(5.0 * dt, 1e-10)
    items = {}

    res = [weak_residual(path, coeffs, p) for p in battery]
    k = int(np.argmax(res))
    items["weak_equation"] = ConditionReport(
        "SP-weak", PASS if max(res) <= thr else FAIL,
        estimates={"residuals": res, "threshold": thr},
        witness=None if max(res) <= thr else {"pair": k, "phi": ex.to_string(battery[k].phi),
                                              "residual": res[k]})

    c = sample_field(coeffs.c, grid)
    val = float(trapezoid_cumulative(path.masses @ np.abs(c), dt)[-1])
    items["c_integrable"] = ConditionReport(
        "SP-c", PASS if math.isfinite(val) else FAIL, estimates={"integral": val},
        witness=None if math.isfinite(val) else {"integral": val}, region="box")

    b = np.stack([sample_field(e, grid) for e in drift_expressions(coeffs, use_given=True)], -1)
    half = min((hi - lo) / 2 for lo, hi in zip(grid.lo, grid.hi))
    mid = np.array([(lo + hi) / 2 for lo, hi in zip(grid.lo, grid.hi)])
    ball = np.linalg.norm(grid.points() - mid, axis=1) <= half
    val = float(trapezoid_cumulative(path.masses[:, ball] @ (b[ball] ** 2).sum(-1), dt)[-1])
    items["b_square_integrable"] = ConditionReport(
        "SP-b", PASS if math.isfinite(val) else FAIL, estimates={"integral": val, "ball_radius": half},
        witness=None if math.isfinite(val) else {"integral": val}, region="largest inscribed ball")

    tot = path.total_mass()
    bound = nu.total + trapezoid_cumulative(path.masses @ c, dt)
    tol = dt * float(np.abs(c).max(initial=0.0)) * nu.total + 1e-10
    excess = tot - bound
    k = int(np.argmax(excess))
    ok = bool(np.all(excess <= tol)) and abs(tot[0] - nu.total) <= 1e-10
    items["mass_inequality"] = ConditionReport(
        "SP-mass", PASS if ok else FAIL,
        estimates={"max_excess": float(excess.max()), "tolerance": tol},
        witness=None if ok else {"stamp": k, "t": float(path.times[k]), "mass": float(tot[k]),
                                 "bound": float(bound[k])})
    verdict = worst(r.verdict for r in items.values())
    witness = None
    if verdict == FAIL:
        name = next(n for n, r in sorted(items.items()) if r.verdict == FAIL)
        witness = {"item": name, **items[name].witness}
    return ConditionReport("SP", verdict, estimates={}, witness=witness, items=items,
                           region=f"path on {grid.ident()}")


def convex_midpoint_compare(path_a: SolutionPath, path_b: SolutionPath) -> dict:
    """Compare two paths through their densities with respect to the midpoint path.

    ``nu_t = (mu_t + mu~_t) / 2``, ``g = d mu / d nu``, ``g~ = d mu~ / d nu`` with
    ``0/0 := 1``.  Returns the sup norm of ``g - g~`` and its ``L^1(nu_t dt)``
    norm (plus the per-stamp ``L^1(nu_t)`` curve).
    """
    if path_a.masses.shape != path_b.masses.shape or not np.allclose(path_a.times, path_b.times):
        raise ValueError("paths must share stamps and grid")
    A, B = path_a.masses, path_b.masses
    nu = 0.5 * (A + B)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(nu > 0, A / nu, 1.0)
        gt = np.where(nu > 0, B / nu, 1.0)
    diff = np.abs(g - gt)
    per_stamp = (diff * nu).sum(axis=1)
    return {
        "sup": float(diff.max()),
        "l1": float(trapezoid_cumulative(per_stamp, path_a.dt)[-1]) if len(per_stamp) > 1 else 0.0,
        "l1_max_over_t": float(per_stamp.max()),
        "l1_curve": per_stamp,
    }

