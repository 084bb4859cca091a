"""Grids, coefficient sets, discrete measures and scenario files."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import expr as ex
from .expr import Expression

__all__ = [
    "Grid", "CoefficientSet", "DiscreteMeasure", "Scenario", "ScenarioError",
    "load_scenario", "parse_scenario", "sample_field", "normalize_initial",
    "write_field_csv", "MASS_TOL",
]

MASS_TOL = 1e-12
EXTENSIONS = ("neumann", "dirichlet")
FORMS = ("divergence", "weighted")


class ScenarioError(ValueError):
    """Invalid scenario or coefficient set; ``point`` names the offending node."""

    def __init__(self, message: str, point=None):
        self.point = point
        where = f" at x={tuple(round(float(p), 12) for p in point)}" if point is not None else ""
        super().__init__(message + where)


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred tensor grid on a box.

    Cells are flattened in C order, so in 2-D ``index = i1 * n2 + i2``.
    """

    lo: tuple
    hi: tuple
    n: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not (len(lo) == len(hi) == len(n)) or len(n) not in (1, 2):
            raise ScenarioError(f"grid dimension must be 1 or 2, got lo={lo} hi={hi} n={n}")
        for k in range(len(n)):
            if n[k] < 4:
                raise ScenarioError(f"need at least 4 cells per axis, axis {k + 1} has {n[k]}")
            if not hi[k] > lo[k]:
                raise ScenarioError(f"empty box on axis {k + 1}: [{lo[k]}, {hi[k]}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int, dim: int = 1) -> "Grid":
        return cls((lo,) * dim, (hi,) * dim, (n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def h(self) -> tuple:
        return tuple((b - a) / m for a, b, m in zip(self.lo, self.hi, self.n))

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def shape(self) -> tuple:
        return self.n

    def axis_centers(self, k: int) -> np.ndarray:
        return self.lo[k] + (np.arange(self.n[k]) + 0.5) * self.h[k]

    def coords(self) -> list:
        """Flattened centre coordinates, one array per axis."""
        axes = [self.axis_centers(k) for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return [m.ravel() for m in mesh]

    def points(self) -> np.ndarray:
        return np.stack(self.coords(), axis=-1)

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c ** 2 for c in self.coords()))

    def boundary_layer(self, width_cells: int = 2) -> np.ndarray:
        """Mask of cells whose centre lies within ``width_cells * h`` of the boundary."""
        idx = np.indices(self.n).reshape(self.dim, -1)
        mask = np.zeros(self.size, dtype=bool)
        for k in range(self.dim):
            mask |= (idx[k] < width_cells) | (idx[k] >= self.n[k] - width_cells)
        return mask

    def interior(self, width_cells: int = 1) -> np.ndarray:
        return ~self.boundary_layer(width_cells)

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.lo, self.hi, tuple(m * factor for m in self.n))

    def sub_box(self, fraction: float = 0.5, n: Optional[Sequence[int]] = None) -> "Grid":
        """Concentric box scaled by ``fraction`` with, by default, the same spacing."""
        mid = [(a + b) / 2 for a, b in zip(self.lo, self.hi)]
        half = [(b - a) / 2 * fraction for a, b in zip(self.lo, self.hi)]
        if n is None:
            n = [max(4, int(round(m * fraction))) for m in self.n]
        return Grid(tuple(c - w for c, w in zip(mid, half)), tuple(c + w for c, w in zip(mid, half)),
                    tuple(n))

    def with_box(self, lo, hi, n=None) -> "Grid":
        """Grid on another box; keeps the spacing unless ``n`` is given."""
        lo = tuple(float(v) for v in np.broadcast_to(np.asarray(lo, float), (self.dim,)))
        hi = tuple(float(v) for v in np.broadcast_to(np.asarray(hi, float), (self.dim,)))
        if n is None:
            n = tuple(max(4, int(round((b - a) / h))) for a, b, h in zip(lo, hi, self.h))
        return Grid(lo, hi, tuple(int(v) for v in np.broadcast_to(np.asarray(n), (self.dim,))))

    def ident(self) -> str:
        return f"grid(lo={self.lo},hi={self.hi},n={self.n})"


def sample_field(e, grid: Grid, t: float = 0.0) -> np.ndarray:
    """Values of ``e`` at every cell centre (flattened).

    Evaluation errors are re-raised as :class:`ScenarioError` naming the cell.
    """
    e = ex.as_expression(e)
    coords = grid.coords()
    try:
        return ex.evaluate_array(e, t, coords)
    except ex.EvaluationError as err:
        point = None
        if err.index is not None:
            point = tuple(c[err.index] for c in coords)
        raise ScenarioError(f"cannot evaluate {ex.to_string(e)!r}: {err} (cell {err.index})",
                            point) from err


def _expr_matrix(value, dim: int) -> tuple:
    rows = [[ex.as_expression(v) for v in row] for row in value]
    if len(rows) != dim or any(len(r) != dim for r in rows):
        raise ScenarioError(f"diffusion matrix must be {dim}x{dim}")
    return tuple(tuple(r) for r in rows)


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficient expressions for the operator.

    ``form="divergence"``: ``L0 f = (1/rho) d_i(rho a^ij d_j f) + c f``.
    ``form="weighted"``: ``L0 f = (1/rho) div(rho^2 A grad f)``, assembled with
    effective diffusion ``rho * A``.
    """

    a: tuple
    rho: Expression = ex.Num(1.0)
    c: Expression = ex.Num(0.0)
    b: Optional[tuple] = None
    sigma: Optional[tuple] = None
    form: str = "divergence"

    def __post_init__(self):
        a = self.a
        if isinstance(a, (str, Expression, int, float)):
            a = [[a]]
        dim = len(a)
        object.__setattr__(self, "a", _expr_matrix(a, dim))
        object.__setattr__(self, "rho", ex.as_expression(self.rho))
        object.__setattr__(self, "c", ex.as_expression(self.c))
        if self.b is not None:
            b = self.b if isinstance(self.b, (list, tuple)) else [self.b]
            if len(b) != dim:
                raise ScenarioError(f"drift needs {dim} components")
            object.__setattr__(self, "b", tuple(ex.as_expression(v) for v in b))
        if self.sigma is not None:
            object.__setattr__(self, "sigma", _expr_matrix(self.sigma, dim))
        if self.form not in FORMS:
            raise ScenarioError(f"unknown operator form {self.form!r}; use one of {FORMS}")

    @classmethod
    def isotropic(cls, a="1", rho="1", c="0", **kw) -> "CoefficientSet":
        return cls(a=[[a]], rho=rho, c=c, **kw)

    @property
    def dim(self) -> int:
        return len(self.a)

    def flux_diffusion(self) -> tuple:
        """Diffusion matrix of the divergence form actually assembled."""
        if self.form == "weighted":
            return tuple(tuple(ex.BinOp("*", self.rho, aij) for aij in row) for row in self.a)
        return self.a

    def sample_matrix(self, grid: Grid, effective: bool = True) -> np.ndarray:
        mat = self.flux_diffusion() if effective else self.a
        d = self.dim
        out = np.empty((grid.size, d, d))
        for i in range(d):
            for j in range(d):
                out[:, i, j] = sample_field(mat[i][j], grid)
        return out

    def validate(self, grid: Grid) -> None:
        """Check symmetry, nonnegative definiteness, ``c <= 0`` and ``rho > 0`` at every node."""
        if grid.dim != self.dim:
            raise ScenarioError(f"coefficients are {self.dim}-D but grid is {grid.dim}-D")
        pts = grid.points()
        rho = sample_field(self.rho, grid)
        bad = ~(rho > 0)
        if bad.any():
            raise ScenarioError("rho must be > 0", pts[np.argmax(bad)])
        c = sample_field(self.c, grid)
        bad = c > 0
        if bad.any():
            raise ScenarioError("c must be <= 0", pts[np.argmax(bad)])
        A = self.sample_matrix(grid, effective=False)
        asym = np.abs(A - np.swapaxes(A, 1, 2)).max(axis=(1, 2))
        if (asym > 1e-12).any():
            raise ScenarioError("diffusion matrix is not symmetric", pts[np.argmax(asym > 1e-12)])
        lam = np.linalg.eigvalsh(A)[:, 0]
        scale = np.maximum(1.0, np.abs(A).max(axis=(1, 2)))
        bad = lam < -1e-12 * scale
        if bad.any():
            raise ScenarioError(
                f"diffusion matrix is not nonnegative definite (eigenvalue {lam[np.argmax(bad)]:.3e})",
                pts[np.argmax(bad)])


@dataclass(frozen=True)
class DiscreteMeasure:
    """Nonnegative cell masses of a subprobability measure on ``grid``."""

    mass: np.ndarray
    grid: Grid

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float).ravel()
        if m.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} cell masses, got {m.size}")
        if not np.all(np.isfinite(m)) or (m < -1e-15).any():
            raise ValueError("cell masses must be finite and nonnegative")
        if m.sum() > 1 + MASS_TOL:
            raise ValueError(f"total mass {m.sum():.17g} exceeds 1")
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    @property
    def total(self) -> float:
        return float(np.sum(self.mass))

    def density(self, weights: np.ndarray) -> np.ndarray:
        """Density with respect to the reference measure whose cell weights are given."""
        return self.mass / weights

    @classmethod
    def zero(cls, grid: Grid) -> "DiscreteMeasure":
        return cls(np.zeros(grid.size), grid)


def normalize_initial(u: np.ndarray, rho: np.ndarray, grid: Grid) -> DiscreteMeasure:
    """Cell masses ``u_i rho_i vol / Z`` with total exactly 1 up to rounding."""
    u = np.asarray(u, dtype=float).ravel()
    rho = np.asarray(rho, dtype=float).ravel()
    if (u < 0).any():
        raise ValueError("initial density must be nonnegative")
    raw = u * rho * grid.cell_volume
    z = math.fsum(raw)
    if not z > 0:
        raise ValueError("initial density has zero total mass")
    mass = raw / z
    # push the rounding residue into the largest cell so the total is 1 to 1e-15
    resid = 1.0 - math.fsum(mass)
    k = int(np.argmax(mass))
    mass[k] += resid
    return DiscreteMeasure(mass, grid)


@dataclass(frozen=True)
class Scenario:
    name: str
    grid: Grid
    coefficients: CoefficientSet
    initial: Expression
    T: float
    dt: float
    extensions: tuple = EXTENSIONS
    description: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "initial", ex.as_expression(self.initial))
        object.__setattr__(self, "extensions", tuple(self.extensions))
        if not self.T > 0:
            raise ScenarioError(f"time horizon must be > 0, got {self.T}")
        if not self.dt > 0:
            raise ScenarioError(f"time step must be > 0, got {self.dt}")
        for e in self.extensions:
            if e not in EXTENSIONS:
                raise ScenarioError(f"unknown extension {e!r}; use one of {EXTENSIONS}")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    def validate(self) -> "Scenario":
        self.coefficients.validate(self.grid)
        u = sample_field(self.initial, self.grid)
        bad = u < 0
        if bad.any():
            raise ScenarioError("initial density must be >= 0", self.grid.points()[np.argmax(bad)])
        self.initial_measure()
        return self

    def initial_measure(self) -> DiscreteMeasure:
        u = sample_field(self.initial, self.grid)
        rho = sample_field(self.coefficients.rho, self.grid)
        try:
            return normalize_initial(u, rho, self.grid)
        except ValueError as err:
            raise ScenarioError(str(err)) from err

    def replace(self, **changes) -> "Scenario":
        from dataclasses import replace
        return replace(self, **changes)

    def with_box(self, lo, hi, n=None) -> "Scenario":
        return self.replace(grid=self.grid.with_box(lo, hi, n))


# ---------------------------------------------------------------- scenario files

_SECTIONS = ("grid", "coefficients", "initial", "time", "run")


def _as_tuple(v, dim, name):
    if isinstance(v, (list, tuple)):
        if len(v) != dim:
            raise ScenarioError(f"[grid] {name} needs {dim} entries")
        return tuple(v)
    return (v,) * dim


def _require_str(section, key, value):
    if not isinstance(value, str):
        raise ScenarioError(f"[{section}] {key} must be a quoted expression string")
    return value


def _compile(section, key, value) -> Expression:
    try:
        return ex.parse(_require_str(section, key, value))
    except ex.ExprSyntaxError as err:
        raise ScenarioError(f"[{section}] {key}: {err}") from err


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    """Build a validated :class:`Scenario` from scenario-file text."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ScenarioError(f"scenario file does not parse: {err}") from err
    unknown = set(doc) - set(_SECTIONS) - {"name", "description"}
    if unknown:
        raise ScenarioError(f"unknown top-level keys {sorted(unknown)}")
    for s in ("grid", "coefficients", "initial", "time"):
        if s not in doc:
            raise ScenarioError(f"missing section [{s}]")
    g = doc["grid"]
    dim = int(g.get("dim", 1))
    grid = Grid(_as_tuple(g["lo"], dim, "lo"), _as_tuple(g["hi"], dim, "hi"),
                _as_tuple(g["n"], dim, "n"))

    co = dict(doc["coefficients"])
    form = co.pop("form", "divergence")
    a = [[None] * dim for _ in range(dim)]
    for i in range(dim):
        for j in range(dim):
            key, alt = f"a{i + 1}{j + 1}", f"a{j + 1}{i + 1}"
            if key in co:
                a[i][j] = _compile("coefficients", key, co[key])
            elif alt in co:
                a[i][j] = _compile("coefficients", alt, co[alt])
            elif i == j and dim == 1 and "a" in co:
                a[i][j] = _compile("coefficients", "a", co["a"])
            else:
                a[i][j] = ex.Num(1.0 if i == j else 0.0)
    b = None
    if any(f"b{i + 1}" in co for i in range(dim)):
        b = tuple(_compile("coefficients", f"b{i + 1}", co.get(f"b{i + 1}", "0")) for i in range(dim))
    sigma = None
    if any(k.startswith("sigma") for k in co):
        sigma = [[_compile("coefficients", f"sigma{i + 1}{j + 1}", co.get(f"sigma{i + 1}{j + 1}", "0"))
                  for j in range(dim)] for i in range(dim)]
    known = {f"a{i + 1}{j + 1}" for i in range(dim) for j in range(dim)} | {"a", "rho", "c"}
    known |= {f"b{i + 1}" for i in range(dim)}
    known |= {f"sigma{i + 1}{j + 1}" for i in range(dim) for j in range(dim)}
    extra = set(co) - known
    if extra:
        raise ScenarioError(f"[coefficients] unknown keys {sorted(extra)}")
    coeffs = CoefficientSet(
        a=a, rho=_compile("coefficients", "rho", co.get("rho", "1")),
        c=_compile("coefficients", "c", co.get("c", "0")), b=b, sigma=sigma, form=form)

    u = _compile("initial", "u", doc["initial"].get("u"))
    tm = doc["time"]
    run = doc.get("run", {})
    scen = Scenario(
        name=str(doc.get("name", name)), grid=grid, coefficients=coeffs, initial=u,
        T=float(tm["T"]), dt=float(tm["dt"]),
        extensions=tuple(run.get("extensions", EXTENSIONS)),
        description=str(doc.get("description", "")),
    )
    return scen.validate()


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), name=path.stem)


def _toml_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_scenario(s: Scenario) -> str:
    """Serialise ``s`` to scenario-file text (inverse of :func:`parse_scenario`)."""
    g, co = s.grid, s.coefficients
    lines = [f"name = {_toml_str(s.name)}"]
    if s.description:
        lines.append(f"description = {_toml_str(s.description)}")
    fmt = lambda xs: "[" + ", ".join(repr(float(x)) for x in xs) + "]"  # noqa: E731
    lines += ["", "[grid]", f"dim = {g.dim}", f"lo = {fmt(g.lo)}", f"hi = {fmt(g.hi)}",
              "n = [" + ", ".join(str(m) for m in g.n) + "]", "", "[coefficients]",
              f"form = {_toml_str(co.form)}"]
    for i in range(co.dim):
        for j in range(i, co.dim):
            lines.append(f"a{i + 1}{j + 1} = {_toml_str(ex.to_string(co.a[i][j]))}")
    lines.append(f"rho = {_toml_str(ex.to_string(co.rho))}")
    lines.append(f"c = {_toml_str(ex.to_string(co.c))}")
    if co.b is not None:
        for i, bi in enumerate(co.b):
            lines.append(f"b{i + 1} = {_toml_str(ex.to_string(bi))}")
    if co.sigma is not None:
        for i in range(co.dim):
            for j in range(co.dim):
                lines.append(f"sigma{i + 1}{j + 1} = {_toml_str(ex.to_string(co.sigma[i][j]))}")
    lines += ["", "[initial]", f"u = {_toml_str(ex.to_string(s.initial))}", "", "[time]",
              f"T = {s.T!r}", f"dt = {s.dt!r}", "", "[run]",
              "extensions = [" + ", ".join(_toml_str(e) for e in s.extensions) + "]", ""]
    return "\n".join(lines)


def write_field_csv(path, grid: Grid, values: Iterable[float]) -> None:
    """CSV with header ``x1[,x2],value``."""
    values = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, float).ravel()
    coords = grid.coords()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k + 1}" for k in range(grid.dim)] + ["value"])
        for i in range(grid.size):
            w.writerow([repr(float(c[i])) for c in coords] + [repr(float(values[i]))])
