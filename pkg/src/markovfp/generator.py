"""Finite-volume assembly of the symmetric generator and related fields.

The discrete operator is ``L = W^{-1} S + diag(c)`` where ``W = diag(rho_i vol)``
holds the cell weights of the reference measure ``m = rho dx`` and ``S`` is
minus a weighted graph Laplacian, so that ``-<L u, u>_m`` is a sum of squared
differences plus the killing term.  The boundary closure selects the
extension: ``neumann`` drops boundary fluxes (reflecting), ``dirichlet``
imposes a zero wall value half a cell outside the last centre (absorbing).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import expr as ex
from .problem import CoefficientSet, Grid, sample_field

log = logging.getLogger(__name__)

__all__ = [
    "AssemblyError", "GeneratorMatrix", "DriftVector", "assemble", "friedrichs_reference",
    "derive_drift", "drift_expressions", "grad_log", "operator_expression", "factorize_sigma",
    "factorize_sigma_field", "write_coo", "consistency_error",
]


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorMatrix:
    L: sp.csr_matrix
    S: sp.csr_matrix
    weights: np.ndarray
    c: np.ndarray
    extension: str
    grid: Grid
    reference: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def killing(self) -> bool:
        return bool(np.any(self.c != 0))

    @property
    def size(self) -> int:
        return self.L.shape[0]

    def form_matrix(self) -> sp.csr_matrix:
        """Symmetric matrix ``F`` with ``<L u, v>_m = v^T F u``."""
        return (self.S + sp.diags(self.weights * self.c)).tocsr()

    def inner(self, u, v) -> float:
        return float(np.dot(self.weights * np.asarray(u), np.asarray(v)))

    def apply(self, u) -> np.ndarray:
        return self.L @ np.asarray(u, dtype=float)

    def scale(self) -> float:
        """Gershgorin bound on the spectral radius of ``L``."""
        return float(abs(self.L).sum(axis=1).max())

    def invariants(self, n_random: int = 100, seed: int = 0) -> dict:
        """Measured defects of the structural invariants (all should be ~0)."""
        F = self.form_matrix()
        fmax = max(abs(F).max(), 1e-300)
        asym = abs(F - F.T).max() / fmax if F.nnz else 0.0
        rng = np.random.default_rng(seed)
        U = rng.standard_normal((self.size, n_random))
        quad = np.einsum("ij,ij->j", U, F @ U)
        norms = np.einsum("ij,ij->j", U, self.weights[:, None] * U)
        nsd = float(np.max(quad / (norms * max(self.scale(), 1.0))))
        off = self.L - sp.diags(self.L.diagonal())
        min_off = float(off.data.min()) if off.nnz else 0.0
        rows = np.asarray(self.L.sum(axis=1)).ravel()
        row_defect = float(np.max(np.abs(rows - self.c)) / max(self.scale(), 1e-300))
        return {"symmetry": float(asym), "nsd": nsd, "min_offdiag": min_off,
                "row_sum_defect": row_defect if self.extension == "neumann" else None}

    def to_coo_lines(self):
        m = self.L.tocoo()
        order = np.lexsort((m.col, m.row))
        for k in order:
            yield f"{int(m.row[k])} {int(m.col[k])} {float(m.data[k])!r}"


def _center_product(coeffs: CoefficientSet, grid: Grid, i: int, j: int) -> np.ndarray:
    a = coeffs.flux_diffusion()[i][j]
    return sample_field(coeffs.rho, grid) * sample_field(a, grid)


def assemble(coeffs: CoefficientSet, grid: Grid, extension: str = "neumann") -> GeneratorMatrix:
    """Assemble the discrete generator for the given boundary closure."""
    if extension not in ("neumann", "dirichlet"):
        raise ValueError(f"unknown extension {extension!r}")
    if coeffs.dim != grid.dim:
        raise AssemblyError(f"{coeffs.dim}-D coefficients on a {grid.dim}-D grid")
    d, n, h = grid.dim, grid.n, grid.h
    vol = grid.cell_volume
    rho = sample_field(coeffs.rho, grid)
    if not np.all(rho > 0):
        raise AssemblyError(f"rho must be positive; cell {int(np.argmin(rho))}")
    c = sample_field(coeffs.c, grid)
    if np.any(c > 0):
        raise AssemblyError(f"c must be <= 0; cell {int(np.argmax(c))}")
    weights = rho * vol
    idx = np.arange(grid.size).reshape(n)

    rows, cols, vals = [], [], []
    wall = np.zeros(grid.size)

    def add_edges(a_idx, b_idx, g):
        rows.append(a_idx.ravel())
        cols.append(b_idx.ravel())
        vals.append(g.ravel())

    kappa = [_center_product(coeffs, grid, k, k).reshape(n) for k in range(d)]
    if d == 1:
        g = 0.5 * (kappa[0][:-1] + kappa[0][1:]) * vol / h[0] ** 2
        _check_edges(g, idx[:-1], grid)
        add_edges(idx[:-1], idx[1:], g)
        if extension == "dirichlet":
            wall[idx[0]] += 2 * kappa[0][0] * vol / h[0] ** 2
            wall[idx[-1]] += 2 * kappa[0][-1] * vol / h[0] ** 2
    else:
        k12 = _center_product(coeffs, grid, 0, 1).reshape(n)
        corner = 0.25 * (k12[:-1, :-1] + k12[1:, :-1] + k12[:-1, 1:] + k12[1:, 1:])
        cabs = np.abs(corner)
        g1 = 0.5 * (kappa[0][:-1, :] + kappa[0][1:, :]) * vol / h[0] ** 2
        g2 = 0.5 * (kappa[1][:, :-1] + kappa[1][:, 1:]) * vol / h[1] ** 2
        # cross term: each corner moves weight from its four faces to one diagonal
        g1[:, :-1] -= 0.5 * cabs
        g1[:, 1:] -= 0.5 * cabs
        g2[:-1, :] -= 0.5 * cabs
        g2[1:, :] -= 0.5 * cabs
        _check_edges(g1, idx[:-1, :], grid)
        _check_edges(g2, idx[:, :-1], grid)
        add_edges(idx[:-1, :], idx[1:, :], g1)
        add_edges(idx[:, :-1], idx[:, 1:], g2)
        posm, negm = corner > 0, corner < 0
        add_edges(idx[:-1, :-1][posm], idx[1:, 1:][posm], cabs[posm])
        add_edges(idx[:-1, 1:][negm], idx[1:, :-1][negm], cabs[negm])
        if extension == "dirichlet":
            for k, (first, last) in enumerate(((idx[0, :], idx[-1, :]), (idx[:, 0], idx[:, -1]))):
                kk = kappa[k].ravel()
                wall[first] += 2 * kk[first] * vol / h[k] ** 2
                wall[last] += 2 * kk[last] * vol / h[k] ** 2

    r = np.concatenate(rows)
    q = np.concatenate(cols)
    g = np.concatenate(vals)
    keep = g != 0
    r, q, g = r[keep], q[keep], g[keep]
    N = grid.size
    off = sp.coo_matrix((np.concatenate([g, g]), (np.concatenate([r, q]), np.concatenate([q, r]))),
                        shape=(N, N)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel() - wall
    S = (off + sp.diags(diag)).tocsr()
    S.sum_duplicates()
    L = (sp.diags(1.0 / weights) @ S + sp.diags(c)).tocsr()
    L.sum_duplicates()
    L.sort_indices()
    return GeneratorMatrix(L=L, S=S, weights=weights, c=c, extension=extension, grid=grid,
                           meta={"form": coeffs.form})


def _check_edges(g: np.ndarray, cell_idx: np.ndarray, grid: Grid):
    scale = max(float(np.abs(g).max()), 1e-300)
    bad = g < -1e-12 * scale
    if bad.any():
        cell = int(cell_idx[bad].ravel()[0])
        x = tuple(float(cv[cell]) for cv in grid.coords())
        raise AssemblyError(
            f"cross-diffusion stencil loses positivity at cell {cell} (x={x}); "
            "refine the grid or reduce |a12| relative to the diagonal")


def friedrichs_reference(coeffs: CoefficientSet, grid: Grid) -> GeneratorMatrix:
    """Neumann closure, tagged as the reference (form-closure) extension."""
    g = assemble(coeffs, grid, "neumann")
    return GeneratorMatrix(L=g.L, S=g.S, weights=g.weights, c=g.c, extension=g.extension,
                           grid=g.grid, reference=True, meta=dict(g.meta))


# ---------------------------------------------------------------- drift


@dataclass(frozen=True)
class DriftVector:
    values: np.ndarray            # (cells, d)
    expressions: tuple
    kinked: bool


def _dvar(k: int) -> str:
    return f"x{k + 1}"


def grad_log(e: ex.Expression, var: str) -> ex.Expression:
    """``d(log e)/d var`` without dividing by ``e`` where the structure allows it.

    ``exp(u)`` gives ``du``, products and quotients split and constant powers
    scale.  This keeps densities such as ``exp(-x^4)`` usable where they
    underflow to zero.
    """
    if isinstance(e, ex.Num):
        return ex.Num(0.0)
    if isinstance(e, ex.Call) and e.name == "exp":
        return ex.differentiate(e.args[0], var)
    if isinstance(e, ex.BinOp) and e.op in "*/":
        left, right = grad_log(e.left, var), grad_log(e.right, var)
        return ex._add(left, right) if e.op == "*" else ex._sub(left, right)
    if isinstance(e, ex.BinOp) and e.op == "^" and ex.constant_value(e.right) is not None:
        return ex._mul(e.right, grad_log(e.left, var))
    return ex._div(ex.differentiate(e, var), e)


def drift_expressions(coeffs: CoefficientSet, use_given: bool = False) -> tuple:
    """``b^j = d_i a^ij + 2 a^ij rho^{-1/2} d_i rho^{1/2}`` as expressions.

    Uses ``2 rho^{-1/2} d_i rho^{1/2} = d_i log rho``.  With ``use_given`` an
    explicitly supplied drift takes precedence.
    """
    if use_given and coeffs.b is not None:
        return coeffs.b
    a = coeffs.flux_diffusion()
    d = coeffs.dim
    out = []
    for j in range(d):
        total = ex.Num(0.0)
        for i in range(d):
            term = ex._add(ex.differentiate(a[i][j], _dvar(i)),
                           ex._mul(a[i][j], grad_log(coeffs.rho, _dvar(i))))
            total = ex._add(total, term)
        out.append(total)
    return tuple(out)


def log_density_gradient(coeffs: CoefficientSet) -> tuple:
    """Expressions for ``rho^{-1/2} d_i rho^{1/2} = (1/2) d_i log rho``."""
    return tuple(ex._mul(ex.Num(0.5), grad_log(coeffs.rho, _dvar(i))) for i in range(coeffs.dim))


def derive_drift(coeffs: CoefficientSet, grid: Grid) -> DriftVector:
    exprs = drift_expressions(coeffs)
    kinked = any(ex.has_kinks(e) for e in exprs)
    if kinked:
        log.warning("drift uses one-sided derivatives of abs/min/max; values at kinks follow "
                    "the right-hand convention")
    vals = np.stack([sample_field(e, grid) for e in exprs], axis=-1)
    return DriftVector(values=vals, expressions=exprs, kinked=kinked)


def operator_expression(coeffs: CoefficientSet, phi, drift: Optional[tuple] = None) -> ex.Expression:
    """Non-divergence expansion ``a^ij d_ij phi + b^j d_j phi + c phi``."""
    phi = ex.as_expression(phi)
    a = coeffs.flux_diffusion()
    b = drift if drift is not None else drift_expressions(coeffs)
    d = coeffs.dim
    total = ex._mul(coeffs.c, phi)
    for j in range(d):
        dj = ex.differentiate(phi, _dvar(j))
        total = ex._add(total, ex._mul(b[j], dj))
        for i in range(d):
            total = ex._add(total, ex._mul(a[i][j], ex.differentiate(dj, _dvar(i))))
    return total


def consistency_error(coeffs: CoefficientSet, grid: Grid, phi, width_cells: int = 2) -> float:
    """``max |L phi - L0 phi|`` over cells at least ``width_cells`` from the boundary."""
    gen = assemble(coeffs, grid, "neumann")
    phi_v = sample_field(phi, grid)
    exact = sample_field(operator_expression(coeffs, phi), grid)
    mask = grid.interior(width_cells)
    return float(np.max(np.abs(gen.apply(phi_v) - exact)[mask]))


# ---------------------------------------------------------------- sigma


def factorize_sigma(A, tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular ``sigma`` with ``sigma sigma^T = A`` for symmetric PSD ``A``.

    Zero pivots produce zero columns, which covers rank-deficient ``A``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d) or np.abs(A - A.T).max() > tol * max(1.0, np.abs(A).max()):
        raise ValueError("A must be a symmetric square matrix")
    scale = max(1.0, float(np.abs(A).max()))
    L = np.zeros_like(A)
    for j in range(d):
        pivot = A[j, j] - np.dot(L[j, :j], L[j, :j])
        if pivot < -tol * scale:
            raise ValueError(f"A is indefinite (eigenvalue {np.linalg.eigvalsh(A)[0]:.6g})")
        if pivot <= tol * scale:
            rest = A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]
            if np.any(np.abs(rest) > np.sqrt(tol) * scale):
                raise ValueError(f"A is indefinite (eigenvalue {np.linalg.eigvalsh(A)[0]:.6g})")
            continue
        L[j, j] = np.sqrt(pivot)
        L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def factorize_sigma_field(A: np.ndarray) -> np.ndarray:
    """:func:`factorize_sigma` applied to a stack of matrices of shape (cells, d, d)."""
    return np.stack([factorize_sigma(Ai) for Ai in A])


def write_coo(path, gen: GeneratorMatrix) -> None:
    """Write ``row col value`` lines (0-based, row-major order)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# extension={gen.extension} n={gen.size} nnz={gen.L.nnz}\n")
        for line in gen.to_coo_lines():
            fh.write(line + "\n")
