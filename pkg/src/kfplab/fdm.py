"""Finite-difference discretization of ``-L^eps`` on a product domain (n = 1).

Unknown layout, lexicographic with v fastest::

    [ left traces (nv) | cell row i=0 (nv) | ... | cell row nx-1 (nv) | right traces (nv) ]

Cells are centred; the v axis is staggered so that ``v = 0`` is never a node,
which keeps ``v . n_x`` strictly signed on every position-boundary node.
First-order upwinding is used for ``v d_x`` and ``b d_v`` so that the
assembled matrix is an M-matrix for every ``eps >= 0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .coefficients import CoefficientField
from .errors import AssumptionViolated, TooCoarse
from .geometry import BOUNDARY_TOL, BoundaryLabel, ProductDomain


@dataclass(frozen=True, eq=False)
class Grid:
    domain: ProductDomain
    nx: int
    nv: int
    x: np.ndarray
    v: np.ndarray
    hx: float
    hv: float
    v_gap: tuple
    staggered: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nv)

    @property
    def h(self) -> float:
        return max(self.hx, self.hv)

    @property
    def cell_volume(self) -> float:
        return self.hx * self.hv

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        X, V = np.meshgrid(self.x, self.v, indexing="ij")
        return X, V

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates with a leading axis of length n = 1."""
        X, V = self.mesh()
        return X[None], V[None]

    @property
    def n_unknowns(self) -> int:
        return (self.nx + 2) * self.nv

    def cell_index(self, i, j):
        return (np.asarray(i) + 1) * self.nv + np.asarray(j)

    def left_index(self, j):
        return np.asarray(j)

    def right_index(self, j):
        return (self.nx + 1) * self.nv + np.asarray(j)


def velocity_nodes(vlo: float, vhi: float, nv: int) -> tuple[np.ndarray, float, tuple, bool]:
    """Cell-centred velocity nodes, shifted by ``hv/2`` when one would sit on ``v = 0``.

    In the shifted case the spacing becomes ``|V| / (nv + 1/2)`` so that the
    last node stays half a cell inside the upper velocity face.  Returns the
    nodes, the spacing, the gaps to the two faces and the shift flag.
    """
    hv = (vhi - vlo) / nv
    v = vlo + (np.arange(nv) + 0.5) * hv
    if np.any(np.abs(v) <= BOUNDARY_TOL * max(1.0, abs(vlo), abs(vhi))):
        hv = (vhi - vlo) / (nv + 0.5)
        return vlo + (np.arange(nv) + 1.0) * hv, hv, (hv, hv / 2), True
    return v, hv, (hv / 2, hv / 2), False


def build_grid(domain: ProductDomain, nx: int, nv: int) -> Grid:
    """Cell-centred tensor grid, see :func:`velocity_nodes` for the v axis."""
    if domain.n != 1:
        raise NotImplementedError("the finite-difference solver supports n = 1 only")
    if nx < 4 or nv < 4:
        raise TooCoarse(f"need at least 4 nodes per axis, got nx={nx}, nv={nv}")
    (xlo, xhi), = domain.x_intervals
    (vlo, vhi), = domain.v_intervals
    hx = (xhi - xlo) / nx
    x = xlo + (np.arange(nx) + 0.5) * hx
    v, hv, gap, staggered = velocity_nodes(vlo, vhi, nv)
    x.setflags(write=False)
    v.setflags(write=False)
    return Grid(domain, nx, nv, x, v, hx, hv, gap, staggered)


@dataclass(eq=False)
class Field:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} != grid shape {self.grid.shape}")

    def ravel(self) -> np.ndarray:
        return self.values.ravel()

    def at(self, x, v) -> np.ndarray:
        """Bilinear interpolation (linear extrapolation in the half cells at the edges)."""
        from scipy.interpolate import RegularGridInterpolator

        interp = RegularGridInterpolator((self.grid.x, self.grid.v), self.values, bounds_error=False, fill_value=None)
        return interp(np.column_stack([np.ravel(x), np.ravel(v)])).reshape(np.shape(x))


@dataclass(eq=False)
class TraceFunction:
    """Values on the position-boundary nodes ``(x_lo, v_j)`` and ``(x_hi, v_j)``."""

    grid: Grid
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=float)
        self.right = np.asarray(self.right, dtype=float)

    @property
    def normal_velocity(self) -> tuple[np.ndarray, np.ndarray]:
        """``v . n_x`` on the left (n = -1) and right (n = +1) faces."""
        return -self.grid.v, self.grid.v.copy()

    @property
    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for vn in self.normal_velocity:
            out.append(
                np.where(vn > 0, BoundaryLabel.XPLUS.value, np.where(vn < 0, BoundaryLabel.XMINUS.value, BoundaryLabel.XZERO.value))
            )
        return out[0], out[1]

    def on(self, label: BoundaryLabel | str) -> np.ndarray:
        key = BoundaryLabel(label).value
        ll, lr = self.labels
        return np.concatenate([self.left[ll == key], self.right[lr == key]])


@dataclass(eq=False)
class ProblemData:
    """Source on cells, ``g1`` on the velocity faces, ``g2`` on the trace nodes."""

    f: np.ndarray
    g1_lo: np.ndarray
    g1_hi: np.ndarray
    g2_left: np.ndarray
    g2_right: np.ndarray

    def hyp_values(self, grid: Grid) -> np.ndarray:
        """The data values the discrete problem actually sees on the hypoelliptic boundary."""
        vn_l, vn_r = -grid.v, grid.v
        return np.concatenate([self.g1_lo, self.g1_hi, self.g2_left[vn_l > 0], self.g2_right[vn_r > 0]])

    def shifted(self, c: float) -> "ProblemData":
        return ProblemData(self.f.copy(), self.g1_lo + c, self.g1_hi + c, self.g2_left + c, self.g2_right + c)


def sample_data(grid: Grid, coeffs: CoefficientField) -> ProblemData:
    X, V = grid.points()
    (xlo, xhi), = grid.domain.x_intervals
    (vlo, vhi), = grid.domain.v_intervals
    xs = grid.x[None]
    vs = grid.v[None]
    return ProblemData(
        f=coeffs.source(X, V),
        g1_lo=coeffs.data_v(xs, np.full_like(xs, vlo)),
        g1_hi=coeffs.data_v(xs, np.full_like(xs, vhi)),
        g2_left=coeffs.data_x(np.full_like(vs, xlo), vs),
        g2_right=coeffs.data_x(np.full_like(vs, xhi), vs),
    )


@dataclass(eq=False)
class Stencil:
    """Node and face coefficients shared by the assembly and the Green identity."""

    a_int: np.ndarray  # (nx, nv-1) interior v faces
    a_lo: np.ndarray  # (nx,) lower velocity face
    a_hi: np.ndarray
    b: np.ndarray  # (nx, nv) drift at nodes
    eps: float


def build_stencil(grid: Grid, coeffs: CoefficientField, eps: float) -> Stencil:
    X, V = grid.points()
    a = coeffs.diffusion(X, V)[0, 0]
    (vlo, vhi), = grid.domain.v_intervals
    xs = grid.x[None]
    a_blo = coeffs.diffusion(xs, np.full_like(xs, vlo))[0, 0]
    a_bhi = coeffs.diffusion(xs, np.full_like(xs, vhi))[0, 0]
    lam = min(float(a.min()), float(a_blo.min()), float(a_bhi.min()))
    if not lam > 0:
        raise AssumptionViolated(f"diffusion not positive on the grid (min {lam:.3e})")
    return Stencil(
        a_int=0.5 * (a[:, 1:] + a[:, :-1]),
        a_lo=0.5 * (a[:, 0] + a_blo),
        a_hi=0.5 * (a[:, -1] + a_bhi),
        b=coeffs.drift(X, V)[0],
        eps=float(eps),
    )


@dataclass(eq=False)
class SparseOperator:
    grid: Grid
    matrix: sp.csr_matrix
    rhs: np.ndarray
    stencil: Stencil
    data: ProblemData

    @property
    def eps(self) -> float:
        return self.stencil.eps

    @property
    def bandwidth(self) -> int:
        return self.grid.nv

    def split(self, sol: np.ndarray) -> tuple[Field, TraceFunction]:
        g = self.grid
        sol = np.asarray(sol, dtype=float)
        cells = sol[g.nv : (g.nx + 1) * g.nv].reshape(g.nx, g.nv)
        return Field(g, cells), TraceFunction(g, sol[: g.nv], sol[(g.nx + 1) * g.nv :])

    def join(self, u: Field, trace: TraceFunction) -> np.ndarray:
        return np.concatenate([trace.left, u.values.ravel(), trace.right])

    def with_data(self, data: ProblemData) -> "SparseOperator":
        return SparseOperator(self.grid, self.matrix, assemble_rhs(self.grid, self.stencil, data), self.stencil, data)


def _matrix(grid: Grid, st: Stencil) -> sp.csr_matrix:
    nx, nv, hx, hv = grid.nx, grid.nv, grid.hx, grid.hv
    d_lo, d_hi = grid.v_gap
    eps = st.eps
    I, J = np.meshgrid(np.arange(nx), np.arange(nv), indexing="ij")
    row = grid.cell_index(I, J)
    V = np.broadcast_to(grid.v[None, :], (nx, nv))
    diag = np.zeros((nx, nv))
    rows, cols, vals = [], [], []

    def couple(r, c, w):
        rows.append(np.ravel(r))
        cols.append(np.ravel(c))
        vals.append(-np.ravel(w))

    # v diffusion, conservative flux form
    c = st.a_int / (hv * hv)
    diag[:, :-1] += c
    diag[:, 1:] += c
    couple(row[:, :-1], row[:, 1:], c)
    couple(row[:, 1:], row[:, :-1], c)
    diag[:, 0] += st.a_lo / (hv * d_lo)
    diag[:, -1] += st.a_hi / (hv * d_hi)

    # drift in v, upwinded so the off-diagonal weight is -|b|/distance
    bpos = np.maximum(st.b, 0.0)
    bneg = np.maximum(-st.b, 0.0)
    dist_up = np.full((nx, nv), hv)
    dist_up[:, -1] = d_hi
    dist_dn = np.full((nx, nv), hv)
    dist_dn[:, 0] = d_lo
    diag += bpos / dist_up + bneg / dist_dn
    couple(row[:, :-1], row[:, 1:], bpos[:, :-1] / hv)
    couple(row[:, 1:], row[:, :-1], bneg[:, 1:] / hv)

    # transport v d_x: the neighbour in the direction of sign(v) enters; on the
    # data face the trace sits hx/2 away (face value 2T - u, see face_values)
    vpos = np.maximum(V, 0.0) / hx
    vneg = np.maximum(-V, 0.0) / hx
    diag += vpos + vneg
    diag[-1, :] += vpos[-1, :]
    diag[0, :] += vneg[0, :]
    couple(row[:-1, :], row[1:, :], vpos[:-1, :])
    couple(row[-1, :], grid.right_index(np.arange(nv)), 2.0 * vpos[-1, :])
    couple(row[1:, :], row[:-1, :], vneg[1:, :])
    couple(row[0, :], grid.left_index(np.arange(nv)), 2.0 * vneg[0, :])

    if eps > 0:
        c = eps / (hx * hx)
        diag[:-1, :] += c
        diag[1:, :] += c
        couple(row[:-1, :], row[1:, :], np.full((nx - 1, nv), c))
        couple(row[1:, :], row[:-1, :], np.full((nx - 1, nv), c))
        cb = 2.0 * eps / (hx * hx)
        diag[0, :] += cb
        diag[-1, :] += cb
        couple(row[0, :], grid.left_index(np.arange(nv)), np.full(nv, cb))
        couple(row[-1, :], grid.right_index(np.arange(nv)), np.full(nv, cb))

    rows.append(row.ravel())
    cols.append(row.ravel())
    vals.append(diag.ravel())

    # trace rows: discrete Robin relation eps dn u + (v.n)_+ u = (v.n)_+ g2
    j = np.arange(nv)
    robin = 2.0 * eps / hx
    for idx, adj, vn in (
        (grid.left_index(j), grid.cell_index(0, j), -grid.v),
        (grid.right_index(j), grid.cell_index(nx - 1, j), grid.v),
    ):
        plus = vn > 0
        d = np.where(plus, robin + vn, 1.0)
        off = np.where(plus, robin, 1.0)
        rows += [idx, idx]
        cols += [idx, adj]
        vals += [d, -off]

    n = grid.n_unknowns
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    M = M.tocsr()
    M.sum_duplicates()
    M.eliminate_zeros()
    return M


def assemble_rhs(grid: Grid, st: Stencil, data: ProblemData) -> np.ndarray:
    hv = grid.hv
    d_lo, d_hi = grid.v_gap
    cells = np.array(data.f, dtype=float, copy=True)
    cells[:, 0] += st.a_lo / (hv * d_lo) * data.g1_lo
    cells[:, -1] += st.a_hi / (hv * d_hi) * data.g1_hi
    cells[:, -1] += np.maximum(st.b[:, -1], 0.0) / d_hi * data.g1_hi
    cells[:, 0] += np.maximum(-st.b[:, 0], 0.0) / d_lo * data.g1_lo
    vn_l, vn_r = -grid.v, grid.v
    left = np.where(vn_l > 0, vn_l * data.g2_left, 0.0)
    right = np.where(vn_r > 0, vn_r * data.g2_right, 0.0)
    return np.concatenate([left, cells.ravel(), right])


def assemble(grid: Grid, coeffs: CoefficientField, eps: float, data: ProblemData | None = None) -> SparseOperator:
    """Assemble ``-L^eps u = f`` with Dirichlet ``g1`` on the velocity faces and
    the Robin relation on the position faces.

    ``data`` defaults to sampling ``f, g1, g2`` from ``coeffs``.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    st = build_stencil(grid, coeffs, eps)
    data = sample_data(grid, coeffs) if data is None else data
    return SparseOperator(grid, _matrix(grid, st), assemble_rhs(grid, st, data), st, data)


def m_matrix_defects(M: sp.spmatrix, tol: float = 1e-12) -> dict:
    """Largest positive off-diagonal, smallest diagonal and smallest row sum."""
    M = sp.csr_matrix(M)
    d = M.diagonal()
    off = M - sp.diags(d)
    return {
        "max_offdiag": float(off.max()) if off.nnz else 0.0,
        "min_diag": float(d.min()),
        "min_row_sum": float(np.asarray(M.sum(axis=1)).min()),
        "ok": bool((off.nnz == 0 or off.max() <= tol) and d.min() > 0 and np.asarray(M.sum(axis=1)).min() >= -tol),
    }


@dataclass
class NormBundle:
    l2: float
    l2_h1v: float
    grad_v: float
    trace_weighted: float | None = None
    trace_weighted_sq: float | None = None
    extras: dict = field(default_factory=dict)


def grad_v_sq(u: Field, g1_lo=None, g1_hi=None) -> float:
    """``||d_v u||^2`` by forward differences; boundary faces join in when g1 is given."""
    g = u.grid
    s = float(np.sum(np.diff(u.values, axis=1) ** 2)) / g.hv * g.hx
    if g1_lo is not None:
        s += float(np.sum((u.values[:, 0] - g1_lo) ** 2)) / g.v_gap[0] * g.hx
    if g1_hi is not None:
        s += float(np.sum((u.values[:, -1] - g1_hi) ** 2)) / g.v_gap[1] * g.hx
    return s


def grad_x_sq(u: Field, trace: TraceFunction | None = None) -> float:
    """``||d_x u||^2``; with a trace the half-cell boundary faces are included."""
    g = u.grid
    s = float(np.sum(np.diff(u.values, axis=0) ** 2)) / g.hx * g.hv
    if trace is not None:
        s += float(np.sum((trace.left - u.values[0]) ** 2 + (trace.right - u.values[-1]) ** 2)) / (0.5 * g.hx) * g.hv
    return s


def discrete_norms(u: Field, trace: TraceFunction | None = None, g1_lo=None, g1_hi=None) -> NormBundle:
    g = u.grid
    l2sq = float(np.sum(u.values ** 2)) * g.cell_volume
    gv = grad_v_sq(u, g1_lo, g1_hi)
    out = NormBundle(l2=np.sqrt(l2sq), l2_h1v=np.sqrt(l2sq + gv), grad_v=np.sqrt(gv))
    if trace is not None:
        w = np.abs(g.v)
        out.trace_weighted = float(np.sum(w * (trace.left ** 2 + trace.right ** 2)) * g.hv)
        out.trace_weighted_sq = float(np.sum(w * w * (trace.left ** 2 + trace.right ** 2)) * g.hv)
    return out


def check_green_identity(op: SparseOperator, u: Field, trace: TraceFunction, phi: np.ndarray) -> float:
    """Defect of the discrete Green formula for the pair ``(u, trace)``.

    Evaluates, face by face,

        sum a d_v u d_v phi - (b d_v u) phi + u (v d_x phi) + eps d_x u d_x phi - f phi
        - sum_{position faces} (v.n_x trace + eps d_n u) phi

    with ``phi`` extended by zero onto the velocity faces.  For a solution of
    the assembled system this vanishes up to the linear-solver residual.
    """
    g = op.grid
    st = op.stencil
    data = op.data
    U = u.values
    phi = np.asarray(phi, dtype=float).reshape(g.shape)
    hx, hv = g.hx, g.hv
    d_lo, d_hi = g.v_gap

    # diffusion in v, including the Dirichlet faces (phi = 0, u = g1 there)
    form_a = np.sum(st.a_int * np.diff(U, axis=1) * np.diff(phi, axis=1)) / hv * hx
    form_a += np.sum(st.a_lo * (U[:, 0] - data.g1_lo) * phi[:, 0]) / d_lo * hx
    form_a += np.sum(st.a_hi * (data.g1_hi - U[:, -1]) * (-phi[:, -1])) / d_hi * hx

    # upwinded drift b d_v u, evaluated nodewise
    up = np.empty_like(U)
    up[:, :-1] = np.diff(U, axis=1) / hv
    up[:, -1] = (data.g1_hi - U[:, -1]) / d_hi
    dn = np.empty_like(U)
    dn[:, 1:] = np.diff(U, axis=1) / hv
    dn[:, 0] = (U[:, 0] - data.g1_lo) / d_lo
    bdu = np.where(st.b > 0, st.b * up, st.b * dn)
    form_b = np.sum(bdu * phi) * hx * hv

    faces = face_values(g, U, trace)
    v = g.v[None, :]
    form_t = np.sum(faces[1:-1] * v * np.diff(phi, axis=0)) * hv

    form_e = st.eps * np.sum(np.diff(U, axis=0) * np.diff(phi, axis=0)) / hx * hv
    form_f = np.sum(data.f * phi) * hx * hv

    vn_l, vn_r = -g.v, g.v
    dn_l = st.eps * (trace.left - U[0]) / (0.5 * hx)
    dn_r = st.eps * (trace.right - U[-1]) / (0.5 * hx)
    boundary = np.sum((vn_l * faces[0] + dn_l) * phi[0] + (vn_r * faces[-1] + dn_r) * phi[-1]) * hv

    return float(abs(form_a - form_b + form_t + form_e - form_f - boundary))


def face_values(grid: Grid, U: np.ndarray, trace: TraceFunction) -> np.ndarray:
    """Upwind values of ``u`` on the ``nx + 1`` position faces, shape ``(nx + 1, nv)``.

    Interior faces take the cell on the side ``sign(v)`` points to.  On the
    outflow face (``v . n_x < 0``) this is the adjacent cell; on the data face
    (``v . n_x > 0``) the value is extrapolated through the trace, ``2 T - u``,
    which keeps the boundary difference ``(T - u) / (hx / 2)`` consistent.
    """
    U = np.asarray(U, dtype=float).reshape(grid.shape)
    v = grid.v
    faces = np.empty((grid.nx + 1, grid.nv))
    faces[1:-1] = np.where(v[None, :] > 0, U[1:], U[:-1])
    faces[0] = np.where(v < 0, 2.0 * trace.left - U[0], U[0])
    faces[-1] = np.where(v > 0, 2.0 * trace.right - U[-1], U[-1])
    return faces


def transport_sbp_defect(grid: Grid, u: np.ndarray, trace: TraceFunction, phi: np.ndarray) -> float:
    """``<v d_x u, phi> - (boundary flux - <u, v d_x phi>)`` for the upwind transport stencil."""
    phi = np.asarray(phi, dtype=float).reshape(grid.shape)
    faces = face_values(grid, u, trace)
    v = grid.v[None, :]
    lhs = np.sum(v * (faces[1:] - faces[:-1]) * phi) * grid.hv
    inner = np.sum(faces[1:-1] * v * np.diff(phi, axis=0)) * grid.hv
    flux = np.sum(grid.v * faces[-1] * phi[-1] - grid.v * faces[0] * phi[0]) * grid.hv
    return float(abs(lhs - (flux - inner)))


def write_field_csv(path, u: Field) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    X, V = u.grid.mesh()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "v", "u"])
        for xv, vv, uv in zip(X.ravel(), V.ravel(), u.values.ravel()):
            w.writerow([f"{xv:.17g}", f"{vv:.17g}", f"{uv:.17g}"])
    return path


def read_field_csv(path, grid: Grid) -> Field:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    return Field(grid, data[:, 2].reshape(grid.shape))
