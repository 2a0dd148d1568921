"""Potential-theoretic layer on general open sets represented by grid masks.

A mask marks the grid nodes of an open set ``Omega``.  The node stencil is
the solver's upwind stencil with nodes as unknowns:

    L_h u(p) = sum_k c_k (u_k - u_p),   c_k >= 0,

with neighbours ``v +- hv`` (diffusion and drift) and the position neighbour
in the direction ``sign(v)``.  An inside node whose needed neighbours are all
inside is an *equation* node; the remaining inside nodes form the data layer,
which plays the role of the hypoelliptic boundary.  Nodes next to the outflow
part never enter the data layer because the upwind stencil does not look
downstream.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import AssumptionReport, CoefficientField, nondivergence_drift, validate_assumptions
from .errors import (
    AssumptionViolated,
    MaskMismatch,
    NoAdmissibleDelta,
    NoAdmissibleParameters,
    NotConverged,
    SourceOutside,
)
from .fdm import Field, Grid, build_grid
from .geometry import BoundaryLabel, DomainMask, ProductDomain, classify_boundary

DELTA_CAP = 2.0**20
CHANGE_TOL = 1e-7
MONOTONE_TOL = 1e-12

# ---------------------------------------------------------------------------
# masks


def ball_mask(nx: int, nv: int, radius: float = 1.0) -> DomainMask:
    """Nodes of the open disc ``x^2 + v^2 < radius^2`` on its bounding box."""
    grid = build_grid(ProductDomain.box((-radius, radius), (-radius, radius)), nx, nv)
    X, V = grid.mesh()
    return DomainMask(grid, X**2 + V**2 < radius**2, name="ball", connected=True)


def box_mask(grid: Grid, x: tuple | None = None, v: tuple | None = None, name: str = "box") -> DomainMask:
    """Nodes of a sub-box of the grid's domain (the whole domain by default)."""
    X, V = grid.mesh()
    (xlo, xhi), = grid.domain.x_intervals if x is None else (x,)
    (vlo, vhi), = grid.domain.v_intervals if v is None else (v,)
    inside = (X > xlo) & (X < xhi) & (V > vlo) & (V < vhi)
    return DomainMask(grid, inside, name=name, connected=True)


def raster_mask(text: str, domain: ProductDomain, name: str = "raster") -> DomainMask:
    """Mask from a text raster: one line per x row, ``#`` inside and ``.`` outside."""
    rows = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("raster rows must be nonempty and of equal length")
    bad = set("".join(rows)) - {"#", "."}
    if bad:
        raise ValueError(f"raster contains characters other than '#' and '.': {sorted(bad)}")
    inside = np.array([[c == "#" for c in r] for r in rows])
    grid = build_grid(domain, inside.shape[0], inside.shape[1])
    return DomainMask(grid, inside, name=name)


def load_raster(path, domain: ProductDomain) -> DomainMask:
    return raster_mask(Path(path).read_text(), domain, name=Path(path).stem)


# ---------------------------------------------------------------------------
# node stencil


@dataclass(eq=False)
class NodeStencil:
    """``L_h`` as a sparse matrix acting on node values followed by ghost values.

    ``equation`` marks the nodes where ``L_h u = 0`` is imposed.  In ``layer``
    mode there are no ghosts and the inside nodes with a missing neighbour
    carry data.  In ``face`` mode every inside node is an equation node and
    each missing neighbour is replaced by a ghost at the boundary crossing
    point, at its true distance; this reproduces the solver's stencil on a
    product domain.
    """

    grid: Grid
    L: sp.csr_matrix
    equation: np.ndarray
    form: str
    mode: str = "layer"
    ghost_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ghost_axis: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def complete(self) -> np.ndarray:
        return self.equation

    @property
    def n_ghosts(self) -> int:
        return len(self.ghost_points)

    def apply(self, values: np.ndarray, ghosts: np.ndarray | None = None) -> np.ndarray:
        ext = np.asarray(values, float).ravel()
        if self.n_ghosts:
            ext = np.concatenate([ext, np.zeros(self.n_ghosts) if ghosts is None else ghosts])
        return (self.L @ ext).reshape(self.grid.shape)


def _coefficients(grid: Grid, coeffs: CoefficientField, form: str, report: AssumptionReport | None, gaps=None):
    """Weights towards the upper and lower velocity neighbours and the upwind
    position neighbour; ``gaps`` replaces the spacing (and the face average of
    ``a``) where the neighbour is a boundary point."""
    X, V = grid.points()
    hv, hx = grid.hv, grid.hx
    d_up = np.full(grid.shape, hv) if gaps is None else gaps[0]
    d_dn = np.full(grid.shape, hv) if gaps is None else gaps[1]
    d_x = np.full(grid.shape, hx) if gaps is None else gaps[2]
    a = coeffs.diffusion(X, V)[0, 0]
    if form == "divergence":
        a_up = 0.5 * (a + coeffs.diffusion(X, V + d_up[None])[0, 0])
        a_dn = 0.5 * (a + coeffs.diffusion(X, V - d_dn[None])[0, 0])
        b = coeffs.drift(X, V)[0]
    elif form == "nondivergence":
        a_up = a_dn = a
        b = nondivergence_drift(coeffs, X, V, report)[0]
    else:
        raise ValueError(f"unknown stencil form {form!r}")
    c_up = a_up / (hv * d_up) + np.maximum(b, 0.0) / d_up
    c_dn = a_dn / (hv * d_dn) + np.maximum(-b, 0.0) / d_dn
    c_x = np.abs(grid.v)[None, :] / d_x
    return c_up, c_dn, c_x


def _neighbour_status(mask: DomainMask):
    grid = mask.grid
    nx, nv = grid.shape
    inside = mask.inside
    I, J = np.meshgrid(np.arange(nx), np.arange(nv), indexing="ij")
    ix = I + np.where(grid.v > 0, 1, -1)[None, :]
    ok_up = (J + 1 < nv) & inside[I, np.minimum(J + 1, nv - 1)]
    ok_dn = (J - 1 >= 0) & inside[I, np.maximum(J - 1, 0)]
    ok_x = (ix >= 0) & (ix < nx) & inside[np.clip(ix, 0, nx - 1), J]
    return I, J, ix, ok_up, ok_dn, ok_x


def fills_domain(mask: DomainMask) -> bool:
    """Whether the mask is its whole product domain (boundary = box faces)."""
    return bool(mask.inside.all())


def node_stencil(
    mask: DomainMask,
    coeffs: CoefficientField,
    form: str = "divergence",
    report: AssumptionReport | None = None,
    mode: str = "layer",
) -> NodeStencil:
    """Assemble ``L_h`` for the mask's grid.

    ``form="divergence"`` matches the solver's flux stencil (used by lifts and
    Perron sweeps); ``form="nondivergence"`` uses ``a d_vv + b~ d_v`` with the
    corrected drift and backs the supersolution certificates.  ``mode="face"``
    needs a mask that fills its product domain.
    """
    grid = mask.grid
    if form == "nondivergence" and report is None:
        report = validate_assumptions(coeffs, grid.domain)
    if mode == "face" and not fills_domain(mask):
        raise ValueError("face mode needs a mask that fills its product domain")
    if mode not in ("layer", "face"):
        raise ValueError(f"unknown boundary mode {mode!r}")
    nx, nv = grid.shape
    idx = np.arange(nx * nv).reshape(nx, nv)
    I, J, ix, ok_up, ok_dn, ok_x = _neighbour_status(mask)
    inside = mask.inside
    gaps = None
    if mode == "face":
        d_lo, d_hi = grid.v_gap
        gaps = (
            np.where(ok_up, grid.hv, d_hi),
            np.where(ok_dn, grid.hv, d_lo),
            np.where(ok_x, grid.hx, grid.hx / 2),
        )
    c_up, c_dn, c_x = _coefficients(grid, coeffs, form, report, gaps)

    rows, cols, vals = [], [], []
    ghosts, axes = [], []
    n = nx * nv
    (xlo, xhi), = grid.domain.x_intervals
    (vlo, vhi), = grid.domain.v_intervals
    X, V = grid.mesh()
    for ok, nb, c, axis in (
        (ok_up, idx[I, np.minimum(J + 1, nv - 1)], c_up, 1),
        (ok_dn, idx[I, np.maximum(J - 1, 0)], c_dn, 1),
        (ok_x, idx[np.clip(ix, 0, nx - 1), J], c_x, 0),
    ):
        sel = inside & ok
        rows.append(idx[sel])
        cols.append(nb[sel])
        vals.append(c[sel])
        if mode == "face":
            miss = inside & ~ok
            k = np.count_nonzero(miss)
            rows.append(idx[miss])
            cols.append(n + len(ghosts) + np.arange(k))
            vals.append(c[miss])
            if axis == 1:
                vb = vhi if c is c_up else vlo
                pts = np.column_stack([X[miss], np.full(k, vb)])
            else:
                pts = np.column_stack([np.where(V[miss] > 0, xhi, xlo), V[miss]])
            ghosts.extend(map(tuple, pts))
            axes.extend([axis] * k)
    diag_sel = inside.ravel()
    rows.append(idx.ravel()[diag_sel])
    cols.append(idx.ravel()[diag_sel])
    vals.append(-(c_up + c_dn + c_x).ravel()[diag_sel])
    shape = (n, n + len(ghosts))
    L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape).tocsr()
    equation = inside.copy() if mode == "face" else inside & ok_up & ok_dn & ok_x
    return NodeStencil(
        grid, L, equation, form, mode,
        np.array(ghosts, dtype=float).reshape(-1, 2), np.array(axes, dtype=int),
    )


def apply_to_function(fn: Callable, grid: Grid, coeffs: CoefficientField, report: AssumptionReport | None = None) -> np.ndarray:
    """Nondivergence ``L_h fn`` at every node, reading ``fn`` at the neighbour coordinates.

    ``fn(x, v)`` takes arrays of node coordinates; no mask is involved because
    the neighbours of edge nodes are evaluated off the grid.
    """
    report = report or validate_assumptions(coeffs, grid.domain)
    c_up, c_dn, c_x = _coefficients(grid, coeffs, "nondivergence", report)
    X, V = grid.mesh()
    s = np.sign(V)
    f0 = fn(X, V)
    return c_up * (fn(X, V + grid.hv) - f0) + c_dn * (fn(X, V - grid.hv) - f0) + c_x * (fn(X + s * grid.hx, V) - f0)


# ---------------------------------------------------------------------------
# reachability


@dataclass(eq=False)
class ReachabilitySet:
    mask: np.ndarray  # reached nodes
    source: tuple
    touched: np.ndarray  # reached data-layer nodes
    exit_points: list  # boundary crossing points (x, v) along the missing edges

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def nearest_node(grid: Grid, x: float, v: float) -> tuple[int, int]:
    return int(np.argmin(np.abs(grid.x - x))), int(np.argmin(np.abs(grid.v - v)))


def compute_attainable_set(xi0, mask: DomainMask) -> ReachabilitySet:
    """Breadth-first closure of the source under velocity moves (both ways) and
    position moves in the direction of ``sign(v)``.

    ``xi0`` is a node index pair ``(i, j)`` or a point ``(x, v)`` snapped to
    the nearest node.  Data-layer nodes are reached but not expanded; for each
    one the crossing point with ``Omega``'s complement (midpoint of the
    missing edge) is recorded.

    Raises
    ------
    SourceOutside
        If the source node is not an equation node of the mask.
    """
    grid = mask.grid
    if all(isinstance(t, (int, np.integer)) for t in xi0):
        i0, j0 = int(xi0[0]), int(xi0[1])
    else:
        i0, j0 = nearest_node(grid, float(xi0[0]), float(xi0[1]))
    nx, nv = grid.shape
    inside = mask.inside
    # On product masks every inside node carries an equation (face mode), so
    # every one of them is expanded; elsewhere the data layer stops the search.
    st = inside if fills_domain(mask) else _structural_complete(mask)
    if not (0 <= i0 < nx and 0 <= j0 < nv) or not st[i0, j0]:
        raise SourceOutside(f"source node ({i0}, {j0}) is not an interior node of the mask")
    seen = np.zeros_like(inside)
    touched = np.zeros_like(inside)
    seen[i0, j0] = True
    queue = deque([(i0, j0)])
    exits = []
    while queue:
        i, j = queue.popleft()
        missing = _missing_edges(grid, inside, i, j)
        if missing:
            touched[i, j] = True
            exits.extend(missing)
        if not st[i, j]:
            continue
        s = 1 if grid.v[j] > 0 else -1
        for a, b in ((i, j + 1), (i, j - 1), (i + s, j)):
            if 0 <= a < nx and 0 <= b < nv and inside[a, b] and not seen[a, b]:
                seen[a, b] = True
                queue.append((a, b))
    return ReachabilitySet(seen, (i0, j0), touched, exits)


def _structural_complete(mask: DomainMask) -> np.ndarray:
    _, _, _, ok_up, ok_dn, ok_x = _neighbour_status(mask)
    return mask.inside & ok_up & ok_dn & ok_x


def _missing_edges(grid: Grid, inside, i, j) -> list:
    nx, nv = grid.shape
    s = 1 if grid.v[j] > 0 else -1
    out = []
    for a, b in ((i, j + 1), (i, j - 1), (i + s, j)):
        if not (0 <= a < nx and 0 <= b < nv) or not inside[a, b]:
            xa = grid.x[i] + (a - i) * grid.hx
            vb = grid.v[j] + (b - j) * grid.hv
            if b >= nv:
                vb = grid.domain.v_intervals[0][1]
            elif b < 0:
                vb = grid.domain.v_intervals[0][0]
            else:
                vb = 0.5 * (grid.v[j] + vb)
            out.append((0.5 * (grid.x[i] + xa), vb))
    return out


def touch_labels(reach: ReachabilitySet, domain: ProductDomain) -> list[BoundaryLabel]:
    """Boundary labels of the recorded crossing points of a product-domain mask."""
    return [classify_boundary([x], [v], domain, tol=1e-9) for x, v in reach.exit_points]


# ---------------------------------------------------------------------------
# supersolutions and explicit subsolutions


def check_supersolution(
    w: Field | np.ndarray,
    coeffs: CoefficientField,
    mask: DomainMask,
    report: AssumptionReport | None = None,
    stencil: NodeStencil | None = None,
) -> bool:
    """``L_h w <= 1e-8 ||w||_inf`` at every equation node, nondivergence form.

    Raises
    ------
    AssumptionViolated
        If the velocity derivatives of ``A`` are not validated.
    """
    values = w.values if isinstance(w, Field) else np.asarray(w, dtype=float)
    stencil = stencil or node_stencil(mask, coeffs, "nondivergence", report)
    Lw = stencil.apply(np.where(mask.inside, values, 0.0))
    scale = float(np.max(np.abs(values[mask.inside]))) if mask.count else 0.0
    return bool(np.all(Lw[stencil.complete] <= 1e-8 * scale))


@dataclass
class Polynomial:
    """``sum c * x^p * v^q`` over ``terms = {(p, q): c}`` (total degree at most 4)."""

    terms: dict

    def __post_init__(self):
        self.terms = {tuple(map(int, k)): float(c) for k, c in dict(self.terms).items()}
        for p, q in self.terms:
            if p < 0 or q < 0 or p + q > 4:
                raise ValueError(f"monomial x^{p} v^{q} outside total degree 4")

    def __call__(self, x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        out = np.zeros(np.broadcast_shapes(x.shape, v.shape))
        for (p, q), c in self.terms.items():
            out = out + c * x**p * v**q
        return out


@dataclass(eq=False)
class Subsolution:
    w: Field
    w_minus_u: Field
    delta: float
    c_hat: float
    q: float
    c0: float
    residual_w: np.ndarray
    residual_w_minus_u: np.ndarray


def make_exponential_subsolution(
    domain: ProductDomain,
    coeffs: CoefficientField,
    u_poly: Polynomial,
    nx: int = 32,
    nv: int = 32,
) -> Subsolution:
    """Find ``delta`` with ``L_h e^{delta v (x + q)} >= c0 > 0`` and then ``c_hat``
    with ``L_h (c_hat e^{...} - u_poly) >= 0`` at every node, both by doubling.

    Raises
    ------
    NoAdmissibleParameters
        If either search passes ``2^20``.
    """
    report = validate_assumptions(coeffs, domain)
    if not report.passed["dv_a_bounded"]:
        raise AssumptionViolated("exponential subsolution needs validated d_v A")
    grid = build_grid(domain, nx, nv)
    (xlo, _), = domain.x_intervals
    q = 1.0 - xlo  # x + q >= 1 on the closure
    delta = 1.0
    while True:
        phi = lambda x, v, d=delta: np.exp(d * v * (x + q))  # noqa: E731
        Lphi = apply_to_function(phi, grid, coeffs, report)
        if np.min(Lphi) > 0:
            break
        delta *= 2.0
        if delta > DELTA_CAP:
            raise NoAdmissibleParameters("no delta up to 2^20 makes the exponential a strict subsolution")
    c0 = float(np.min(Lphi))
    Lu = apply_to_function(u_poly, grid, coeffs, report)
    c_hat = 1.0
    while np.min(c_hat * Lphi - Lu) < 0:
        c_hat *= 2.0
        if c_hat > DELTA_CAP:
            raise NoAdmissibleParameters("no c_hat up to 2^20 dominates the polynomial")
    X, V = grid.mesh()
    wv = c_hat * phi(X, V)
    return Subsolution(
        w=Field(grid, wv),
        w_minus_u=Field(grid, wv - u_poly(X, V)),
        delta=delta,
        c_hat=c_hat,
        q=q,
        c0=c0,
        residual_w=c_hat * Lphi,
        residual_w_minus_u=c_hat * Lphi - Lu,
    )


# ---------------------------------------------------------------------------
# covers, lifts and Perron sweeps


@dataclass(eq=False)
class SubBox:
    i0: int
    i1: int
    j0: int
    j1: int
    nodes: np.ndarray  # flat indices of the updated nodes

    def contains(self, i, j) -> bool:
        return self.i0 <= i < self.i1 and self.j0 <= j < self.j1

    def as_domain(self, grid: Grid) -> ProductDomain:
        x = (grid.x[self.i0] - grid.hx / 2, grid.x[self.i1 - 1] + grid.hx / 2)
        v = (grid.v[self.j0] - grid.hv / 2, grid.v[self.j1 - 1] + grid.hv / 2)
        return ProductDomain.box(x, v)


@dataclass(eq=False)
class CylinderCover:
    boxes: list
    mask: DomainMask

    def covered(self) -> np.ndarray:
        out = np.zeros(self.mask.grid.shape, dtype=bool)
        for b in self.boxes:
            out.ravel()[b.nodes] = True
        return out


def make_cover(mask: DomainMask, stencil: NodeStencil | None = None, fraction: float = 0.125) -> CylinderCover:
    """Grid-aligned boxes of side about ``fraction`` of each axis, half-overlapping,
    kept when every node lies in the interior (equation) set; leftover
    equation nodes get short velocity-line boxes.  Boxes are in sweep order.
    """
    grid = mask.grid
    nx, nv = grid.shape
    eq = _structural_complete(mask) if stencil is None else stencil.complete
    sx = max(2, int(round(nx * fraction)))
    sv = max(2, int(round(nv * fraction)))
    idx = np.arange(nx * nv).reshape(nx, nv)
    boxes = []
    covered = np.zeros((nx, nv), dtype=bool)
    starts_x = sorted(set(list(range(0, max(1, nx - sx + 1), max(1, sx // 2))) + [max(0, nx - sx)]))
    starts_v = sorted(set(list(range(0, max(1, nv - sv + 1), max(1, sv // 2))) + [max(0, nv - sv)]))
    for i0 in starts_x:
        for j0 in starts_v:
            blk = eq[i0 : i0 + sx, j0 : j0 + sv]
            if blk.size and blk.all():
                boxes.append(SubBox(i0, i0 + sx, j0, j0 + sv, idx[i0 : i0 + sx, j0 : j0 + sv].ravel()))
                covered[i0 : i0 + sx, j0 : j0 + sv] = True
    for i, j in zip(*np.nonzero(eq & ~covered)):
        if covered[i, j]:
            continue
        lo = j
        while lo - 1 >= max(0, j - sv // 2) and eq[i, lo - 1]:
            lo -= 1
        hi = j + 1
        while hi < min(nv, j + sv // 2 + 1) and eq[i, hi]:
            hi += 1
        boxes.append(SubBox(i, i + 1, lo, hi, idx[i, lo:hi].copy()))
        covered[i, lo:hi] = True
    boxes.sort(key=lambda b: (b.i0, b.j0))
    return CylinderCover(boxes, mask)


class _Lifter:
    """Pre-factorized sub-box solves of ``L_h u = 0`` with exterior values as data."""

    def __init__(self, stencil: NodeStencil, cover: CylinderCover):
        self.stencil = stencil
        self.cover = cover
        L = stencil.L.tocsr()
        self._blocks = []
        for box in cover.boxes:
            rows = L[box.nodes]
            inner = rows[:, box.nodes].tocsc()
            outer_mask = np.ones(L.shape[1], dtype=bool)
            outer_mask[box.nodes] = False
            outer_cols = np.nonzero(outer_mask)[0]
            ext = rows[:, outer_cols].tocsr()
            used = np.unique(ext.indices)
            self._blocks.append((box.nodes, spla.splu(-inner), ext[:, used], outer_cols[used]))

    def lift(self, U: np.ndarray, k: int) -> None:
        nodes, lu, ext, cols = self._blocks[k]
        U[nodes] = lu.solve(ext @ U[cols])


def harmonic_lift(U: Field, box: SubBox, mask: DomainMask, coeffs: CoefficientField, stencil: NodeStencil | None = None) -> Field:
    """Replace ``U`` inside the sub-box by the solution of ``L_h u = 0`` there,
    with the values of ``U`` around the box as data.  ``U`` elsewhere is unchanged.
    """
    stencil = stencil or node_stencil(mask, coeffs, "divergence")
    if not stencil.complete.ravel()[box.nodes].all():
        raise ValueError("sub-box must lie in the interior of the mask")
    lifter = _Lifter(stencil, CylinderCover([box], mask))
    n = U.grid.nx * U.grid.nv
    out = np.concatenate([np.nan_to_num(np.array(U.values, dtype=float).ravel()), np.zeros(stencil.n_ghosts)])
    lifter.lift(out, 0)
    return Field(U.grid, out[:n].reshape(U.grid.shape))


def boundary_envelope(mask: DomainMask, g: Callable, direction: str, samples: int = 5, stencil=None) -> np.ndarray:
    """Data on the data layer: sup (upper) or inf (lower) of ``g`` near the boundary.

    For each data-layer node and each missing needed edge, ``g`` is sampled
    along a segment of one cell width through the crossing point (the edge
    midpoint, or the grid face for edges leaving the grid), across the edge.
    """
    grid = mask.grid
    nx, nv = grid.shape
    eq = _structural_complete(mask) if stencil is None else stencil.complete
    data = mask.inside & ~eq
    _, _, _, ok_up, ok_dn, ok_x = _neighbour_status(mask)
    X, V = grid.mesh()
    (vlo, vhi), = grid.domain.v_intervals
    J = np.broadcast_to(np.arange(nv), (nx, nv))
    s = np.sign(V)
    t = np.linspace(-0.5, 0.5, samples)
    pick = np.maximum if direction == "upper" else np.minimum
    env = np.full(grid.shape, -np.inf if direction == "upper" else np.inf)
    v_up = np.where(J + 1 < nv, V + grid.hv / 2, vhi)
    v_dn = np.where(J > 0, V - grid.hv / 2, vlo)
    for miss, px, pv, along_x in (
        (~ok_up, X, v_up, True),
        (~ok_dn, X, v_dn, True),
        (~ok_x, X + s * grid.hx / 2, V, False),
    ):
        sel = data & miss
        if not sel.any():
            continue
        for a in t:
            vals = g(px[sel] + (a * grid.hx if along_x else 0.0), pv[sel] + (0.0 if along_x else a * grid.hv))
            env[sel] = pick(env[sel], vals)
    return np.where(data, env, np.nan)


def ghost_envelope(stencil: NodeStencil, g: Callable, direction: str, samples: int = 5) -> np.ndarray:
    """Ghost data in face mode: sup (upper) or inf (lower) of ``g`` over the
    face segment of one cell width centred at each crossing point."""
    if not stencil.n_ghosts:
        return np.zeros(0)
    grid = stencil.grid
    P = stencil.ghost_points
    along_x = stencil.ghost_axis == 1  # velocity faces extend in x
    t = np.linspace(-0.5, 0.5, samples)
    vals = np.stack(
        [
            np.broadcast_to(
                np.asarray(g(P[:, 0] + np.where(along_x, a * grid.hx, 0.0), P[:, 1] + np.where(along_x, 0.0, a * grid.hv)), dtype=float),
                P[:, 0].shape,
            )
            for a in t
        ]
    )
    return vals.max(axis=0) if direction == "upper" else vals.min(axis=0)


@dataclass(eq=False)
class PerronResult:
    field: Field
    history: list
    sweeps: int
    converged: bool
    mask: DomainMask
    direction: str
    monotone_violations: int = 0
    data: np.ndarray | None = None
    ghost_data: np.ndarray | None = None
    mode: str = "layer"


def boundary_mode(mask: DomainMask, boundary: str = "auto") -> str:
    """``face`` for masks filling a product domain under ``auto``, else ``layer``."""
    if boundary == "auto":
        return "face" if fills_domain(mask) else "layer"
    if boundary not in ("face", "layer"):
        raise ValueError(f"unknown boundary treatment {boundary!r}")
    return boundary


def perron_iterate(
    mask: DomainMask,
    g: Callable,
    coeffs: CoefficientField,
    direction: str = "upper",
    cover: CylinderCover | None = None,
    max_sweeps: int = 5000,
    tol: float = CHANGE_TOL,
    raise_on_failure: bool = True,
    boundary: str = "auto",
) -> PerronResult:
    """Upper (or lower) Perron iterate by sweeps of harmonic lifts.

    Upper: the data carry the supremum of ``g`` over one cell around each
    data location (data-layer nodes, or face crossing points when the mask
    fills a product domain) and the interior starts at ``sup g``, a discrete
    supersolution; each sweep lifts every cover box in order.  The iterate is
    pointwise non-increasing (checked every sweep) and stops when no node
    moves by more than ``tol``.  Lower runs the upper iteration on ``-g`` and
    negates.

    Raises
    ------
    NotConverged
        After ``max_sweeps`` sweeps, carrying the last iterate and the history.
    """
    if direction == "lower":
        res = perron_iterate(
            mask, lambda x, v: -np.asarray(g(x, v)), coeffs, "upper", cover, max_sweeps, tol, raise_on_failure, boundary
        )
        res.field = Field(mask.grid, -res.field.values)
        res.direction = "lower"
        res.data = -res.data
        res.ghost_data = -res.ghost_data
        return res
    if direction != "upper":
        raise ValueError("direction must be 'upper' or 'lower'")
    mode = boundary_mode(mask, boundary)
    stencil = node_stencil(mask, coeffs, "divergence", mode=mode)
    cover = cover or make_cover(mask, stencil)
    data = boundary_envelope(mask, g, "upper", stencil=stencil)
    ghosts = ghost_envelope(stencil, g, "upper")
    top = float(max(np.nanmax(data) if np.isfinite(data).any() else -np.inf, ghosts.max() if ghosts.size else -np.inf))
    U = np.where(stencil.complete, top, np.where(mask.inside, data, 0.0)).ravel()
    U = np.concatenate([U, ghosts])
    n = mask.grid.nx * mask.grid.nv
    lifter = _Lifter(stencil, cover)
    history = []
    violations = 0
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        before = U.copy()
        for k in range(len(cover.boxes)):
            lifter.lift(U, k)
        diff = U - before
        if np.max(diff) > MONOTONE_TOL * max(1.0, abs(top)):
            violations += 1
        change = float(np.max(np.abs(diff)))
        history.append(change)
        if change < tol:
            converged = True
            break
    out = np.where(mask.inside, U[:n].reshape(mask.grid.shape), np.nan)
    res = PerronResult(Field(mask.grid, out), history, sweeps, converged, mask, "upper", violations, data, ghosts, mode)
    if not converged and raise_on_failure:
        raise NotConverged(f"Perron sweeps did not settle below {tol:g} in {max_sweeps} sweeps", history, res)
    return res


def solve_masked_dirichlet(
    mask: DomainMask,
    data: np.ndarray,
    coeffs: CoefficientField,
    form: str = "divergence",
    ghost_data: np.ndarray | None = None,
) -> Field:
    """Direct solve of ``L_h u = 0`` on the equation nodes.

    ``data`` holds the data-layer values (layer mode); passing ``ghost_data``
    switches to face mode with those values at the crossing points.
    """
    mode = "layer" if ghost_data is None else "face"
    stencil = node_stencil(mask, coeffs, form, mode=mode)
    n = mask.grid.nx * mask.grid.nv
    eq = stencil.complete.ravel()
    dl = (mask.inside & ~stencil.complete).ravel()
    L = stencil.L.tocsr()
    full = np.nan_to_num(np.where(dl, np.asarray(data, float).ravel(), 0.0))
    ext = np.concatenate([np.where(eq, 0.0, full), np.zeros(0) if ghost_data is None else np.asarray(ghost_data, float)])
    e = np.nonzero(eq)[0]
    if e.size:
        A = L[e][:, e].tocsc()
        full[e] = spla.spsolve(-A, L[e] @ ext)
    return Field(mask.grid, np.where(mask.inside, full[:n].reshape(mask.grid.shape), np.nan))


def resolutivity_gap(upper, lower) -> float:
    """``sup (upper - lower)`` over the inside nodes.

    Raises
    ------
    MaskMismatch
        If the two iterates live on different masks.
    """
    if isinstance(upper, PerronResult) and isinstance(lower, PerronResult):
        if upper.mask.grid.shape != lower.mask.grid.shape or not np.array_equal(upper.mask.inside, lower.mask.inside):
            raise MaskMismatch("upper and lower iterates use different masks")
        inside = upper.mask.inside
        u, lo = upper.field.values, lower.field.values
    else:
        u = upper.values if isinstance(upper, Field) else np.asarray(upper)
        lo = lower.values if isinstance(lower, Field) else np.asarray(lower)
        if u.shape != lo.shape:
            raise MaskMismatch("fields have different shapes")
        inside = np.isfinite(u) & np.isfinite(lo)
    return float(np.max((u - lo)[inside])) if inside.any() else 0.0


# ---------------------------------------------------------------------------
# barriers and regularity


@dataclass(eq=False)
class Barrier:
    center: tuple
    delta: float
    normal: np.ndarray
    values: Field
    label: BoundaryLabel
    method: str
    radius: float
    level: float
    value_at_center: float = 0.0


def estimate_normal(mask: DomainMask, xi0) -> np.ndarray:
    """Outward unit normal at a boundary point from the inside nodes around it."""
    grid = mask.grid
    X, V = grid.mesh()
    d = np.stack([X - xi0[0], V - xi0[1]])
    r = np.hypot(*d)
    near = mask.inside & (r < 4 * grid.h)
    if not near.any():
        raise ValueError("no inside nodes near the boundary point")
    m = -d[:, near].mean(axis=1)
    return m / np.linalg.norm(m)


def mask_label(normal: np.ndarray, xi0, tol: float = 1e-9) -> BoundaryLabel:
    """Boundary label at a point of a general boundary with the given outward normal."""
    n_x, n_v = float(normal[0]), float(normal[1])
    if abs(n_v) > tol:
        return BoundaryLabel.V
    flux = float(xi0[1]) * n_x
    if abs(flux) <= tol:
        return BoundaryLabel.XZERO
    return BoundaryLabel.XPLUS if flux > 0 else BoundaryLabel.XMINUS


def _localize(values: np.ndarray, mask: DomainMask, xi0, radius: float) -> tuple[np.ndarray, float]:
    """``min(w, m)`` inside the ball of ``radius`` and ``m`` outside, with ``m`` the
    minimum of ``w`` over a shell of width ``2h`` just outside the ball."""
    grid = mask.grid
    X, V = grid.mesh()
    r = np.hypot(X - xi0[0], V - xi0[1])
    shell = mask.inside & (r >= radius) & (r <= radius + 2 * grid.h) & np.isfinite(values)
    m = float(np.min(values[shell]))
    inner = mask.inside & (r < radius)
    out = np.where(inner, np.minimum(values, m), m)
    return np.where(mask.inside, out, np.nan), m


def _formula_barrier(X, V, xi0, n, delta):
    """``1 - exp(-delta (|xi - xi0 - n|^2 - |n|^2))``, the exterior-ball barrier
    scaled by ``exp(delta |n|^2)`` so that large ``delta`` stays representable."""
    q = (X - xi0[0] - n[0]) ** 2 + (V - xi0[1] - n[1]) ** 2 - (n[0] ** 2 + n[1] ** 2)
    return -np.expm1(-delta * q)


def make_barrier(
    xi0,
    mask: DomainMask,
    coeffs: CoefficientField,
    normal: np.ndarray | None = None,
    radius: float | None = None,
    report: AssumptionReport | None = None,
) -> Barrier:
    """Barrier at a boundary point of the mask, certified by :func:`check_supersolution`.

    On velocity and data-side points the exterior-ball formula is used with
    ``delta`` doubled from 1.  On points with ``v . n_x = 0`` a product
    cylinder tangent to ``Omega`` at ``xi0`` is placed on the inner side and
    the barrier is the discrete ``K``-harmonic function there with the
    exterior-ball formula as data; it vanishes at ``xi0`` and is positive
    inside.  In both cases the function is localized as ``min(w, m)``.

    Raises
    ------
    NoAdmissibleDelta
        When no ``delta`` up to ``2^20`` yields a certified supersolution.
    """
    grid = mask.grid
    xi0 = (float(xi0[0]), float(xi0[1]))
    n = estimate_normal(mask, xi0) if normal is None else np.asarray(normal, float) / np.linalg.norm(normal)
    label = mask_label(n, xi0)
    if label is BoundaryLabel.XMINUS:
        raise NoAdmissibleDelta("no barrier is attempted on the outflow part of the boundary")
    report = report or validate_assumptions(coeffs, grid.domain)
    if not report.passed["dv_a_bounded"]:
        raise AssumptionViolated("barrier construction needs validated d_v A")
    stencil = node_stencil(mask, coeffs, "nondivergence", report)
    diam = max(grid.domain.x_intervals[0][1] - grid.domain.x_intervals[0][0], grid.domain.v_intervals[0][1] - grid.domain.v_intervals[0][0])
    radius = 0.25 * diam if radius is None else radius
    X, V = grid.mesh()
    delta = 1.0
    while delta <= DELTA_CAP:
        if label is BoundaryLabel.XZERO:
            w = _cylinder_barrier(mask, coeffs, xi0, n, delta, radius)
        else:
            w = _formula_barrier(X, V, xi0, n, delta)
        local, m = _localize(w, mask, xi0, radius)
        if m > 0 and check_supersolution(local, coeffs, mask, report, stencil):
            method = "cylinder" if label is BoundaryLabel.XZERO else "formula"
            return Barrier(xi0, delta, n, Field(grid, local), label, method, radius, m, 0.0)
        delta *= 2.0
    raise NoAdmissibleDelta(f"no delta up to 2^20 certified a barrier at {xi0}")


def _cylinder_barrier(mask: DomainMask, coeffs, xi0, n, delta, radius):
    """K-harmonic function on the tangent cylinder ``{(x, v): x n_x < x0 n_x, |v - v0| < R}``."""
    grid = mask.grid
    X, V = grid.mesh()
    side = np.sign(n[0]) if n[0] != 0 else 1.0
    reach = radius + 4 * grid.h
    xs = (xi0[0] - reach, xi0[0]) if side > 0 else (xi0[0], xi0[0] + reach)
    vs = (xi0[1] - reach, xi0[1] + reach)
    cyl_inside = (X > xs[0]) & (X < xs[1]) & (V > vs[0]) & (V < vs[1])
    cyl = DomainMask(grid, cyl_inside, name="cylinder")
    data = _formula_barrier(X, V, xi0, n, delta)
    u = solve_masked_dirichlet(cyl, data, coeffs, "nondivergence").values
    return np.where(cyl_inside, u, np.inf)


@dataclass
class RegularityProbe:
    center: tuple
    label: str
    barrier_found: bool
    barrier_method: str | None
    delta: float | None
    discrepancy_4h: list = field(default_factory=list)
    discrepancy_2h: list = field(default_factory=list)
    note: str = ""

    @property
    def decays(self) -> bool:
        return all(d2 <= d4 for d2, d4 in zip(self.discrepancy_2h, self.discrepancy_4h))

    @property
    def strictly_decays(self) -> bool:
        return all(d2 < d4 or d4 == 0.0 for d2, d4 in zip(self.discrepancy_2h, self.discrepancy_4h))


def boundary_discrepancy(U: Field, mask: DomainMask, xi0, value: float, r: float) -> float:
    X, V = mask.grid.mesh()
    near = mask.inside & (np.hypot(X - xi0[0], V - xi0[1]) <= r)
    if not near.any():
        return float("nan")
    return float(np.max(np.abs(U.values[near] - value)))


def probe_regularity(
    mask: DomainMask,
    xi0,
    g_family: Sequence[Callable],
    coeffs: CoefficientField,
    uppers: Sequence[PerronResult] | None = None,
    normal: np.ndarray | None = None,
) -> RegularityProbe:
    """Barrier attempt at ``xi0`` plus the boundary discrepancy of the upper Perron
    iterate at radii ``4h`` and ``2h`` for each datum in ``g_family``.

    ``uppers`` may supply precomputed upper iterates (one per datum) so that
    several boundary points share the sweeps.
    """
    xi0 = (float(xi0[0]), float(xi0[1]))
    n = estimate_normal(mask, xi0) if normal is None else np.asarray(normal, float)
    label = mask_label(n, xi0)
    probe = RegularityProbe(xi0, label.value, False, None, None)
    if label is BoundaryLabel.XMINUS:
        probe.note = "outflow point: no data prescribed, no barrier attempted"
    else:
        try:
            b = make_barrier(xi0, mask, coeffs, normal=n)
            probe.barrier_found, probe.barrier_method, probe.delta = True, b.method, b.delta
        except NoAdmissibleDelta as exc:
            probe.note = str(exc)
    h = mask.grid.h
    for k, g in enumerate(g_family):
        U = uppers[k] if uppers is not None else perron_iterate(mask, g, coeffs, "upper")
        g0 = float(np.asarray(g(np.array(xi0[0]), np.array(xi0[1]))))
        probe.discrepancy_4h.append(boundary_discrepancy(U.field, mask, xi0, g0, 4 * h))
        probe.discrepancy_2h.append(boundary_discrepancy(U.field, mask, xi0, g0, 2 * h))
    return probe
