"""Executable certificates: maximum principles, comparison, Poincare constant, energy and Green audits."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import NotConverged, PreconditionViolated, TooCoarse
from .fdm import (
    Field,
    ProblemData,
    SparseOperator,
    TraceFunction,
    check_green_identity,
    discrete_norms,
    grad_v_sq,
    grad_x_sq,
    velocity_nodes,
)
from .geometry import ProductDomain
from .krylov import solve_sparse

EXACT_SLACK = 1e-8
CONTINUUM_SLACK = 0.05


@dataclass
class Verdict:
    """``passed`` iff ``lhs <= rhs + slack`` and every sub-verdict passed."""

    name: str
    lhs: float
    rhs: float
    slack: float
    context: dict = field(default_factory=dict)
    parts: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.lhs <= self.rhs + self.slack) and all(p.passed for p in self.parts)

    @classmethod
    def all_of(cls, name: str, parts: list, context: dict | None = None) -> "Verdict":
        """Combine sub-verdicts in margin form: ``lhs`` is the worst ``lhs - rhs - slack``."""
        worst = max(p.lhs - p.rhs - p.slack for p in parts)
        return cls(name, float(worst), 0.0, 0.0, context or {}, list(parts))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        out["parts"] = [p.to_dict() for p in self.parts]
        return out

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: lhs={self.lhs:.6g} rhs={self.rhs:.6g} slack={self.slack:.3g}"


def data_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()[:16]


def _velocity_axes(domain) -> list:
    if isinstance(domain, ProductDomain):
        return list(domain.v_intervals)
    domain = tuple(domain)
    if len(domain) == 2 and all(np.isscalar(t) for t in domain):
        return [tuple(domain)]
    return [tuple(t) for t in domain]


def dirichlet_laplacian_1d(lo: float, hi: float, nv: int) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and off-diagonal of ``-d^2/dv^2`` on the solver's velocity nodes."""
    _, hv, (d_lo, d_hi), _ = velocity_nodes(lo, hi, nv)
    diag = np.full(nv, 2.0 / hv**2)
    diag[0] = (1.0 / hv + 1.0 / d_lo) / hv
    diag[-1] = (1.0 / hv + 1.0 / d_hi) / hv
    return diag, np.full(nv - 1, -1.0 / hv**2)


def smallest_eigenvalue_1d(lo: float, hi: float, nv: int, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Inverse power iteration with a banded Cholesky factorization."""
    diag, off = dirichlet_laplacian_1d(lo, hi, nv)
    ab = np.zeros((2, nv))
    ab[0, 1:] = off
    ab[1] = diag
    chol = sla.cholesky_banded(ab)
    x = np.ones(nv) / np.sqrt(nv)
    lam = np.inf
    for _ in range(max_iter):
        y = sla.cho_solve_banded((chol, False), x)
        x_new = y / np.linalg.norm(y)
        Ax = diag * x_new
        Ax[:-1] += off * x_new[1:]
        Ax[1:] += off * x_new[:-1]
        lam_new = float(x_new @ Ax)
        if abs(lam_new - lam) <= tol * lam_new:
            return lam_new
        x, lam = x_new, lam_new
    raise NotConverged(f"inverse power iteration did not settle in {max_iter} steps")


def estimate_poincare_constant(domain, nv: int) -> float:
    """``1/sqrt(lambda_1)`` of the discrete Dirichlet Laplacian on the velocity box.

    ``domain`` is a :class:`ProductDomain`, a single ``(lo, hi)`` pair, or a
    list of pairs; on a box the first eigenvalue is the sum over axes.
    """
    if nv < 8:
        raise TooCoarse(f"need nv >= 8 for the Poincare estimate, got {nv}")
    lam = sum(smallest_eigenvalue_1d(lo, hi, nv) for lo, hi in _velocity_axes(domain))
    return float(1.0 / np.sqrt(lam))


def _hyp_values(g, grid=None) -> np.ndarray:
    if isinstance(g, ProblemData):
        return g.hyp_values(grid)
    return np.asarray(g, dtype=float).ravel()


def check_weak_max_principle(u: Field, gamma: TraceFunction, g) -> Verdict:
    """``sup_{outflow} |u_Gamma| <= sup |u| <= sup_{hyp} |g|`` with slack ``1e-8 (1 + sup|g|)``.

    ``g`` is either the :class:`ProblemData` of the producing problem or the
    array of data values on hypoelliptic boundary nodes.
    """
    gv = _hyp_values(g, u.grid)
    g_sup = float(np.max(np.abs(gv))) if gv.size else 0.0
    u_sup = float(np.max(np.abs(u.values)))
    out = gamma.on("Xminus")
    t_sup = float(np.max(np.abs(out))) if out.size else 0.0
    slack = EXACT_SLACK * (1.0 + g_sup)
    ctx = {"grid": list(u.grid.shape), "data_hash": data_hash(gv)}
    return Verdict.all_of(
        "weak_max_principle",
        [Verdict("trace_by_interior", t_sup, u_sup, slack), Verdict("interior_by_data", u_sup, g_sup, slack)],
        ctx,
    )


def check_eps_max_principle(op: SparseOperator, u: Field, trace: TraceFunction) -> Verdict:
    """One-sided bounds for ``f = 0``: ``sup_{x faces} Tr <= sup u <= sup_{hyp} g_+``.

    The middle supremum runs over all unknowns, cells and traces alike: on the
    data face the trace is a separate unknown sitting between the adjacent
    cell value and ``g2``.
    """
    g_plus = max(0.0, float(np.max(op.data.hyp_values(op.grid))))
    tr = np.concatenate([trace.left, trace.right])
    u_sup = max(float(u.values.max()), float(tr.max()))
    slack = EXACT_SLACK * (1.0 + g_plus)
    return Verdict.all_of(
        "eps_max_principle",
        [Verdict("trace", float(tr.max()), u_sup, slack), Verdict("interior", u_sup, g_plus, slack)],
        {"eps": op.eps, "grid": list(op.grid.shape)},
    )


def check_comparison(spec_low, spec_high, eps: float = 0.0, strict: bool = True) -> Verdict:
    """Solve both problems with one shared matrix and compare the solutions node by node.

    Raises
    ------
    PreconditionViolated
        When ``strict`` and the sources or the hypoelliptic data are not ordered.
    """
    op_low = spec_low.operator(eps)
    data_high = spec_high.operator(eps).data if spec_high.data is None else spec_high.data
    if spec_high.grid.shape != spec_low.grid.shape:
        raise PreconditionViolated("comparison needs a shared grid")
    op_high = op_low.with_data(data_high)
    grid = op_low.grid
    df = float(np.min(op_high.data.f - op_low.data.f))
    dg = float(np.min(op_high.data.hyp_values(grid) - op_low.data.hyp_values(grid)))
    if strict and (df < 0 or dg < 0):
        raise PreconditionViolated(f"data not ordered: min(f_high - f_low)={df:.3e}, min(g_high - g_low)={dg:.3e}")
    u_lo, t_lo = op_low.split(solve_sparse(op_low, spec_low.settings).x)
    u_hi, t_hi = op_high.split(solve_sparse(op_high, spec_low.settings).x)
    interior = float(np.max(u_lo.values - u_hi.values))
    minus = t_lo.on("Xminus") - t_hi.on("Xminus")
    outflow = float(np.max(minus)) if minus.size else -np.inf
    return Verdict.all_of(
        "comparison",
        [Verdict("interior", interior, 0.0, EXACT_SLACK), Verdict("outflow_trace", outflow, 0.0, EXACT_SLACK)],
        {"eps": eps, "grid": list(grid.shape), "min_f_gap": df, "min_g_gap": dg},
    )


def energy_sides(op: SparseOperator, u: Field, trace: TraceFunction, lam: float, c_p: float) -> tuple[float, float]:
    """Both sides of the a priori energy bound for ``u_eps`` with ``g1 = 0``."""
    g = op.grid
    zero = np.zeros(g.nx)
    lhs = (
        op.eps * grad_x_sq(u, trace)
        + lam / 4.0 * grad_v_sq(u, zero, zero)
        + lam / (8.0 * c_p) * float(np.sum(u.values**2)) * g.cell_volume
        + 0.25 * discrete_norms(u, trace).trace_weighted
    )
    vn_l, vn_r = -g.v, g.v
    inflow = np.sum(np.maximum(vn_l, 0) * op.data.g2_left**2 + np.maximum(vn_r, 0) * op.data.g2_right**2) * g.hv
    rhs = 2.0 * c_p / lam * float(np.sum(op.data.f**2)) * g.cell_volume + float(inflow)
    return float(lhs), float(rhs)


def audit_energy(op: SparseOperator, u: Field, trace: TraceFunction, lam: float, c_p: float) -> Verdict:
    """Energy inequality for a solution of ``op`` with 5% relative slack.

    Raises
    ------
    PreconditionViolated
        If the velocity-face data ``g1`` is not identically zero.
    """
    if np.any(op.data.g1_lo != 0) or np.any(op.data.g1_hi != 0):
        raise PreconditionViolated("the energy audit needs g1 = 0")
    lhs, rhs = energy_sides(op, u, trace, lam, c_p)
    return Verdict("energy", lhs, rhs, CONTINUUM_SLACK * rhs, {"eps": op.eps, "grid": list(op.grid.shape), "C_P": c_p, "lambda": lam})


def audit_green(op: SparseOperator, u: Field, trace: TraceFunction, phis) -> Verdict:
    """Worst Green-identity defect over test vectors, relative to ``||phi||``."""
    parts = []
    for phi in phis:
        phi = np.asarray(phi, dtype=float)
        parts.append(Verdict("green", check_green_identity(op, u, trace, phi), 0.0, EXACT_SLACK * float(np.linalg.norm(phi))))
    return Verdict.all_of("green_identity", parts, {"eps": op.eps, "grid": list(op.grid.shape), "tests": len(parts)})
