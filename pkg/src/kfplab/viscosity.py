"""The vanishing-viscosity sequence ``eps_k = 1/k^2`` and the weak-solution pair it produces.

At a fixed grid ``u_eps`` is a rational function of ``eps`` whose poles sit on
the negative axis at distance ``O(h^2)`` from the origin.  Consecutive
increments decay like ``k^-3`` while the distance to the limit decays like
``k^-2``, so the last iterate of a run stopped on increments is still
``O(k * increment)`` away from the limit.  The terminal pair is therefore
taken from a quadratic extrapolation in ``eps`` through the iterates
``k/2, 3k/4, k`` of the same sequence; the raw last iterate is kept in the
report for comparison.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .coefficients import AssumptionReport, CoefficientField, validate_assumptions
from .errors import AssumptionViolated, NoProgress
from .fdm import Field, Grid, ProblemData, SparseOperator, TraceFunction, assemble, build_grid, discrete_norms, grad_x_sq
from .geometry import ProductDomain
from .krylov import SolveResult, SolverSettings, solve_sparse

STAGNATION_WINDOW = 5


@dataclass(eq=False)
class ProblemSpec:
    """Domain, coefficients with data, resolution and solver settings.

    Construction validates the standing assumptions; a failing divergence
    condition on ``b`` is fatal.
    """

    domain: ProductDomain
    coeffs: CoefficientField
    nx: int = 64
    nv: int = 64
    settings: SolverSettings = field(default_factory=lambda: SolverSettings(method="direct"))
    data: ProblemData | None = None
    report: AssumptionReport | None = None

    def __post_init__(self):
        if self.report is None:
            self.report = validate_assumptions(self.coeffs, self.domain)
        if not self.report.passed["posdiv"]:
            raise AssumptionViolated(f"div_v b must be nonnegative, min sample {self.report.min_div_v_b:.3e}")
        if not self.report.passed["ellipticity"]:
            raise AssumptionViolated(f"A is not uniformly elliptic, lambda estimate {self.report.lambda_est:.3e}")
        self.grid: Grid = build_grid(self.domain, self.nx, self.nv)

    def operator(self, eps: float) -> SparseOperator:
        return assemble(self.grid, self.coeffs, eps, self.data)

    def data_sup(self) -> float:
        op_data = self.operator(0.0).data
        return float(np.max(np.abs(op_data.hyp_values(self.grid))))

    def default_stop_tol(self) -> float:
        return 1e-7 * (1.0 + self.data_sup())


def _solve(spec: ProblemSpec, eps: float, x0=None) -> tuple[SparseOperator, SolveResult]:
    op = spec.operator(eps)
    return op, solve_sparse(op, spec.settings, x0=x0)


def solve_regularized(spec: ProblemSpec, eps: float) -> tuple[Field, TraceFunction]:
    """``u_eps`` and its trace on the position faces for one ``eps > 0``."""
    if not eps > 0:
        raise ValueError("eps must be positive; use solve_direct for eps = 0")
    op, res = _solve(spec, eps)
    return op.split(res.x)


def solve_direct(spec: ProblemSpec) -> tuple[Field, TraceFunction]:
    """The ``eps = 0`` system solved directly (upwind transport plus v diffusion)."""
    op, res = _solve(spec, 0.0)
    return op.split(res.x)


def l2h1v(u: Field) -> float:
    return discrete_norms(u).l2_h1v


@dataclass
class StepRecord:
    k: int
    eps: float
    norm_l2h1v: float
    sqrt_eps_grad_x: float
    iterations: int
    increment: float | None = None
    trace_increment: float | None = None


@dataclass
class ViscosityReport:
    records: list
    stop_tol: float
    stopped_at: int
    stop_reason: str
    extrapolation_nodes: tuple
    extrapolation_spread: float
    raw_last_distance: float
    terminal_norm_l2h1v: float
    xplus_discrepancy: float
    limit_trace_increment: float
    direct_distance: float | None = None
    direct_check_passed: bool | None = None

    def increments(self) -> dict:
        return {r.k: r.increment for r in self.records if r.increment is not None}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["extrapolation_nodes"] = list(self.extrapolation_nodes)
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _neville_at_zero(eps: list, values: list) -> np.ndarray:
    """Value at ``eps = 0`` of the polynomial through ``(eps_i, values_i)``."""
    P = [np.array(v, dtype=float) for v in values]
    m = len(P)
    for j in range(1, m):
        for i in range(m - 1, j - 1, -1):
            P[i] = (eps[i - j] * P[i] - eps[i] * P[i - 1]) / (eps[i - j] - eps[i])
    return P[-1]


def extrapolation_nodes(k: int) -> tuple[int, ...]:
    nodes = sorted({max(1, k // 2), max(1, (3 * k) // 4), k})
    return tuple(nodes)


def run_viscosity_sequence(
    spec: ProblemSpec,
    k_max: int = 64,
    stop_tol: float | None = None,
    cross_check: bool = True,
) -> tuple[Field, TraceFunction, ViscosityReport]:
    """Solve for ``eps_k = 1/k^2``, ``k = 1, 2, ...`` until the ``L^2 H^1_v``
    increment drops below ``stop_tol`` or ``k_max`` is reached.

    Each solve is warm-started from the previous iterate.  The returned pair
    is the extrapolated limit; ``u_Gamma`` equals ``g2`` on the data part of
    the position boundary and the limiting trace on the outflow part.

    Raises
    ------
    NoProgress
        If the increment fails to decrease for five consecutive ``k`` while
        still above ``stop_tol``.
    """
    if k_max < 2:
        raise ValueError("k_max must be at least 2")
    stop_tol = spec.default_stop_tol() if stop_tol is None else float(stop_tol)
    grid = spec.grid
    records: list[StepRecord] = []
    kept: dict[int, np.ndarray] = {}
    prev_x = None
    prev_u = prev_t = None
    rising = 0
    stop_reason = "k_max"
    op = None
    for k in range(1, k_max + 1):
        eps = 1.0 / (k * k)
        op, res = _solve(spec, eps, prev_x)
        u, tr = op.split(res.x)
        records.append(
            StepRecord(k, eps, l2h1v(u), math.sqrt(eps * grad_x_sq(u, tr)), res.iterations)
        )
        kept[k] = res.x
        for j in [j for j in kept if j < k // 2]:
            del kept[j]
        if prev_u is not None:
            inc = l2h1v(Field(grid, u.values - prev_u.values))
            t_inc = float(np.max(np.abs(np.concatenate([tr.left - prev_t.left, tr.right - prev_t.right]))))
            records[-2].increment = inc
            records[-2].trace_increment = t_inc
            if inc < stop_tol:
                stop_reason = "increment"
                break
            if len(records) >= 3 and records[-3].increment is not None and inc >= records[-3].increment:
                rising += 1
            else:
                rising = 0
            if rising >= STAGNATION_WINDOW:
                raise NoProgress(f"increments stagnated above {stop_tol:.2e} for {STAGNATION_WINDOW} consecutive k (k={k})")
        prev_x, prev_u, prev_t = res.x, u, tr

    k_last = records[-1].k
    nodes = extrapolation_nodes(k_last)
    x_lim = _neville_at_zero([1.0 / j**2 for j in nodes], [kept[j] for j in nodes])
    x_lin = _neville_at_zero([1.0 / j**2 for j in nodes[-2:]], [kept[j] for j in nodes[-2:]]) if len(nodes) > 1 else x_lim
    u_lim, tr_lim = op.split(x_lim)
    u_last, tr_last = op.split(kept[k_last])

    data = op.data
    vn_l, vn_r = -grid.v, grid.v
    gamma = TraceFunction(
        grid,
        np.where(vn_l > 0, data.g2_left, tr_lim.left),
        np.where(vn_r > 0, data.g2_right, tr_lim.right),
    )
    plus = np.concatenate([(tr_lim.left - data.g2_left)[vn_l > 0], (tr_lim.right - data.g2_right)[vn_r > 0]])
    minus_last = np.concatenate([tr_last.left[vn_l < 0], tr_last.right[vn_r < 0]])
    minus_lim = np.concatenate([tr_lim.left[vn_l < 0], tr_lim.right[vn_r < 0]])

    report = ViscosityReport(
        records=records,
        stop_tol=stop_tol,
        stopped_at=k_last,
        stop_reason=stop_reason,
        extrapolation_nodes=nodes,
        extrapolation_spread=l2h1v(Field(grid, op.split(x_lim)[0].values - op.split(x_lin)[0].values)),
        raw_last_distance=l2h1v(Field(grid, u_last.values - u_lim.values)),
        terminal_norm_l2h1v=l2h1v(u_lim),
        xplus_discrepancy=float(np.max(np.abs(plus))) if plus.size else 0.0,
        limit_trace_increment=float(np.max(np.abs(minus_lim - minus_last))) if minus_lim.size else 0.0,
    )
    if cross_check:
        u0, _ = solve_direct(spec)
        report.direct_distance = l2h1v(Field(grid, u_lim.values - u0.values))
        report.direct_check_passed = bool(report.direct_distance <= 10.0 * stop_tol)
    return u_lim, gamma, report
