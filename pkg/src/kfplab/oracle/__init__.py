"""Monte Carlo estimates of the solution through the first exit of the kinetic process.

``u(xi0) = E[g(xi_tau)] + E[int_0^tau f ds]`` where ``xi_t = (X_t, V_t)``
solves ``dX = V dt``, ``dV = b~ dt + sqrt(2) S dW`` and ``tau`` is the first
exit time from the product domain; ``g`` means ``g1`` on velocity faces and
``g2`` on position faces.  Every path draws from its own Philox stream keyed
by ``(seed, path_index)``, so estimates do not depend on how the index range
is split into batches.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..coefficients import CoefficientField, validate_assumptions
from ..errors import AssumptionViolated, ConfigError, MaxStepsExceeded, TooManyCensored
from ..geometry import BOUNDARY_TOL, BoundaryLabel, ProductDomain, classify_boundary
from .kernels import CENSORED, CORNER, V_FACE, X_FACE, compiled_kernel

CENSOR_LIMIT = 0.01

__all__ = [
    "PathConfig",
    "ExitSample",
    "OracleEstimate",
    "sample_exit",
    "simulate_paths",
    "estimate_solution",
    "estimate_shared",
    "exit_labels",
    "label_histogram",
]


@dataclass(frozen=True)
class PathConfig:
    dt: float = 1e-4
    max_steps: int = 10_000_000
    seed: int = 0
    n_paths: int = 200_000
    batch: int = 50_000

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.max_steps < 1 or self.batch < 1:
            raise ValueError("max_steps and batch must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass
class ExitSample:
    x: np.ndarray
    v: np.ndarray
    label: BoundaryLabel
    source_integral: float
    steps: int


@dataclass
class PathBatch:
    """Raw kernel output for a range of path indices."""

    x: np.ndarray
    v: np.ndarray
    kind: np.ndarray
    axis: np.ndarray
    side: np.ndarray
    source_integral: np.ndarray
    steps: np.ndarray

    @property
    def censored(self) -> np.ndarray:
        return self.kind == CENSORED


@dataclass
class OracleEstimate:
    point: tuple
    mean: float
    stderr: float
    n_used: int
    n_censored: int
    histogram: dict
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps({"oracle": self.to_dict()}, **kw)


def _start(xi0, domain: ProductDomain) -> tuple[np.ndarray, np.ndarray]:
    xi = np.asarray(xi0, dtype=float).ravel()
    n = domain.n
    if xi.size != 2 * n:
        raise ValueError(f"start point needs {2 * n} coordinates")
    x0, v0 = xi[:n].copy(), xi[n:].copy()
    if not domain.contains(x0[:, None], v0[:, None])[0]:
        raise ValueError(f"start point {tuple(xi)} is not interior to the domain")
    return x0, v0


def _check(coeffs: CoefficientField, domain: ProductDomain) -> None:
    report = validate_assumptions(coeffs, domain)
    if not report.passed["dv_a_bounded"]:
        raise AssumptionViolated("the drift correction needs validated d_v A")
    if coeffs.n != domain.n:
        raise ValueError("coefficients and domain disagree on n")


def simulate_paths(
    xi0,
    coeffs: CoefficientField,
    domain: ProductDomain,
    cfg: PathConfig,
    first: int = 0,
    count: int | None = None,
    sources: list | None = None,
) -> PathBatch:
    """Run paths ``first, ..., first + count - 1`` through the compiled kernel.

    ``source_integral`` has one column per entry of ``sources`` (default: the
    field's own ``f``).
    """
    _check(coeffs, domain)
    x0, v0 = _start(xi0, domain)
    n = domain.n
    count = cfg.n_paths if count is None else int(count)
    kernel = compiled_kernel(coeffs, sources)
    m = 1 if sources is None else len(sources)
    lo_x = np.array([a for a, _ in domain.x_intervals])
    hi_x = np.array([b for _, b in domain.x_intervals])
    lo_v = np.array([a for a, _ in domain.v_intervals])
    hi_v = np.array([b for _, b in domain.v_intervals])
    out = PathBatch(
        np.full((count, n), np.nan),
        np.full((count, n), np.nan),
        np.zeros(count, dtype=np.int64),
        np.zeros(count, dtype=np.int64),
        np.zeros(count, dtype=np.int64),
        np.zeros((count, m)),
        np.zeros(count, dtype=np.int64),
    )
    kernel(
        x0, v0, float(cfg.dt), int(cfg.max_steps), np.uint64(cfg.seed), int(first), count,
        lo_x, hi_x, lo_v, hi_v,
        out.x, out.v, out.kind, out.axis, out.side, out.source_integral, out.steps,
    )
    return out


def _label_values(batch: PathBatch, tol: float) -> np.ndarray:
    out = np.full(batch.kind.shape, "", dtype="<U8")
    out[batch.kind == V_FACE] = BoundaryLabel.V.value
    out[batch.kind == CORNER] = BoundaryLabel.CORNER.value
    xs = np.nonzero(batch.kind == X_FACE)[0]
    flux = batch.v[xs, batch.axis[xs]] * batch.side[xs]
    out[xs] = np.where(
        np.abs(flux) <= tol,
        BoundaryLabel.XZERO.value,
        np.where(flux > 0, BoundaryLabel.XPLUS.value, BoundaryLabel.XMINUS.value),
    )
    return out


def exit_labels(batch: PathBatch, tol: float = BOUNDARY_TOL) -> list:
    """Boundary labels of the crossing points, with the rules of ``classify_boundary``.

    Censored paths get the label ``None``.
    """
    return [BoundaryLabel(s) if s else None for s in _label_values(batch, tol)]


def label_histogram(batch: PathBatch, tol: float = BOUNDARY_TOL) -> dict:
    values = _label_values(batch, tol)
    hist = {lab.value: int(np.count_nonzero(values == lab.value)) for lab in BoundaryLabel}
    hist["censored"] = int(np.count_nonzero(batch.censored))
    return hist


def sample_exit(xi0, coeffs: CoefficientField, domain: ProductDomain, cfg: PathConfig, path_index: int) -> ExitSample:
    """One path of the stream ``(cfg.seed, path_index)``.

    Raises
    ------
    MaxStepsExceeded
        If the path is still inside after ``cfg.max_steps`` steps.
    """
    b = simulate_paths(xi0, coeffs, domain, cfg, first=path_index, count=1)
    if b.kind[0] == CENSORED:
        raise MaxStepsExceeded(f"path {path_index} did not exit within {cfg.max_steps} steps")
    label = classify_boundary(b.x[0], b.v[0], domain)
    return ExitSample(b.x[0].copy(), b.v[0].copy(), label, float(b.source_integral[0, 0]), int(b.steps[0]))


def _problem(spec) -> tuple[CoefficientField, ProductDomain]:
    if isinstance(spec, tuple):
        return spec
    return spec.coeffs, spec.domain


def _same_operator(a: CoefficientField, b: CoefficientField) -> bool:
    if a.n != b.n:
        return False
    text = lambda c: ([[e.text for e in row] for row in c.sources["A"]], [e.text for e in c.sources["b"]])  # noqa: E731
    return text(a) == text(b)


def estimate_solution(xi0, spec, cfg: PathConfig) -> OracleEstimate:
    """Mean of ``g(exit) + int f`` over the uncensored paths, its standard error and
    the histogram of exit labels.

    ``spec`` is a :class:`~kfplab.viscosity.ProblemSpec` or a ``(coeffs, domain)``
    pair; the data are read from the coefficient field.

    Raises
    ------
    TooManyCensored
        If more than 1% of the paths hit ``max_steps``.
    """
    return estimate_shared(xi0, [spec], cfg)[0]


def estimate_shared(xi0, specs: list, cfg: PathConfig) -> list[OracleEstimate]:
    """Estimates for several problems with the same ``A`` and ``b`` on one set of paths.

    The problems may differ in ``f``, ``g1`` and ``g2``; each path's exit and
    source integrals serve all of them (common random numbers).
    """
    problems = [_problem(s) for s in specs]
    coeffs, domain = problems[0]
    for c, d in problems[1:]:
        if d != domain or not _same_operator(c, coeffs):
            raise ValueError("shared estimates need one domain and one operator")
    for c, _ in problems:
        if "f" not in c.sources:
            raise ConfigError("the Monte Carlo oracle needs f as an expression")
    sources = [c.sources["f"] for c, _ in problems]
    n = domain.n
    values: list[list] = [[] for _ in problems]
    hist = {lab.value: 0 for lab in BoundaryLabel}
    censored = 0
    for first in range(0, cfg.n_paths, cfg.batch):
        count = min(cfg.batch, cfg.n_paths - first)
        b = simulate_paths(xi0, coeffs, domain, cfg, first, count, sources)
        ok = ~b.censored
        censored += int(np.count_nonzero(~ok))
        for key, cnt in label_histogram(b).items():
            if key != "censored":
                hist[key] += cnt
        on_v = ok & ((b.kind == V_FACE) | (b.kind == CORNER))
        on_x = ok & (b.kind == X_FACE)
        pts = lambda sel: (b.x[sel].T.reshape(n, -1), b.v[sel].T.reshape(n, -1))  # noqa: E731
        for q, (c, _) in enumerate(problems):
            val = np.full(count, np.nan)
            if on_v.any():
                val[on_v] = c.data_v(*pts(on_v))
            if on_x.any():
                val[on_x] = c.data_x(*pts(on_x))
            values[q].append(val[ok] + b.source_integral[ok, q])
    hist["censored"] = censored
    if censored > CENSOR_LIMIT * cfg.n_paths:
        raise TooManyCensored(f"{censored} of {cfg.n_paths} paths hit max_steps={cfg.max_steps}")
    point = tuple(float(t) for t in np.asarray(xi0, float).ravel())
    out = []
    for q in range(len(problems)):
        vals = np.concatenate(values[q])
        mean = float(np.mean(vals))
        stderr = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        out.append(OracleEstimate(point, mean, stderr, int(vals.size), censored, dict(hist), asdict(cfg)))
    return out
