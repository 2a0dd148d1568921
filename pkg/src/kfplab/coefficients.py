"""Equation data ``A, b, f, g1, g2`` and numerical checks of the standing assumptions."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .errors import AssumptionViolated, NonSymmetricA
from .expr import Expression, parse
from .geometry import ProductDomain

SYMMETRY_TOL = 1e-12
DIV_TOL = 1e-10

FieldFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _shape(x, v):
    return np.broadcast_shapes(np.shape(x)[1:], np.shape(v)[1:])


@dataclass(frozen=True)
class CoefficientField:
    """Diffusion ``A``, drift ``b``, source ``f`` and boundary data ``g1``/``g2``.

    All callables take ``(x, v)`` with leading axis ``n``.  ``A`` returns shape
    ``(n, n, ...)``, ``b`` returns ``(n, ...)`` and the scalar fields return the
    broadcast point shape.  ``sources`` keeps the parsed expressions when the
    field came from the expression language; the Monte Carlo kernel needs them.
    """

    n: int
    A: Callable
    b: Callable
    f: FieldFn
    g1: FieldFn
    g2: FieldFn
    name: str = "custom"
    sources: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_expressions(cls, n=1, A="1", b=None, f="0", g=None, g1=None, g2=None, name="custom"):
        """Build a field from expression strings (or numbers, or callables for data)."""
        if g is not None:
            g1 = g if g1 is None else g1
            g2 = g if g2 is None else g2
        g1 = "0" if g1 is None else g1
        g2 = "0" if g2 is None else g2
        if b is None:
            b = ["0"] * n
        if isinstance(b, (str, int, float)):
            b = [b] if n == 1 else None
            if b is None:
                raise ValueError("b must list one expression per velocity component")
        if len(b) != n:
            raise ValueError(f"b needs {n} components, got {len(b)}")
        if isinstance(A, (str, int, float)):
            entries = [[parse(A, n) if i == j else parse("0", n) for j in range(n)] for i in range(n)]
        else:
            if len(A) != n or any(len(row) != n for row in A):
                raise ValueError(f"A must be {n}x{n}")
            entries = [[parse(A[i][j], n) for j in range(n)] for i in range(n)]
        b_exprs = [parse(e, n) for e in b]

        def A_fn(x, v, entries=entries):
            shape = _shape(x, v)
            out = np.empty((n, n) + shape)
            for i in range(n):
                for j in range(n):
                    out[i, j] = entries[i][j](x, v)
            return out

        def b_fn(x, v, b_exprs=b_exprs):
            return np.stack([e(x, v) for e in b_exprs])

        sources = {"A": entries, "b": b_exprs}
        data = {}
        for key, val in (("f", f), ("g1", g1), ("g2", g2)):
            if callable(val) and not isinstance(val, Expression):
                data[key] = val
            else:
                data[key] = parse(val, n)
                sources[key] = data[key]
        return cls(n=n, A=A_fn, b=b_fn, f=data["f"], g1=data["g1"], g2=data["g2"], name=name, sources=sources)

    def with_data(self, f=None, g=None, g1=None, g2=None, name=None) -> "CoefficientField":
        """Same operator, different source and boundary data."""
        if g is not None:
            g1 = g if g1 is None else g1
            g2 = g if g2 is None else g2
        sources = dict(self.sources)
        changes = {}
        for key, val in (("f", f), ("g1", g1), ("g2", g2)):
            if val is None:
                continue
            if callable(val) and not isinstance(val, Expression):
                changes[key] = val
                sources.pop(key, None)
            else:
                changes[key] = parse(val, self.n)
                sources[key] = changes[key]
        return dataclasses.replace(self, sources=sources, name=name or self.name, **changes)

    def diffusion(self, x, v) -> np.ndarray:
        return np.asarray(self.A(np.asarray(x, float), np.asarray(v, float)), dtype=float)

    def drift(self, x, v) -> np.ndarray:
        return np.asarray(self.b(np.asarray(x, float), np.asarray(v, float)), dtype=float)

    def source(self, x, v) -> np.ndarray:
        return _eval_scalar(self.f, x, v)

    def data_v(self, x, v) -> np.ndarray:
        return _eval_scalar(self.g1, x, v)

    def data_x(self, x, v) -> np.ndarray:
        return _eval_scalar(self.g2, x, v)

    @property
    def has_expressions(self) -> bool:
        return all(k in self.sources for k in ("A", "b", "f"))


def _eval_scalar(fn, x, v) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(np.asarray(fn(x, v), dtype=float), _shape(x, v)).astype(float)


@dataclass
class AssumptionReport:
    lambda_est: float
    Lambda_est: float
    nu_est: float
    min_div_v_b: float
    max_abs_dv_a: float
    passed: dict
    fd_steps: tuple
    samples_per_axis: int
    estimates_only: bool = False

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["fd_steps"] = list(self.fd_steps)
        return out


def _sample_grid(domain: ProductDomain, s: int):
    axes = [np.linspace(lo, hi, s) for lo, hi in domain.x_intervals + domain.v_intervals]
    mesh = np.meshgrid(*axes, indexing="ij")
    n = domain.n
    x = np.stack(mesh[:n]).reshape(n, -1)
    v = np.stack(mesh[n:]).reshape(n, -1)
    return x, v


def _dv(fn, x, v, k, h):
    """Central difference of ``fn`` in ``v_k`` with step ``h``."""
    vp = v.copy()
    vm = v.copy()
    vp[k] += h
    vm[k] -= h
    return (fn(x, vp) - fn(x, vm)) / (2.0 * h)


def _div_v_b(coeffs, x, v, steps):
    return sum(_dv(coeffs.drift, x, v, k, steps[k])[k] for k in range(coeffs.n))


def _dv_a(coeffs, x, v, steps):
    """Array of ``d/dv_i a_ij`` with shape ``(n, n, points)``."""
    n = coeffs.n
    out = np.empty((n, n, x.shape[1]))
    for i in range(n):
        out[i] = _dv(coeffs.diffusion, x, v, i, steps[i])[i]
    return out


def validate_assumptions(coeffs: CoefficientField, domain: ProductDomain, samples_per_axis: int = 9) -> AssumptionReport:
    """Sample the coefficients on a tensor grid over the closure of ``domain``.

    Ellipticity bounds come from the eigenvalues of ``A``; velocity derivatives
    use central differences with step ``axis length / (8 * samples_per_axis)``.
    """
    if samples_per_axis < 3:
        raise ValueError("samples_per_axis must be at least 3")
    if coeffs.n != domain.n:
        raise ValueError("coefficient and domain dimensions differ")
    n = domain.n
    x, v = _sample_grid(domain, samples_per_axis)
    A = coeffs.diffusion(x, v)
    asym = float(np.max(np.abs(A - np.swapaxes(A, 0, 1)))) if n > 1 else 0.0
    if asym > SYMMETRY_TOL:
        raise NonSymmetricA(f"A is not symmetric: max |A - A^T| = {asym:.3e}")
    eig = np.linalg.eigvalsh(np.moveaxis(A, (0, 1), (-2, -1)))
    b = coeffs.drift(x, v)
    steps = tuple((hi - lo) / (samples_per_axis * 8.0) for lo, hi in domain.v_intervals)

    div_b = _div_v_b(coeffs, x, v, steps)
    dva = _dv_a(coeffs, x, v, steps)
    # step-halving disagreement flags fields whose derivatives are not resolved (kinks)
    half = tuple(h / 2 for h in steps)
    jitter = max(
        float(np.max(np.abs(div_b - _div_v_b(coeffs, x, v, half)))),
        float(np.max(np.abs(dva - _dv_a(coeffs, x, v, half)))),
    )
    min_div = float(np.min(div_b))
    max_dva = float(np.max(np.abs(dva)))
    lam = float(np.min(eig))
    text = " ".join(
        e.text for row in coeffs.sources.get("A", []) for e in row
    ) + " ".join(e.text for e in coeffs.sources.get("b", []))
    estimates_only = (
        "A" not in coeffs.sources
        or "abs(" in text
        or "sqrt(" in text
        or jitter > 1e-3 * (1.0 + max(max_dva, float(np.max(np.abs(div_b)))))
    )
    passed = {
        "ellipticity": lam > 0.0,
        "posdiv": min_div >= -DIV_TOL,
        "dv_a_bounded": bool(np.isfinite(max_dva)),
    }
    return AssumptionReport(
        lambda_est=lam,
        Lambda_est=float(np.max(eig)),
        nu_est=float(np.max(np.sqrt(np.sum(b * b, axis=0)))),
        min_div_v_b=min_div,
        max_abs_dv_a=max_dva,
        passed=passed,
        fd_steps=steps,
        samples_per_axis=samples_per_axis,
        estimates_only=bool(estimates_only),
    )


def nondivergence_drift(coeffs: CoefficientField, x, v, report: AssumptionReport | None) -> np.ndarray:
    """``b + div_v A`` at the given points, by central differences.

    Raises
    ------
    AssumptionViolated
        Unless ``report`` certifies bounded velocity derivatives of ``A``.
    """
    if report is None or not report.passed.get("dv_a_bounded", False):
        raise AssumptionViolated("nondivergence drift needs validated bounds on d_v A")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    shape = _shape(x, v)
    xf = np.broadcast_to(x, (coeffs.n,) + shape).reshape(coeffs.n, -1)
    vf = np.broadcast_to(v, (coeffs.n,) + shape).reshape(coeffs.n, -1)
    out = coeffs.drift(xf, vf) + _dv_a(coeffs, xf, vf, report.fd_steps).sum(axis=0)
    return out.reshape((coeffs.n,) + shape)
