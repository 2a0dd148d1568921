"""Compiled Euler-Maruyama exit kernel.

Coefficient expressions are turned into small scalar functions, compiled with
numba and captured by a kernel built per coefficient set (cached by source
text).  The kernel advances one path at a time

    x <- x + v dt,   v <- v + b~(x, v) dt + sqrt(2 dt) S(x, v) N,   S S^T = A,

with ``b~ = b + div_v A`` by central differences, and on the first step that
leaves the closed box it locates the crossing by linear interpolation of the
step segment against the faces.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np

from ..coefficients import CoefficientField
from ..errors import ConfigError
from .rng import next_normal

DIFF_STEP = 1e-5
TIE_TOL = 1e-15

# exit kinds written by the kernel
CENSORED, X_FACE, V_FACE, CORNER = 0, 1, 2, 3

_CACHE: dict = {}


def _depends_on(expr, name: str) -> bool:
    import re

    return re.search(rf"\b{name}\b", expr.scalar_source) is not None


def _generate(coeffs: CoefficientField, sources: list) -> str:
    """Source of ``drift_and_root(x, v, bt, S)`` and ``fill_sources(x, v, out)``.

    Each coefficient becomes a scalar function of ``x1.., v1..``; the
    divergence term of ``b~`` is emitted only for entries that depend on the
    velocity variable being differentiated.
    """
    n = coeffs.n
    src = coeffs.sources
    args = ", ".join([f"x{k + 1}" for k in range(n)] + [f"v{k + 1}" for k in range(n)])
    unpack = "\n".join([f"    x{k + 1} = x[{k}]" for k in range(n)] + [f"    v{k + 1} = v[{k}]" for k in range(n)])
    out = []
    for i in range(n):
        for j in range(n):
            out.append(f"@njit_inline\ndef a{i}{j}({args}):\n    return {src['A'][i][j].scalar_source}\n")
        out.append(f"@njit_inline\ndef b{i}({args}):\n    return {src['b'][i].scalar_source}\n")
    body = [unpack]
    for i in range(n):
        for j in range(n):
            body.append(f"    A{i}{j} = a{i}{j}({args})")
    for j in range(n):
        terms = [f"b{j}({args})"]
        for i in range(n):
            if _depends_on(src["A"][i][j], f"v{i + 1}"):
                plus = args.replace(f"v{i + 1}", f"v{i + 1} + H")
                minus = args.replace(f"v{i + 1}", f"v{i + 1} - H")
                terms.append(f"(a{i}{j}({plus}) - a{i}{j}({minus})) / (2.0 * H)")
        body.append(f"    bt[{j}] = " + " + ".join(terms))
    if n == 1:
        body.append("    S[0, 0] = math.sqrt(A00)")
    else:
        body += [
            "    s = math.sqrt(max(A00 * A11 - A01 * A10, 0.0))",
            "    t = math.sqrt(A00 + A11 + 2.0 * s)",
            "    S[0, 0] = (A00 + s) / t",
            "    S[0, 1] = A01 / t",
            "    S[1, 0] = A10 / t",
            "    S[1, 1] = (A11 + s) / t",
        ]
    out.append("@njit_inline\ndef drift_and_root(x, v, bt, S):\n" + "\n".join(body) + "\n")
    fills = "\n".join(f"    out[{m}] = {e.scalar_source}" for m, e in enumerate(sources))
    out.append(f"@njit_inline\ndef fill_sources(x, v, out):\n{unpack}\n{fills}\n")
    return "\n".join(out)


def compiled_kernel(coeffs: CoefficientField, sources: list | None = None):
    """Kernel for the coefficient set, compiled on first use.

    ``sources`` lists the source expressions whose path integrals are
    accumulated (default: the field's own ``f``).

    Raises
    ------
    ConfigError
        If ``A``, ``b`` or a source were not given as expressions.
    """
    if not all(k in coeffs.sources for k in ("A", "b")):
        raise ConfigError("the Monte Carlo oracle needs A and b as expressions")
    if sources is None:
        if "f" not in coeffs.sources:
            raise ConfigError("the Monte Carlo oracle needs f as an expression")
        sources = [coeffs.sources["f"]]
    text = _generate(coeffs, sources)
    key = (coeffs.n, text)
    if key not in _CACHE:
        _CACHE[key] = _build(coeffs.n, text)
    return _CACHE[key]


def _build(n: int, text: str):
    namespace: dict = {"math": math, "H": DIFF_STEP, "njit_inline": nb.njit(inline="always")}
    exec(compile(text, "<coefficients>", "exec"), namespace)  # noqa: S102 - whitelisted expressions only
    drift_and_root = namespace["drift_and_root"]
    fill_sources = namespace["fill_sources"]

    @nb.njit
    def kernel(x0, v0, dt, max_steps, seed, first, count, xlo, xhi, vlo, vhi, ex, ev, kind, axis, side, src, steps):
        m = src.shape[1]
        S = np.zeros((n, n))
        bt = np.empty(n)
        fv = np.empty(m)
        x = np.empty(n)
        v = np.empty(n)
        xn = np.empty(n)
        vn = np.empty(n)
        z = np.empty(n)
        buf = np.empty(4, dtype=np.uint64)
        state = np.empty(2, dtype=np.int64)
        sq = math.sqrt(2.0 * dt)
        useed = np.uint64(seed)
        for p in range(count):
            index = np.uint64(first + p)
            state[0] = 0
            state[1] = 4
            x[:] = x0
            v[:] = v0
            src[p, :] = 0.0
            kind[p] = CENSORED
            steps[p] = max_steps
            for step in range(max_steps):
                fill_sources(x, v, fv)
                drift_and_root(x, v, bt, S)
                for k in range(n):
                    z[k] = next_normal(buf, state, useed, index)
                for k in range(n):
                    xn[k] = x[k] + v[k] * dt
                    incr = 0.0
                    for j in range(n):
                        incr += S[k, j] * z[j]
                    vn[k] = v[k] + bt[k] * dt + sq * incr
                theta = 2.0
                hit_kind = 0
                hit_axis = 0
                hit_side = 0
                ties = 0
                for k in range(n):
                    for c in range(2):
                        old = x[k] if c == 0 else v[k]
                        new = xn[k] if c == 0 else vn[k]
                        lo = xlo[k] if c == 0 else vlo[k]
                        hi = xhi[k] if c == 0 else vhi[k]
                        th = 2.0
                        sd = 0
                        if new < lo:
                            th = (lo - old) / (new - old)
                            sd = -1
                        elif new > hi:
                            th = (hi - old) / (new - old)
                            sd = 1
                        if sd != 0:
                            if abs(th - theta) <= TIE_TOL:
                                ties += 1
                            elif th < theta:
                                theta = th
                                hit_kind = X_FACE if c == 0 else V_FACE
                                hit_axis = k
                                hit_side = sd
                                ties = 0
                if hit_kind == 0:
                    for q in range(m):
                        src[p, q] += fv[q] * dt
                    for k in range(n):
                        x[k] = xn[k]
                        v[k] = vn[k]
                    continue
                theta = min(max(theta, 0.0), 1.0)
                for q in range(m):
                    src[p, q] += fv[q] * dt * theta
                for k in range(n):
                    ex[p, k] = x[k] + theta * (xn[k] - x[k])
                    ev[p, k] = v[k] + theta * (vn[k] - v[k])
                if hit_kind == X_FACE:
                    ex[p, hit_axis] = xlo[hit_axis] if hit_side < 0 else xhi[hit_axis]
                else:
                    ev[p, hit_axis] = vlo[hit_axis] if hit_side < 0 else vhi[hit_axis]
                kind[p] = CORNER if ties > 0 else hit_kind
                axis[p] = hit_axis
                side[p] = hit_side
                steps[p] = step + 1
                break

    return kernel
