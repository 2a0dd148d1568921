"""Linear solves for the assembled (nonsymmetric) systems.

BiCGStab and restarted GMRES are written out here, with Jacobi
preconditioning, so that iteration counts, residual histories and the
reduction order are under our control.  The banded direct path hands the
lexicographically ordered matrix to LAPACK.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import NotConverged, SingularPivot

METHODS = ("bicgstab", "gmres", "direct")


@dataclass(frozen=True)
class SolverSettings:
    method: str = "bicgstab"
    rel_tol: float = 1e-10
    max_iter: int | None = None
    restart: int = 50
    jacobi: bool = True

    def __post_init__(self):
        method = self.method.lower().replace("directbanded", "direct").replace("gmres(m)", "gmres")
        if method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}")
        object.__setattr__(self, "method", method)
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.restart < 1:
            raise ValueError("restart must be at least 1")

    def iteration_cap(self, n: int) -> int:
        return self.max_iter if self.max_iter is not None else int(20 * math.sqrt(n)) + 200


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    method: str = ""


def _unpack(op, rhs):
    if rhs is None:
        return sp.csr_matrix(op.matrix), np.asarray(op.rhs, dtype=float), getattr(op, "bandwidth", None)
    return sp.csr_matrix(op), np.asarray(rhs, dtype=float), None


def solve_sparse(op, settings: SolverSettings | None = None, rhs=None, x0=None) -> SolveResult:
    """Solve ``A x = b``.

    ``op`` is either an object with ``matrix``, ``rhs`` (and optionally
    ``bandwidth``) attributes, or a sparse matrix with ``rhs`` given.

    Raises
    ------
    NotConverged
        With the residual history and last iterate attached.
    SingularPivot
        From the banded direct path.
    """
    settings = settings or SolverSettings()
    A, b, bw = _unpack(op, rhs)
    n = A.shape[0]
    if A.shape != (n, n) or n == 0:
        raise ValueError("operator must be square and nonempty")
    if settings.method == "direct":
        x = solve_banded_sparse(A, b, bw)
        r = _rel_res(A, x, b)
        return SolveResult(x, 1, r, [r], "direct")
    d = A.diagonal()
    if settings.jacobi:
        # Rows differ in scale by 1/h^2 (cell rows against trace rows), so
        # the system is row-scaled before iterating and the stopping test
        # runs on the scaled residual.
        if np.any(d == 0):
            raise SingularPivot("zero diagonal entry, Jacobi preconditioner undefined")
        A = (sp.diags(1.0 / d) @ A).tocsr()
        b = b / d
    minv = np.ones(n)
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    cap = settings.iteration_cap(n)
    if settings.method == "bicgstab":
        return _bicgstab(A, b, minv, x0, settings.rel_tol, cap)
    return _gmres(A, b, minv, x0, settings.rel_tol, cap, settings.restart)


def _rel_res(A, x, b) -> float:
    nb = np.linalg.norm(b)
    r = np.linalg.norm(b - A @ x)
    return float(r / nb) if nb > 0 else float(r)


def bandwidth(A: sp.spmatrix) -> tuple[int, int]:
    coo = sp.coo_matrix(A)
    if coo.nnz == 0:
        return 0, 0
    off = coo.col.astype(np.int64) - coo.row.astype(np.int64)
    return int(max(0, -off.min())), int(max(0, off.max()))


def solve_banded_sparse(A: sp.spmatrix, b: np.ndarray, bw: int | None = None) -> np.ndarray:
    """LAPACK banded LU of a sparse matrix; the band is measured from the pattern."""
    A = sp.csr_matrix(A)
    lo, up = bandwidth(A)
    if bw is not None:
        lo, up = max(lo, 0), max(up, 0)
    n = A.shape[0]
    ab = np.zeros((lo + up + 1, n))
    coo = A.tocoo()
    ab[up + coo.row - coo.col, coo.col] = coo.data
    try:
        x = sla.solve_banded((lo, up), ab, b, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise SingularPivot(f"banded factorization failed: {exc}") from None
    if not np.all(np.isfinite(x)):
        raise SingularPivot("banded solve produced non-finite values")
    return x


def _bicgstab(A, b, minv, x, tol, cap) -> SolveResult:
    nb = np.linalg.norm(b)
    if nb == 0:
        return SolveResult(np.zeros_like(b), 0, 0.0, [0.0], "bicgstab")
    r = b - A @ x
    hist = [float(np.linalg.norm(r) / nb)]
    if hist[-1] <= tol:
        return SolveResult(x, 0, hist[-1], hist, "bicgstab")
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    for it in range(1, cap + 1):
        rho_new = float(r_hat @ r)
        if rho_new == 0.0:
            # breakdown: restart from the current iterate
            r = b - A @ x
            r_hat = r.copy()
            rho_new = float(r_hat @ r)
            p[:] = 0.0
            v[:] = 0.0
            rho = alpha = omega = 1.0
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        phat = minv * p
        v = A @ phat
        denom = float(r_hat @ v)
        if denom == 0.0:
            raise NotConverged("BiCGStab breakdown (r_hat . v = 0)", hist, x)
        alpha = rho / denom
        s = r - alpha * v
        if np.linalg.norm(s) / nb <= tol:
            x = x + alpha * phat
            r = b - A @ x
            hist.append(float(np.linalg.norm(r) / nb))
            if hist[-1] <= tol:
                return SolveResult(x, it, hist[-1], hist, "bicgstab")
            continue
        shat = minv * s
        t = A @ shat
        tt = float(t @ t)
        omega = float(t @ s) / tt if tt > 0 else 0.0
        x = x + alpha * phat + omega * shat
        r = s - omega * t
        res = float(np.linalg.norm(r) / nb)
        if res <= tol:
            # confirm with the true residual, recurrences drift
            r = b - A @ x
            res = float(np.linalg.norm(r) / nb)
        hist.append(res)
        if res <= tol:
            return SolveResult(x, it, res, hist, "bicgstab")
        if omega == 0.0:
            raise NotConverged("BiCGStab stagnated (omega = 0)", hist, x)
    raise NotConverged(f"BiCGStab did not reach rel_tol={tol:g} in {cap} iterations", hist, x)


def _gmres(A, b, minv, x, tol, cap, m) -> SolveResult:
    """Right-preconditioned GMRES(m) with Givens rotations."""
    nb = np.linalg.norm(b)
    if nb == 0:
        return SolveResult(np.zeros_like(b), 0, 0.0, [0.0], "gmres")
    n = b.size
    hist = []
    it = 0
    while True:
        r = b - A @ x
        beta = float(np.linalg.norm(r))
        hist.append(beta / nb)
        if beta / nb <= tol:
            return SolveResult(x, it, beta / nb, hist, "gmres")
        if it >= cap:
            raise NotConverged(f"GMRES({m}) did not reach rel_tol={tol:g} in {cap} iterations", hist, x)
        k_max = min(m, cap - it, n)
        Q = np.zeros((k_max + 1, n))
        H = np.zeros((k_max + 1, k_max))
        cs = np.zeros(k_max)
        sn = np.zeros(k_max)
        e = np.zeros(k_max + 1)
        e[0] = beta
        Q[0] = r / beta
        k_used = 0
        for k in range(k_max):
            w = A @ (minv * Q[k])
            for j in range(k + 1):
                H[j, k] = float(Q[j] @ w)
                w = w - H[j, k] * Q[j]
            H[k + 1, k] = float(np.linalg.norm(w))
            if H[k + 1, k] > 0:
                Q[k + 1] = w / H[k + 1, k]
            for j in range(k):
                hj = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = hj
            den = math.hypot(H[k, k], H[k + 1, k])
            cs[k] = H[k, k] / den if den > 0 else 1.0
            sn[k] = H[k + 1, k] / den if den > 0 else 0.0
            H[k, k] = den
            H[k + 1, k] = 0.0
            e[k + 1] = -sn[k] * e[k]
            e[k] = cs[k] * e[k]
            it += 1
            k_used = k + 1
            if abs(e[k + 1]) / nb <= tol * 0.5 or den == 0:
                break
        y = sla.solve_triangular(H[:k_used, :k_used], e[:k_used])
        x = x + minv * (Q[:k_used].T @ y)
