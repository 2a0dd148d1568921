"""Phase-space domains and the kinetic boundary decomposition.

A product domain is a position box ``U`` times a velocity box ``V``.  Its
boundary splits into the velocity part ``U x dV`` and the position part
``dU x V``; the latter is further split by the sign of ``v . n_x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .errors import PointNotOnBoundary

if TYPE_CHECKING:
    from .fdm import Grid

BOUNDARY_TOL = 1e-12


class BoundaryLabel(str, Enum):
    V = "V"
    XPLUS = "Xplus"
    XZERO = "Xzero"
    XMINUS = "Xminus"
    CORNER = "Corner"


@dataclass(frozen=True)
class ProductDomain:
    """Box ``U x V`` in ``R^n x R^n`` (n = 1 or 2)."""

    x_intervals: tuple[tuple[float, float], ...]
    v_intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        xs = tuple((float(lo), float(hi)) for lo, hi in self.x_intervals)
        vs = tuple((float(lo), float(hi)) for lo, hi in self.v_intervals)
        if len(xs) != len(vs) or len(xs) not in (1, 2):
            raise ValueError("x and v boxes must share dimension n in {1, 2}")
        for lo, hi in xs + vs:
            if not lo < hi:
                raise ValueError(f"empty interval ({lo}, {hi})")
        object.__setattr__(self, "x_intervals", xs)
        object.__setattr__(self, "v_intervals", vs)

    @classmethod
    def box(cls, x=(0.0, 1.0), v=(-1.0, 1.0)) -> "ProductDomain":
        """1+1 dimensional convenience constructor."""
        return cls((tuple(x),), (tuple(v),))

    @property
    def n(self) -> int:
        return len(self.x_intervals)

    @property
    def measure(self) -> float:
        m = 1.0
        for lo, hi in self.x_intervals + self.v_intervals:
            m *= hi - lo
        return m

    def contains(self, x, v, closed: bool = False) -> np.ndarray:
        """Vectorized membership; ``x`` and ``v`` have leading axis n."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        ok = np.ones(np.broadcast_shapes(x.shape[1:], v.shape[1:]), dtype=bool)
        for k, (lo, hi) in enumerate(self.x_intervals):
            ok &= (x[k] >= lo) & (x[k] <= hi) if closed else (x[k] > lo) & (x[k] < hi)
        for k, (lo, hi) in enumerate(self.v_intervals):
            ok &= (v[k] >= lo) & (v[k] <= hi) if closed else (v[k] > lo) & (v[k] < hi)
        return ok


def _axis_state(value: float, lo: float, hi: float, tol: float) -> int:
    """-1 on the lower face, +1 on the upper face, 0 strictly inside, 2 outside."""
    if abs(value - lo) <= tol:
        return -1
    if abs(value - hi) <= tol:
        return 1
    if lo < value < hi:
        return 0
    return 2


def classify_boundary(x, v, domain: ProductDomain, tol: float = BOUNDARY_TOL) -> BoundaryLabel:
    """Label of the boundary point ``(x, v)`` of ``domain``.

    Raises
    ------
    PointNotOnBoundary
        If the point is interior, or outside the closure by more than ``tol``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if x.shape != (domain.n,) or v.shape != (domain.n,):
        raise ValueError(f"expected points with {domain.n} position and velocity components")
    xs = [_axis_state(x[k], *domain.x_intervals[k], tol) for k in range(domain.n)]
    vs = [_axis_state(v[k], *domain.v_intervals[k], tol) for k in range(domain.n)]
    if 2 in xs or 2 in vs:
        raise PointNotOnBoundary(f"point {x}, {v} lies outside the closed domain")
    on_x = any(s != 0 for s in xs)
    on_v = any(s != 0 for s in vs)
    if not on_x and not on_v:
        raise PointNotOnBoundary(f"point {x}, {v} is interior")
    if on_x and on_v:
        return BoundaryLabel.CORNER
    if on_v:
        return BoundaryLabel.V
    normal = np.array(xs, dtype=float)
    normal /= np.linalg.norm(normal)
    flux = float(v @ normal)
    if abs(flux) <= tol:
        return BoundaryLabel.XZERO
    return BoundaryLabel.XPLUS if flux > 0 else BoundaryLabel.XMINUS


def is_hypoelliptic_boundary(label: BoundaryLabel) -> bool:
    """Whether Dirichlet data is prescribed on points carrying ``label``.

    Corners lie in the closure of the velocity faces, hence count.
    """
    return BoundaryLabel(label) is not BoundaryLabel.XMINUS


@dataclass(frozen=True)
class DomainMask:
    """A general open set, represented by the grid nodes it contains."""

    grid: "Grid"
    inside: np.ndarray
    name: str = "mask"
    connected: bool = field(default=False)

    def __post_init__(self):
        inside = np.asarray(self.inside, dtype=bool)
        if inside.shape != self.grid.shape:
            raise ValueError(f"mask shape {inside.shape} does not match grid {self.grid.shape}")
        inside = inside.copy()
        inside.setflags(write=False)
        object.__setattr__(self, "inside", inside)
        if self.connected and not is_connected(inside):
            raise ValueError(f"mask {self.name!r} declared connected but is not 4-connected")

    @property
    def count(self) -> int:
        return int(self.inside.sum())


def is_connected(inside: np.ndarray) -> bool:
    from scipy import ndimage

    _, n_components = ndimage.label(inside)
    return n_components == 1

