"""Named problem presets used by the tests, the acceptance run and the CLI."""
from __future__ import annotations

from .coefficients import CoefficientField
from .geometry import ProductDomain

UNIT_BOX = ProductDomain.box((0.0, 1.0), (-1.0, 1.0))

_TABLE = {
    "constant": dict(A="0.5", f="0", g="1"),
    "unit_box": dict(A="0.5", f="0", g="x1"),
    "unit_box_source": dict(A="0.5", f="1", g="0"),
    "identity_drift": dict(A="1", b=["v1"], f="0", g="0"),
    "boundary_driven": dict(A="0.5", f="0", g1="0", g2="1"),
    "source_driven": dict(A="0.5", f="sin(pi*x1)", g="0"),
    "variable_a": dict(A="1 + v1^2/4", f="0", g="x1"),
    "product_perron": dict(A="0.5", f="0", g="x1 + v1^2"),
    "ball": dict(A="0.5", f="0", g="x1 + v1^2"),
}

PRESETS = tuple(_TABLE)


def preset(name: str) -> CoefficientField:
    """Coefficient field of a named preset (all of them live in one space dimension)."""
    try:
        kw = _TABLE[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return CoefficientField.from_expressions(n=1, name=name, **kw)


def preset_domain(name: str) -> ProductDomain:
    """Domain each preset is meant for; the ball preset lives in its bounding box."""
    if name == "ball":
        return ProductDomain.box((-1.0, 1.0), (-1.0, 1.0))
    return UNIT_BOX
