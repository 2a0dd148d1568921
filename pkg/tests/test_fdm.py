import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kfplab.coefficients import CoefficientField
from kfplab.errors import TooCoarse
from kfplab.fdm import (
    Field,
    assemble,
    build_grid,
    check_green_identity,
    discrete_norms,
    m_matrix_defects,
    read_field_csv,
    write_field_csv,
)
from kfplab.krylov import SolverSettings, solve_sparse
from kfplab.presets import UNIT_BOX, preset

DIRECT = SolverSettings("direct")


def _solve(op):
    return op.split(solve_sparse(op, DIRECT).x)


def test_position_nodes():
    g = build_grid(UNIT_BOX, 4, 4)
    np.testing.assert_allclose(g.x, [0.125, 0.375, 0.625, 0.875])
    assert g.hx == pytest.approx(0.25)


def test_even_velocity_nodes_avoid_zero():
    g = build_grid(UNIT_BOX, 4, 4)
    np.testing.assert_allclose(g.v, [-0.75, -0.25, 0.25, 0.75])
    assert not g.staggered


def test_odd_velocity_nodes_are_shifted():
    g = build_grid(UNIT_BOX, 4, 5)
    assert g.staggered
    assert np.min(np.abs(g.v)) > 0.1 * g.hv
    assert g.v[0] - (-1.0) == pytest.approx(g.hv)
    assert 1.0 - g.v[-1] == pytest.approx(g.hv / 2)


def test_too_coarse():
    with pytest.raises(TooCoarse):
        build_grid(UNIT_BOX, 3, 8)


@pytest.mark.parametrize("eps", [0.0, 1e-3, 1.0])
def test_constant_data_is_exact(eps):
    c = preset("constant")
    op = assemble(build_grid(UNIT_BOX, 16, 16), c, eps)
    ones = np.ones(op.matrix.shape[0])
    assert np.max(np.abs(op.matrix @ ones - op.rhs)) < 1e-12


def test_matrix_is_m_matrix():
    op = assemble(build_grid(UNIT_BOX, 12, 12), preset("identity_drift"), 0.01)
    defects = m_matrix_defects(op.matrix)
    assert defects["ok"], defects


@pytest.mark.parametrize("alpha", [1.0, -0.7])
def test_linear_in_v_is_exact(alpha):
    c = CoefficientField.from_expressions(n=1, A="0.5", f="0", g=f"{alpha}*v1")
    grid = build_grid(UNIT_BOX, 16, 16)
    u, _ = _solve(assemble(grid, c, 0.0))
    X, V = grid.mesh()
    np.testing.assert_allclose(u.values, alpha * V, atol=1e-10)


def test_manufactured_first_order():
    f = "pi^2/4*sin(pi*x1)*cos(pi*v1/2) - pi*v1*cos(pi*x1)*cos(pi*v1/2)"
    c = CoefficientField.from_expressions(n=1, A="1", f=f, g="sin(pi*x1)*cos(pi*v1/2)")
    errs, hs = [], []
    for n in (16, 32, 64):
        grid = build_grid(UNIT_BOX, n, n)
        u, _ = _solve(assemble(grid, c, 0.0))
        X, V = grid.mesh()
        errs.append(np.max(np.abs(u.values - np.sin(np.pi * X) * np.cos(np.pi * V / 2))))
        hs.append(grid.h)
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert errs[0] > errs[1] > errs[2]
    assert rate >= 0.8


def test_norms_of_constants():
    grid = build_grid(UNIT_BOX, 8, 8)
    assert discrete_norms(Field(grid, np.ones(grid.shape))).l2 == pytest.approx(np.sqrt(2.0))
    zero = discrete_norms(Field(grid, np.zeros(grid.shape)))
    assert zero.l2 == zero.l2_h1v == zero.grad_v == 0.0


def test_norm_of_v_converges():
    grid = build_grid(UNIT_BOX, 8, 128)
    X, V = grid.mesh()
    assert discrete_norms(Field(grid, V)).l2 ** 2 == pytest.approx(2.0 / 3.0, rel=0.02)


def test_green_identity_constant_solution():
    op = assemble(build_grid(UNIT_BOX, 10, 10), preset("constant"), 0.0)
    u, t = _solve(op)
    phi = np.random.default_rng(0).normal(size=u.grid.shape)
    assert check_green_identity(op, u, t, phi) < 1e-10
    assert check_green_identity(op, u, t, np.zeros(u.grid.shape)) == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.05]))
def test_green_identity_random_phi(seed, eps):
    op = assemble(build_grid(UNIT_BOX, 12, 10), preset("unit_box"), eps)
    u, t = _solve(op)
    phi = np.random.default_rng(seed).normal(size=u.grid.shape)
    assert check_green_identity(op, u, t, phi) < 1e-8 * np.linalg.norm(phi)


def test_csv_round_trip(tmp_path):
    grid = build_grid(UNIT_BOX, 6, 5)
    u = Field(grid, np.random.default_rng(1).normal(size=grid.shape))
    back = read_field_csv(write_field_csv(tmp_path / "u.csv", u), grid)
    np.testing.assert_array_equal(back.values, u.values)


def test_trace_labels_and_interpolation():
    op = assemble(build_grid(UNIT_BOX, 8, 8), preset("unit_box"), 0.0)
    u, t = _solve(op)
    assert t.on("Xplus").size == 8 and t.on("Xminus").size == 8
    xg, vg = u.grid.x[3], u.grid.v[2]
    assert float(u.at(xg, vg)) == pytest.approx(u.values[3, 2])
