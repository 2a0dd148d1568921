import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from kfplab.coefficients import CoefficientField
from kfplab.errors import NotConverged
from kfplab.fdm import assemble, build_grid
from kfplab.krylov import SolverSettings, solve_banded_sparse, solve_sparse
from kfplab.presets import UNIT_BOX, preset


@pytest.mark.parametrize("method", ["bicgstab", "gmres"])
def test_identity_one_iteration(method):
    r = np.arange(1.0, 11.0)
    res = solve_sparse(sp.identity(10, format="csr"), SolverSettings(method), rhs=r)
    np.testing.assert_allclose(res.x, r)
    assert res.iterations <= 1


@pytest.mark.parametrize("method", ["bicgstab", "gmres", "direct"])
def test_constant_system(method):
    op = assemble(build_grid(UNIT_BOX, 16, 16), preset("constant"), 0.0)
    res = solve_sparse(op, SolverSettings(method, rel_tol=1e-10))
    np.testing.assert_allclose(res.x, 1.0, atol=1e-8)
    assert res.residual < 1e-10


@pytest.mark.parametrize("method", ["bicgstab", "gmres"])
def test_krylov_matches_direct_at_64(method):
    c = CoefficientField.from_expressions(n=1, A="1", g="x1")
    op = assemble(build_grid(UNIT_BOX, 64, 64), c, 0.01)
    direct = solve_sparse(op, SolverSettings("direct")).x
    it = solve_sparse(op, SolverSettings(method, rel_tol=1e-10, max_iter=20000, restart=60)).x
    assert np.max(np.abs(it - direct)) < 1e-8


def test_not_converged_carries_history():
    op = assemble(build_grid(UNIT_BOX, 32, 32), preset("unit_box"), 0.0)
    with pytest.raises(NotConverged) as info:
        solve_sparse(op, SolverSettings("gmres", rel_tol=1e-14, max_iter=2, restart=2, jacobi=False))
    assert info.value.history


def test_bad_settings():
    with pytest.raises(ValueError):
        SolverSettings("cg")
    with pytest.raises(ValueError):
        SolverSettings("gmres", rel_tol=2.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(5, 40), st.integers(1, 4), st.integers(0, 1000))
def test_banded_solver_matches_dense(n, bw, seed):
    rng = np.random.default_rng(seed)
    A = sp.diags([rng.normal(size=n - abs(k)) for k in range(-bw, bw + 1)], list(range(-bw, bw + 1)), format="csr")
    A = A + sp.identity(n) * (2 * bw + 3) * 3
    b = rng.normal(size=n)
    np.testing.assert_allclose(solve_banded_sparse(A, b), np.linalg.solve(A.toarray(), b), atol=1e-10)
