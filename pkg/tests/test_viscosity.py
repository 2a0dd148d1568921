import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kfplab.coefficients import CoefficientField
from kfplab.errors import AssumptionViolated
from kfplab.presets import UNIT_BOX, preset
from kfplab.viscosity import ProblemSpec, run_viscosity_sequence, solve_direct, solve_regularized


@pytest.mark.parametrize("eps", [1e-3, 0.1, 1.0])
def test_constants_are_reproduced(eps):
    u, t = solve_regularized(ProblemSpec(UNIT_BOX, preset("constant"), 12, 12), eps)
    np.testing.assert_allclose(u.values, 1.0, atol=1e-10)
    np.testing.assert_allclose(np.concatenate([t.left, t.right]), 1.0, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(1e-3, 1.0))
def test_eps_max_principle_random_bounded_data(a, b, eps):
    g = f"{a!r}*cos(3*x1) + {b!r}*sin(2*v1)"
    c = CoefficientField.from_expressions(n=1, A="0.5", g=g)
    u, _ = solve_regularized(ProblemSpec(UNIT_BOX, c, 12, 12), eps)
    assert np.max(np.abs(u.values)) <= abs(a) + abs(b) + 1e-8


def test_linear_in_v_with_viscosity():
    c = CoefficientField.from_expressions(n=1, A="0.5", g="0.3*v1")
    spec = ProblemSpec(UNIT_BOX, c, 12, 12)
    u, _ = solve_regularized(spec, 0.05)
    np.testing.assert_allclose(u.values, 0.3 * spec.grid.mesh()[1], atol=1e-10)


def test_constant_sequence_stops_at_two():
    u, t, rep = run_viscosity_sequence(ProblemSpec(UNIT_BOX, preset("constant"), 12, 12))
    assert rep.stopped_at == 2
    np.testing.assert_allclose(u.values, 1.0, atol=1e-10)
    assert all(abs(v) < 1e-10 for v in rep.increments().values())


def test_smoothed_indicator_sequence():
    c = CoefficientField.from_expressions(n=1, A="0.5", g="1/(1 + exp(-20*(x1 - 0.5)))")
    _, t, rep = run_viscosity_sequence(ProblemSpec(UNIT_BOX, c, 24, 24), k_max=33, cross_check=False)
    inc = rep.increments()
    for k in (2, 4, 8, 16):
        assert inc[2 * k] <= inc[k]
    first = rep.records[0].sqrt_eps_grad_x
    assert all(r.sqrt_eps_grad_x <= 1.05 * first for r in rep.records)
    assert json_roundtrip(rep)


def json_roundtrip(rep):
    import json

    d = json.loads(rep.to_json())
    return d["stopped_at"] == rep.stopped_at and len(d["records"]) == len(rep.records)


def test_outflow_trace_is_limit_and_inflow_is_data():
    spec = ProblemSpec(UNIT_BOX, preset("unit_box"), 16, 16)
    _, t, _ = run_viscosity_sequence(spec, k_max=8, cross_check=False)
    v = spec.grid.v
    np.testing.assert_allclose(t.right[v > 0], 1.0)
    np.testing.assert_allclose(t.left[v < 0], 0.0)


def test_direct_solution_bounded_by_data():
    u, _ = solve_direct(ProblemSpec(UNIT_BOX, preset("unit_box"), 16, 16))
    assert u.values.min() >= -1e-10 and u.values.max() <= 1 + 1e-10


def test_negative_divergence_rejected():
    c = CoefficientField.from_expressions(n=1, A="1", b=["-v1"])
    with pytest.raises(AssumptionViolated):
        ProblemSpec(UNIT_BOX, c, 8, 8)
