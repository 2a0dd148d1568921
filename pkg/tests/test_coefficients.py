import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kfplab.coefficients import CoefficientField, nondivergence_drift, validate_assumptions
from kfplab.errors import AssumptionViolated, ExpressionError
from kfplab.expr import parse
from kfplab.presets import PRESETS, UNIT_BOX, preset


def test_identity_diffusion_report():
    c = CoefficientField.from_expressions(n=1, A="1", b="0")
    r = validate_assumptions(c, UNIT_BOX)
    assert r.lambda_est == pytest.approx(1.0)
    assert r.Lambda_est == pytest.approx(1.0)
    assert r.min_div_v_b == pytest.approx(0.0, abs=1e-9)
    assert all(r.passed.values())


def test_linear_drift_has_positive_divergence():
    c = CoefficientField.from_expressions(n=1, A="2", b=["v1"])
    r = validate_assumptions(c, UNIT_BOX)
    assert r.min_div_v_b == pytest.approx(1.0, abs=1e-6)
    assert r.passed["posdiv"]


def test_negative_divergence_fails():
    c = CoefficientField.from_expressions(n=1, A="1", b=["-v1"])
    r = validate_assumptions(c, UNIT_BOX)
    assert r.min_div_v_b == pytest.approx(-1.0, abs=1e-6)
    assert not r.passed["posdiv"]


def test_two_dimensional_divergence():
    from kfplab.geometry import ProductDomain

    d = ProductDomain(((0, 1), (0, 1)), ((-1, 1), (-1, 1)))
    c = CoefficientField.from_expressions(n=2, A="2", b=["v1", "v2"])
    assert validate_assumptions(c, d).min_div_v_b == pytest.approx(2.0, abs=1e-6)


def test_nondivergence_drift_constant_a():
    c = CoefficientField.from_expressions(n=1, A="0.5", b="0")
    r = validate_assumptions(c, UNIT_BOX)
    out = nondivergence_drift(c, np.array([[0.3, 0.7]]), np.array([[0.5, -0.2]]), r)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_nondivergence_drift_variable_a():
    c = CoefficientField.from_expressions(n=1, A="1 + v1^2/4", b="0")
    r = validate_assumptions(c, UNIT_BOX)
    out = nondivergence_drift(c, np.array([[0.4]]), np.array([[0.5]]), r)
    assert out[0, 0] == pytest.approx(0.25, abs=1e-6)


def test_nondivergence_drift_constant_drift():
    c = CoefficientField.from_expressions(n=1, A="1", b=["1"])
    r = validate_assumptions(c, UNIT_BOX)
    out = nondivergence_drift(c, np.array([[0.1]]), np.array([[0.9]]), r)
    assert out[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_nondivergence_drift_needs_report():
    c = preset("unit_box")
    with pytest.raises(AssumptionViolated):
        nondivergence_drift(c, np.array([[0.1]]), np.array([[0.1]]), None)


def test_every_preset_validates():
    for name in PRESETS:
        r = validate_assumptions(preset(name), UNIT_BOX)
        assert r.passed["ellipticity"] and r.passed["posdiv"], name


def test_with_data_keeps_operator():
    c = preset("unit_box").with_data(g="2", f="x1")
    assert c.sources["g1"].text == "2"
    np.testing.assert_allclose(c.source(np.array([[0.25]]), np.array([[0.0]])), 0.25)
    np.testing.assert_allclose(c.diffusion(np.array([[0.1]]), np.array([[0.2]])), 0.5)


@pytest.mark.parametrize("text", ["__import__('os')", "x1.__class__", "foo(x1)", "x1 +", "v3"])
def test_rejected_expressions(text):
    with pytest.raises(ExpressionError):
        parse(text, 1)


def test_expression_evaluates_and_emits_source():
    e = parse("sin(pi*x1) + v1^2", 1)
    x, v = np.array([[0.5]]), np.array([[0.5]])
    assert e(x, v)[0] == pytest.approx(1.25)
    assert "math." in e.scalar_source
    assert not e.is_constant
    assert parse("3", 1).is_constant


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(-0.99, 0.99), st.floats(0.0, 1.0))
def test_scaled_identity_eigenvalues(a, v, x):
    c = CoefficientField.from_expressions(n=1, A=repr(a))
    A = c.diffusion(np.array([[x]]), np.array([[v]]))
    assert A[0, 0, 0] == pytest.approx(a)
