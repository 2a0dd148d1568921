import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from kfplab.coefficients import CoefficientField
from kfplab.errors import ConfigError, MaxStepsExceeded, TooManyCensored
from kfplab.geometry import BoundaryLabel
from kfplab.oracle import (
    PathConfig,
    estimate_shared,
    estimate_solution,
    exit_labels,
    label_histogram,
    sample_exit,
    simulate_paths,
)
from kfplab.oracle.rng import normals, raw_words
from kfplab.presets import UNIT_BOX, preset

HALF = preset("unit_box")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.integers(1, 6))
def test_philox_matches_numpy(seed, index, blocks):
    ours = raw_words(np.uint64(seed), np.uint64(index), blocks)
    ref = np.random.Philox(key=np.array([seed, index], dtype=np.uint64)).random_raw(4 * blocks)
    np.testing.assert_array_equal(ours, ref)


def test_normals_are_standard():
    z = normals(11, 0, 200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.01
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert np.mean(np.abs(z) > 3.0) == pytest.approx(2 * stats.norm.sf(3.0), rel=0.15)


def test_normals_reproducible_and_stream_separated():
    np.testing.assert_array_equal(normals(3, 7, 100), normals(3, 7, 100))
    assert not np.array_equal(normals(3, 7, 100), normals(3, 8, 100))


def test_constant_data_exact():
    c = preset("constant")
    est = estimate_solution((0.5, 0.25), (c, UNIT_BOX), PathConfig(dt=1e-3, n_paths=2000, seed=1))
    assert est.mean == 1.0 and est.stderr == 0.0
    assert est.n_used == 2000 and est.n_censored == 0


def test_transport_limit_exits_right():
    c = CoefficientField.from_expressions(n=1, A="1e-6", g="x1")
    batch = simulate_paths((0.9, 0.8), c, UNIT_BOX, PathConfig(dt=1e-4, n_paths=2000, seed=2))
    labels = exit_labels(batch)
    right = np.array([lab is BoundaryLabel.XPLUS for lab in labels])
    assert right.mean() >= 0.99
    np.testing.assert_allclose(batch.v[right], 0.8, atol=0.01)
    np.testing.assert_allclose(batch.x[right], 1.0)


def test_outflow_fraction_halves_with_dt():
    cfg = dict(n_paths=100_000, seed=5)
    coarse = label_histogram(simulate_paths((0.995, 0.05), HALF, UNIT_BOX, PathConfig(dt=4e-3, **cfg)))
    fine = label_histogram(simulate_paths((0.995, 0.05), HALF, UNIT_BOX, PathConfig(dt=2e-3, **cfg)))
    assert coarse["Xminus"] > 0
    assert fine["Xminus"] <= 0.5 * coarse["Xminus"]


def test_paths_reproducible_and_batch_independent():
    a = simulate_paths((0.5, 0.25), HALF, UNIT_BOX, PathConfig(dt=1e-3, n_paths=300, seed=9, batch=300))
    b = simulate_paths((0.5, 0.25), HALF, UNIT_BOX, PathConfig(dt=1e-3, n_paths=300, seed=9, batch=64))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.steps, b.steps)
    part = simulate_paths((0.5, 0.25), HALF, UNIT_BOX, PathConfig(dt=1e-3, n_paths=300, seed=9), first=100, count=50)
    np.testing.assert_array_equal(part.v, a.v[100:150])


def test_sample_exit_matches_batch():
    cfg = PathConfig(dt=1e-3, n_paths=20, seed=4)
    batch = simulate_paths((0.5, -0.25), HALF, UNIT_BOX, cfg)
    one = sample_exit((0.5, -0.25), HALF, UNIT_BOX, cfg, 7)
    assert one.x[0] == batch.x[7] and one.steps == batch.steps[7]


def test_max_steps():
    with pytest.raises(MaxStepsExceeded):
        sample_exit((0.5, 0.25), HALF, UNIT_BOX, PathConfig(dt=1e-4, max_steps=3, n_paths=1, seed=0), 0)


def test_too_many_censored():
    with pytest.raises(TooManyCensored):
        estimate_solution((0.5, 0.25), (HALF, UNIT_BOX), PathConfig(dt=1e-4, max_steps=10, n_paths=500, seed=0))


def test_needs_expression_coefficients():
    c = dataclasses.replace(HALF, sources={})
    with pytest.raises(ConfigError):
        simulate_paths((0.5, 0.25), c, UNIT_BOX, PathConfig(n_paths=10))


def test_bad_path_config():
    with pytest.raises(ValueError):
        PathConfig(dt=-1.0)


def test_source_term_gives_mean_exit_time():
    cfg = PathConfig(dt=1e-3, n_paths=4000, seed=3)
    est_f, = estimate_shared((0.5, 0.25), [(preset("unit_box_source"), UNIT_BOX)], cfg)
    batch = simulate_paths((0.5, 0.25), HALF, UNIT_BOX, cfg)
    assert est_f.mean == pytest.approx(np.mean(batch.steps * 1e-3), rel=0.02)


def test_shared_paths_match_separate_runs():
    cfg = PathConfig(dt=1e-3, n_paths=1000, seed=8)
    a, b = estimate_shared((0.5, 0.25), [(HALF, UNIT_BOX), (preset("unit_box_source"), UNIT_BOX)], cfg)
    assert a.mean == estimate_solution((0.5, 0.25), (HALF, UNIT_BOX), cfg).mean
    d = json.loads(b.to_json())
    assert d["oracle"]["n_used"] == 1000


def test_two_dimensional_paths():
    from kfplab.geometry import ProductDomain

    d = ProductDomain(((0, 1), (0, 1)), ((-1, 1), (-1, 1)))
    c = CoefficientField.from_expressions(n=2, A="0.5", g="x1 + x2")
    est = estimate_solution((0.5, 0.5, 0.1, -0.1), (c, d), PathConfig(dt=1e-3, n_paths=500, seed=1))
    assert 0.0 <= est.mean <= 2.0
    assert sum(est.histogram.values()) == 500
