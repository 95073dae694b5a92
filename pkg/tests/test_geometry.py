import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peierls_lab.geometry import (FlatTarget, StereographicSphere, builtin_target, exp_inverse,
                                  exp_map, geodesic_path)


def test_builtin_names():
    assert isinstance(builtin_target("flat"), FlatTarget)
    assert builtin_target("flat(3)").dim == 3
    assert isinstance(builtin_target("sphere2_stereographic"), StereographicSphere)
    with pytest.raises(ValueError):
        builtin_target("torus")


def test_flat_is_trivial():
    tg = FlatTarget(2)
    y = np.array([0.3, -1.0])
    assert np.allclose(tg.metric(y), np.eye(2))
    assert np.all(tg.christoffel(y) == 0) and np.all(tg.riemann(y) == 0)


def test_sphere_metric_at_origin():
    tg = StereographicSphere()
    assert np.allclose(tg.metric(np.zeros(2)), 4 * np.eye(2))


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_sphere_has_unit_sectional_curvature(a, b):
    tg = StereographicSphere()
    y = np.array([a, b])
    k = tg.sectional_curvature(y, np.array([1.0, 0.2]), np.array([-0.3, 1.0]))
    assert k == pytest.approx(1.0, rel=1e-9)


def test_christoffel_matches_metric_derivative():
    tg = StereographicSphere()
    y = np.array([0.4, -0.7])
    h = 1e-6
    dh = np.stack([(tg.metric(y + h * e) - tg.metric(y - h * e)) / (2 * h) for e in np.eye(2)], -1)
    assert np.allclose(tg.dmetric(y), dh, atol=1e-8)


def test_exp_round_trip():
    tg = StereographicSphere()
    base = np.array([[0.1, 0.2], [-0.5, 0.3]])
    v = np.array([[0.3, -0.1], [0.05, 0.2]])
    q = exp_map(tg, base, v)
    assert np.allclose(exp_inverse(tg, base, q), v, atol=1e-10)


def test_exp_preserves_speed():
    tg = StereographicSphere()
    base = np.array([0.2, 0.1])
    v = np.array([0.5, 0.4])
    ys, us = geodesic_path(tg, base, v)
    speeds = tg.norm(ys, us)
    assert np.ptp(speeds) < 1e-7


def test_exp_inverse_fails_far_away():
    tg = StereographicSphere()
    with pytest.raises(ValueError, match="injectivity"):
        exp_inverse(tg, np.array([0.0, 0.0]), np.array([40.0, 0.0]))
