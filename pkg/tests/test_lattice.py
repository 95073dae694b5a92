import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peierls_lab.lattice import (LorentzianLattice, SitePoint, causal_future, causal_past,
                                 causally_disjoint, integrate)


def test_minkowski_weights_and_metric():
    lat = LorentzianLattice(4, 6, 0.05, 0.1)
    assert lat.shape == (4, 6) and lat.n_sites == 24
    assert np.allclose(lat.vol_weight, 0.005)
    a = lat.inverse_metric()
    assert np.all(a[0] == -1.0) and np.all(a[1] == 1.0)
    assert lat.length == pytest.approx(0.6)


def test_unstable_ratio_rejected():
    with pytest.raises(ValueError):
        LorentzianLattice(4, 6, 0.2, 0.1)
    lat = LorentzianLattice(4, 6, 0.2, 0.1, allow_unstable=True)
    assert not lat.is_causally_stable


def test_metric_signature_checked():
    with pytest.raises(ValueError):
        LorentzianLattice(4, 6, 0.05, 0.1, g_tt=1.0)


def test_future_cone_grows_one_site_per_row():
    lat = LorentzianLattice(5, 16, 0.1, 0.1)
    fut = causal_future(lat, SitePoint(1, 8))
    for t in range(1, 5):
        row = sorted(p.ix for p in fut if p.it == t)
        assert row == list(range(8 - (t - 1), 8 + t))
    assert not any(p.it == 0 for p in fut)


def test_cone_wraps_periodically():
    lat = LorentzianLattice(4, 8, 0.1, 0.1)
    fut = causal_future(lat, SitePoint(0, 0))
    assert {p.ix for p in fut if p.it == 2} == {6, 7, 0, 1, 2}


def test_past_is_mirror_of_future():
    lat = LorentzianLattice(6, 10, 0.1, 0.1)
    p, q = SitePoint(1, 3), SitePoint(4, 5)
    assert (q in causal_future(lat, p)) == (p in causal_past(lat, q))


def test_causally_disjoint():
    lat = LorentzianLattice(3, 20, 0.1, 0.1)
    assert causally_disjoint(lat, {SitePoint(1, 2)}, {SitePoint(1, 10)})
    assert not causally_disjoint(lat, {SitePoint(0, 2)}, {SitePoint(2, 4)})
    with pytest.raises(ValueError):
        causally_disjoint(lat, set(), {SitePoint(0, 0)})


def test_integrate_constant():
    lat = LorentzianLattice(5, 10, 0.05, 0.1)
    assert integrate(lat, np.ones(lat.shape)) == pytest.approx(5 * 10 * 0.005)
    with pytest.raises(ValueError):
        integrate(lat, np.ones((3, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 7), st.integers(0, 11), st.integers(0, 7), st.integers(0, 11))
def test_causal_relation_symmetric(t1, x1, t2, x2):
    lat = LorentzianLattice(8, 12, 0.05, 0.1)
    p, q = SitePoint(t1, x1), SitePoint(t2, x2)
    assert (q in causal_future(lat, p)) == (p in causal_past(lat, q))
