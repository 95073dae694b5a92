import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peierls_lab.fields import FieldConfig, Variation, chart_backward
from peierls_lab.geometry import FlatTarget, StereographicSphere
from peierls_lab.green import (advanced_operator, advanced_solve, causal_propagator,
                               propagator_derivative, retarded_operator, retarded_solve)
from peierls_lab.lattice import LorentzianLattice
from peierls_lab.variational import (GeneralizedLagrangian, free_scalar, linearize,
                                     time_kinetic_only, wave_map)

SPHERE = StereographicSphere()


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def free_op(nt=16, nx=16, dt=0.05, dx=0.1):
    lat = LorentzianLattice(nt, nx, dt, dx)
    return linearize(GeneralizedLagrangian(free_scalar(1)), FieldConfig.zeros(lat, FlatTarget(1)))


def sphere_op(seed=0, nt=12, nx=12):
    lat = LorentzianLattice(nt, nx, 0.05, 0.1)
    phi = FieldConfig(lat, SPHERE, 0.3 * rng(seed).standard_normal(lat.shape + (2,)))
    return linearize(GeneralizedLagrangian(wave_map(SPHERE)), phi)


def test_free_impulse_averages_minus_half_inside_cone():
    # dt = dx: the leapfrog kernel is -1 on every other cone site, mean -1/2
    op = free_op(12, 24, 0.1, 0.1)
    s = np.zeros((12, 24, 1))
    s[2, 12] = 1.0
    u = retarded_solve(op, s).components[..., 0]
    assert np.all(u[:3] == 0)
    for t in range(3, 12):
        row = u[t, 12 - (t - 3):12 + (t - 3) + 1]
        assert np.allclose(row[::2], -1.0, atol=1e-12) and np.all(row[1::2] == 0.0)
        assert np.count_nonzero(u[t]) == len(row[::2])


def test_retarded_inverts_operator():
    op = sphere_op(1)
    s = np.zeros(op.base.values.shape)
    s[2:9] = rng(2).standard_normal(s[2:9].shape)
    u = retarded_solve(op, s).components
    res = op.apply_lowered(u) - s
    assert np.abs(res[:-1]).max() < 1e-10


def test_advanced_is_transpose_of_retarded():
    op = sphere_op(3, 8, 8)
    R = retarded_operator(op).apply_array(np.eye(op.size).reshape(8, 8, 2, -1)).reshape(op.size, -1)
    A = advanced_operator(op).apply_array(np.eye(op.size).reshape(8, 8, 2, -1)).reshape(op.size, -1)
    assert np.abs(R - A.T).max() < 1e-11 * max(1.0, np.abs(R).max())


def test_causal_kernel_antisymmetric():
    K = causal_propagator(free_op(10, 10)).dense_kernel()
    assert np.abs(K + K.T).max() < 1e-12


def test_dense_refused_above_limit():
    with pytest.raises(ValueError, match="dense assembly refused"):
        causal_propagator(free_op(16, 16), dense_limit=100).dense_kernel()


def test_unstable_lattice_refused():
    lat = LorentzianLattice(6, 6, 0.2, 0.1, allow_unstable=True)
    op = linearize(GeneralizedLagrangian(free_scalar(1)), FieldConfig.zeros(lat, FlatTarget(1)))
    with pytest.raises(ValueError, match="unstable discretization"):
        retarded_solve(op, np.zeros((6, 6, 1)))


def test_non_hyperbolic_refused():
    lat = LorentzianLattice(6, 6, 0.05, 0.1)
    op = linearize(GeneralizedLagrangian(time_kinetic_only(1)), FieldConfig.zeros(lat, FlatTarget(1)))
    with pytest.raises(ValueError, match="not normally hyperbolic"):
        retarded_solve(op, np.zeros((6, 6, 1)))


def test_batched_matches_single():
    op = sphere_op(4)
    S = rng(5).standard_normal(op.base.values.shape + (3,))
    U = retarded_solve(op, S)
    for j in range(3):
        assert np.array_equal(U[..., j], retarded_solve(op, S[..., j]).components)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 11), st.integers(0, 11), st.integers(0, 1))
def test_support_in_cones(it, ix, comp):
    op = sphere_op(6)
    lat = op.lattice
    s = np.zeros(op.base.values.shape)
    s[it, ix, comp] = 1.0
    m = np.zeros(lat.shape, bool)
    m[it, ix] = True
    u = retarded_solve(op, s).components
    v = advanced_solve(op, s).components
    assert np.all(u[~lat.future_mask(m)] == 0)
    assert np.all(v[~lat.past_mask(m)] == 0)


def test_propagator_derivative_first_order():
    op = sphere_op(7)
    phi = op.base
    gl = op.gl
    X = Variation(phi, 0.1 * rng(8).standard_normal(phi.values.shape))
    s = np.zeros(phi.values.shape)
    s[2:4, 4:7] = rng(9).standard_normal((2, 3, 2))
    base = retarded_solve(op, s).components
    d = propagator_derivative(gl, phi, X, "retarded", op)(s)
    errs = []
    for t in (1e-3, 5e-4):
        moved = retarded_solve(linearize(gl, chart_backward(phi, t * X)), s).components
        errs.append(np.abs((moved - base) / t - d).max())
    assert 0.45 < errs[1] / errs[0] < 0.55


def test_causal_derivative_is_difference():
    op = sphere_op(10, 8, 8)
    phi = op.base
    X = Variation(phi, 0.1 * rng(11).standard_normal(phi.values.shape))
    s = rng(12).standard_normal(phi.values.shape)
    r = propagator_derivative(op.gl, phi, X, "retarded", op)(s)
    a = propagator_derivative(op.gl, phi, X, "advanced", op)(s)
    c = propagator_derivative(op.gl, phi, X, "causal", op)(s)
    assert np.allclose(c, r - a, atol=1e-10 * np.abs(c).max())
