import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peierls_lab.fields import FieldConfig, Variation, chart_backward
from peierls_lab.geometry import FlatTarget, StereographicSphere
from peierls_lab.lattice import LorentzianLattice
from peierls_lab.variational import (GeneralizedLagrangian, builtin_density, constant_density,
                                     directional_derivative_check, divergence_density, el_kernel,
                                     evaluate_action, free_scalar, is_normally_hyperbolic, kg_mass,
                                     linearize, mass_term, reconstruct_density, time_kinetic_only,
                                     wave_map)

LAT = LorentzianLattice(8, 10, 0.05, 0.1)
SPHERE = StereographicSphere()


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def sphere_phi(seed=0, amp=0.3):
    return FieldConfig(LAT, SPHERE, amp * rng(seed).standard_normal(LAT.shape + (2,)))


def interior(seed, dim, amp=0.05):
    c = np.zeros(LAT.shape + (dim,))
    c[2:6, 3:7] = amp * rng(seed).standard_normal((4, 4, dim))
    return c


def test_free_action_of_linear_field():
    # phi = c t: each time link carries 1/2 g^tt c^2 times the cell volume
    c = 3.0
    phi = FieldConfig(LAT, FlatTarget(1), np.broadcast_to(c * LAT.times()[:, None], LAT.shape))
    S = evaluate_action(GeneralizedLagrangian(free_scalar(1)), 1.0, phi)
    links = (LAT.n_t - 1) * LAT.n_x
    assert S == pytest.approx(-0.5 * c * c * links * LAT.dt * LAT.dx, rel=1e-13)


def test_constant_density_integrates_volume():
    phi = FieldConfig.zeros(LAT, FlatTarget(1))
    S = evaluate_action(GeneralizedLagrangian(constant_density(1.0)), 1.0, phi)
    assert S == pytest.approx(LAT.vol_weight.sum())


def test_gradient_matches_finite_difference():
    gl = GeneralizedLagrangian(wave_map(SPHERE))
    phi = sphere_phi()
    X = interior(1, 2)
    a, n = directional_derivative_check(gl, 1.0, phi, Variation(phi, X))
    assert a == pytest.approx(n, rel=1e-7, abs=1e-12)


def test_cutoff_too_small_raises():
    gl = GeneralizedLagrangian(free_scalar(1))
    phi = FieldConfig.zeros(LAT, FlatTarget(1))
    f = np.zeros(LAT.shape)
    with pytest.raises(ValueError, match="cutoff too small"):
        directional_derivative_check(gl, f, phi, Variation(phi, interior(0, 1)))


def test_hessian_symmetric_and_matches_gradient():
    gl = GeneralizedLagrangian(wave_map(SPHERE))
    phi = sphere_phi(2)
    H = gl.hessian(phi)
    assert abs(H - H.T).max() < 1e-12
    v = rng(3).standard_normal(phi.values.shape)
    h = 1e-6
    g1 = gl.gradient(phi.with_values(phi.values + h * v))
    g0 = gl.gradient(phi.with_values(phi.values - h * v))
    fd = ((g1 - g0) / (2 * h)).ravel()
    assert np.allclose(H @ v.ravel(), fd, atol=1e-7)


def test_third_derivative_matches_hessian_difference():
    gl = GeneralizedLagrangian(wave_map(SPHERE))
    phi = sphere_phi(4)
    X = rng(5).standard_normal(phi.values.shape)
    h = 1e-6
    fd = (gl.hessian(phi.with_values(phi.values + h * X))
          - gl.hessian(phi.with_values(phi.values - h * X))) / (2 * h)
    T = gl.third_matrix(phi, X)
    assert abs(T - fd).max() < 1e-6
    u, v = rng(6).standard_normal((2,) + phi.values.shape)
    tv = np.asarray(gl.third_vector(phi, u, v)).ravel()
    assert np.allclose(tv @ X.ravel(), u.ravel() @ (T @ v.ravel()), rtol=1e-10, atol=1e-12)


def test_trivial_lagrangian_leaves_el_unchanged():
    gl = GeneralizedLagrangian(free_scalar(2))
    gd = GeneralizedLagrangian(free_scalar(2) + divergence_density(np.array([[1.0, 0.3], [0.3, 2.0]])))
    phi = FieldConfig(LAT, FlatTarget(2), rng(7).standard_normal(LAT.shape + (2,)))
    e1 = el_kernel(gl, phi).components[1:-1]
    e2 = el_kernel(gd, phi).components[1:-1]
    assert np.abs(e1 - e2).max() < 1e-10


def test_generalized_lagrangian_cocycle():
    gl = GeneralizedLagrangian(wave_map(SPHERE))
    phi = sphere_phi(8)
    f1 = np.zeros(LAT.shape)
    f2 = np.zeros(LAT.shape)
    f1[:, :6] = 1.0
    f2[:, 4:] = 0.5
    both = evaluate_action(gl, f1 + f2, phi)
    assert both == pytest.approx(evaluate_action(gl, f1, phi) + evaluate_action(gl, f2, phi),
                                 rel=1e-13)


def test_el_boundary_rows_flagged():
    E = el_kernel(GeneralizedLagrangian(free_scalar(1)), FieldConfig.zeros(LAT, FlatTarget(1)))
    assert E.boundary_rows[0].all() and E.boundary_rows[-1].all()
    assert not E.boundary_rows[1:-1].any()


def test_builtin_density_names():
    assert builtin_density("kg_mass(2)", FlatTarget(1)).name.startswith("kg_mass")
    with pytest.raises(ValueError):
        builtin_density("kg_mass", FlatTarget(1))
    with pytest.raises(ValueError):
        builtin_density("phi4", FlatTarget(1))


def test_normal_hyperbolicity_factors():
    free = is_normally_hyperbolic(linearize(GeneralizedLagrangian(kg_mass(1.5)),
                                            FieldConfig.zeros(LAT, FlatTarget(1))))
    assert free.ok and np.all(free.factor == 1.0)
    only_t = is_normally_hyperbolic(linearize(GeneralizedLagrangian(time_kinetic_only(1)),
                                              FieldConfig.zeros(LAT, FlatTarget(1))))
    assert not only_t.ok


def test_mass_term_adds_diagonal():
    phi = FieldConfig.zeros(LAT, FlatTarget(1))
    H0 = GeneralizedLagrangian(free_scalar(1)).hessian(phi)
    H1 = GeneralizedLagrangian(free_scalar(1) + mass_term(4.0)).hessian(phi)
    d = (H1 - H0).toarray()
    assert np.allclose(d, np.diag(np.diag(d)))
    assert np.all(np.diag(d) > 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_reconstruction_recovers_difference(seed):
    gl = GeneralizedLagrangian(wave_map(SPHERE))
    from peierls_lab.observables import action_functional
    F = action_functional(gl, LAT, 1.0)
    phi0 = sphere_phi(seed % 97, 0.2)
    phi = chart_backward(phi0, Variation(phi0, 0.05 * rng(seed).standard_normal(phi0.values.shape)))
    theta = reconstruct_density(F, phi0, phi)
    assert abs(F(phi) - F(phi0) - float(np.sum(theta * LAT.vol_weight))) < 1e-8
