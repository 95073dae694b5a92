"""Refinement studies shared by the CLI and the acceptance suite."""

from __future__ import annotations

import math

import numpy as np

from .fields import FieldConfig, Variation, chart_backward
from .geometry import FlatTarget, builtin_target
from .green import retarded_solve
from .lattice import LorentzianLattice
from .observables import power_smeared, quadratic_smeared
from .peierls import bracket_value, jacobi_residual
from .variational import GeneralizedLagrangian, el_kernel, free_scalar, linearize, wave_map
from .green import propagator_derivative
from .wavemaps import gaussian_smearing, geodesic_background, smooth_background

QUANTITIES = ("retarded_kernel", "el_plane_wave", "el_geodesic", "jacobi", "constant")


def retarded_kernel_error(N: int, L: float = 2.0) -> float:
    """Relative L1 error of the free-scalar impulse response against 1/2 on the open cone.

    dt = dx/2 on an N x N lattice; the source sits at row N/10, mid-circle,
    and the comparison stops before the cone wraps around the circle.
    The response of -D is compared (the recorded sign convention).
    """
    dx = L / N
    dt = 0.5 * dx
    lat = LorentzianLattice(N, N, dt, dx)
    op = linearize(GeneralizedLagrangian(free_scalar(1)), FieldConfig.zeros(lat, FlatTarget(1)))
    t0, x0 = N // 10, N // 2
    s = np.zeros(lat.shape + (1,))
    s[t0, x0] = 1.0
    u = -retarded_solve(op, s).components[..., 0]
    T = (np.arange(N) - t0)[:, None] * dt
    X = (np.arange(N) - x0)[None, :] * dx
    inside = (T - np.abs(X) > 0) & (T < 0.5 * L)
    return float(np.abs(u[inside] - 0.5).sum() / (0.5 * inside.sum()))


def plane_wave_residual(N: int, L: float = 2.0, ratio: float = 0.5) -> float:
    """max |E| on interior rows for phi = cos(k(x - t)) on an N x N lattice."""
    dx = L / N
    dt = ratio * dx
    lat = LorentzianLattice(N, N, dt, dx)
    k = 2 * math.pi / L
    t = lat.times()[:, None]
    x = lat.positions()[None, :]
    phi = FieldConfig(lat, FlatTarget(1), np.cos(k * (x - t)))
    return el_kernel(GeneralizedLagrangian(free_scalar(1)), phi).residual()


def geodesic_residual(N: int, T: float = 1.0) -> float:
    """max |E| on interior rows for a time-only geodesic wave map on the sphere."""
    sph = builtin_target("sphere2_stereographic")
    lat = LorentzianLattice(N + 1, 8, T / N, 0.5)
    phi = geodesic_background(lat, sph, [0.1, -0.05], [0.6, 0.3])
    return el_kernel(GeneralizedLagrangian(wave_map(sph)), phi).residual()


def constant_residual(N: int) -> float:
    sph = builtin_target("sphere2_stereographic")
    lat = LorentzianLattice(N, N, 0.5 / N, 1.0 / N)
    phi = FieldConfig.constant(lat, sph, [0.3, -0.2])
    return float(np.abs(el_kernel(GeneralizedLagrangian(wave_map(sph)), phi).components).max())


def _wavemap_setup(N: int, amplitude: float = 0.2, seed: int = 0):
    sph = builtin_target("sphere2_stereographic")
    L = 2.0
    dx = L / N
    lat = LorentzianLattice(N + 1, N, 0.5 * dx, dx)
    phi = smooth_background(lat, sph, amplitude, seed)
    gl = GeneralizedLagrangian(wave_map(sph))

    def bump(t0, x0):
        f = gaussian_smearing(lat, t0, x0, 0.3)
        return f / float((f * lat.vol_weight).sum())

    F = power_smeared(lat, 2, bump(0.4, 0.6), 3, [1.0, 0.4], "F")
    G = power_smeared(lat, 2, bump(0.1, 1.0), 3, [0.3, 1.0], "G")
    H = quadratic_smeared(lat, 2, bump(0.25, 1.4), "H")
    return gl, phi, F, G, H


def jacobi_wavemap(N: int, seed: int = 0) -> dict:
    """Jacobi residual and bracket value for cubic observables on a sphere background."""
    gl, phi, F, G, H = _wavemap_setup(N, seed=seed)
    res = jacobi_residual(gl, F, G, H, phi)
    val = bracket_value(gl, F, G, phi)
    return {"residual": res, "bracket": val}


def propagator_derivative_study(ts=(1e-2, 5e-3, 2.5e-3), N: int = 24, seed: int = 0) -> list[dict]:
    """Finite-difference quotient of G+ along chart_backward(phi, tX) against the formula."""
    gl, phi, *_ = _wavemap_setup(N, seed=seed)
    rng = np.random.Generator(np.random.Philox(seed + 1))
    X = Variation(phi, 0.1 * rng.standard_normal(phi.values.shape))
    s = np.zeros(phi.values.shape)
    s[2:6, N // 3:N // 3 + 4] = rng.standard_normal((4, 4, 2))
    op = linearize(gl, phi)
    base = retarded_solve(op, s).components
    formula = propagator_derivative(gl, phi, X, "retarded", op)(s)
    scale = float(np.abs(formula).max())
    out = []
    for t in ts:
        phit = chart_backward(phi, t * X)
        moved = retarded_solve(linearize(gl, phit), s).components
        err = float(np.abs((moved - base) / t - formula).max())
        out.append({"t": t, "error": err, "relative": err / scale, "constant": err / t})
    return out


def rates(errors) -> list:
    """log2(e_k / e_{k+1}); "exact" when both errors vanish."""
    out = []
    for a, b in zip(errors[:-1], errors[1:]):
        if a == 0.0 and b == 0.0:
            out.append("exact")
        elif b == 0.0 or a == 0.0:
            out.append("inf" if b == 0.0 else "-inf")
        else:
            out.append(math.log2(a / b))
    return out


def run_quantity(quantity: str, resolution: int, seed: int = 0) -> float:
    if quantity == "retarded_kernel":
        return retarded_kernel_error(resolution)
    if quantity == "el_plane_wave":
        return plane_wave_residual(resolution)
    if quantity == "el_geodesic":
        return geodesic_residual(resolution)
    if quantity == "jacobi":
        return jacobi_wavemap(resolution, seed)["residual"]
    if quantity == "constant":
        return constant_residual(resolution)
    raise ValueError(f"unknown quantity {quantity!r}")
