"""Wave maps R x S^1 -> N: specialized Euler-Lagrange and linearized operators, scenarios."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fields import FieldConfig, Variation
from .geometry import FlatTarget, TargetGeometry, builtin_target, geodesic_path
from .lattice import LorentzianLattice
from .observables import linear_smeared, power_smeared
from .peierls import bracket_value, equivalent_forms, peierls_bracket
from .variational import (ELKernel, GeneralizedLagrangian, LinearizedOperator, free_scalar,
                          wave_map)


@dataclass
class WaveMapModel:
    lattice: LorentzianLattice
    target: TargetGeometry
    lagrangian: GeneralizedLagrangian = None

    def __post_init__(self):
        if self.lagrangian is None:
            self.lagrangian = GeneralizedLagrangian(wave_map(self.target))


def _neighbours(vals, lat, mu, sign):
    """Values at p + sign*mu; time rows off the window repeat the edge (weight is 0 there)."""
    if mu == 1:
        return np.roll(vals, -sign, axis=1)
    out = np.empty_like(vals)
    if sign > 0:
        out[:-1] = vals[1:]
        out[-1] = vals[-1]
    else:
        out[1:] = vals[:-1]
        out[0] = vals[0]
    return out


def _link_weights(lat: LorentzianLattice):
    """W^mu_+ (p) and W^mu_- (p) for the links leaving / entering p."""
    w = lat.vol_weight
    a = lat.inverse_metric()
    out = []
    for mu in range(2):
        wa = w * a[mu]
        plus = 0.5 * (wa + _neighbours(wa[..., None], lat, mu, 1)[..., 0])
        minus = 0.5 * (wa + _neighbours(wa[..., None], lat, mu, -1)[..., 0])
        if mu == 0:
            plus = plus.copy()
            minus = minus.copy()
            plus[-1] = 0.0
            minus[0] = 0.0
        out.append((plus, minus, lat.dt if mu == 0 else lat.dx))
    return out


def wave_map_el(model: WaveMapModel, phi: FieldConfig) -> ELKernel:
    """E_k = -h_kj (second difference of phi^j) - (difference of h) terms + 1/4 d_k h (dphi)^2.

    This is the discrete counterpart of -h_kj g^{mu nu}(phi^j_{mu nu} + Gamma^j_il phi^i_mu phi^l_nu)
    with the one-sided differences of h playing the role of d h . phi_mu.
    """
    lat = phi.lattice
    tg = phi.target
    y = phi.values
    h, dh = tg.metric_derivs(y, 1)
    acc = np.zeros_like(y)
    for mu, (Wp, Wm, d) in enumerate(_link_weights(lat)):
        yp, ym = _neighbours(y, lat, mu, 1), _neighbours(y, lat, mu, -1)
        hp, hm = _neighbours(h, lat, mu, 1), _neighbours(h, lat, mu, -1)
        dp = (yp - y) / d
        dm = (y - ym) / d
        second = (Wp[..., None] * dp - Wm[..., None] * dm) / d
        acc -= np.einsum("...kj,...j->...k", h, second)
        acc -= 0.5 * (Wp[..., None] * np.einsum("...kj,...j->...k", (hp - h) / d, dp)
                      + Wm[..., None] * np.einsum("...kj,...j->...k", (h - hm) / d, dm))
        acc += 0.25 * (Wp[..., None] * np.einsum("...ijk,...i,...j->...k", dh, dp, dp)
                       + Wm[..., None] * np.einsum("...ijk,...i,...j->...k", dh, dm, dm))
    return ELKernel(phi, acc / lat.vol_weight[..., None])


def wave_map_hessian(model: WaveMapModel, phi: FieldConfig) -> sp.csr_matrix:
    """Exact derivative of the specialized Euler-Lagrange expression (times vol)."""
    lat = phi.lattice
    tg = phi.target
    n = tg.dim
    y = phi.values
    h, dh, d2h = tg.metric_derivs(y, 2)
    nt, nx = lat.shape
    idx = np.arange(lat.n_sites).reshape(nt, nx)
    rows, cols, vals = [], [], []

    def add(p_idx, q_idx, blocks, mask):
        pi = p_idx[mask]
        qi = q_idx[mask]
        b = blocks[mask]
        r = (pi[:, None, None] * n + np.arange(n)[:, None]).repeat(n, axis=2)
        c = (qi[:, None, None] * n + np.arange(n)[None, :]).repeat(n, axis=1)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(b.ravel())

    for mu, (Wp, _, d) in enumerate(_link_weights(lat)):
        # link p -> q = p + mu, weight W = Wp(p)
        q = _neighbours(idx[..., None], lat, mu, 1)[..., 0]
        mask = Wp != 0
        W = Wp[..., None, None]
        yq = _neighbours(y, lat, mu, 1)
        hq = _neighbours(h, lat, mu, 1)
        dhq = _neighbours(dh, lat, mu, 1)
        d2hq = _neighbours(d2h, lat, mu, 1)
        delta = (yq - y) / d
        hbar = 0.5 * (h + hq)
        # flux J = W hbar delta enters E_p with -1/d and E_q with +1/d
        dJ_dp = W * (0.5 * np.einsum("...kij,...i->...kj", dh, delta) - hbar / d)
        dJ_dq = W * (0.5 * np.einsum("...kij,...i->...kj", dhq, delta) + hbar / d)
        # source 1/4 W d_k h_ij delta^i delta^j at both ends
        s_p_p = 0.25 * W * np.einsum("...ijkl,...i,...j->...kl", d2h, delta, delta)
        s_q_q = 0.25 * W * np.einsum("...ijkl,...i,...j->...kl", d2hq, delta, delta)
        g_p = 0.5 * W * np.einsum("...ijk,...i->...kj", dh, delta) / d
        g_q = 0.5 * W * np.einsum("...ijk,...i->...kj", dhq, delta) / d
        add(idx, idx, -dJ_dp / d + s_p_p - g_p, mask)
        add(idx, q, -dJ_dq / d + g_p, mask)
        add(q, idx, dJ_dp / d - g_q, mask)
        add(q, q, dJ_dq / d + s_q_q + g_q, mask)
    N = lat.n_sites * n
    H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N)).tocsr()
    H.sum_duplicates()
    return H


def wave_map_linearized(model: WaveMapModel, phi: FieldConfig) -> LinearizedOperator:
    """D_phi from the specialized Hessian; the symbol is read from the target metric."""
    lat = phi.lattice
    H = wave_map_hessian(model, phi)
    hf = phi.target.metric(phi.values)
    ginv = lat.inverse_metric()
    n = phi.target.dim
    m = np.zeros(lat.shape + (2, 2, n, n))
    for mu in range(2):
        m[..., mu, mu, :, :] = ginv[mu][..., None, None] * hf
    sigma = np.einsum("txik,txmnkj->txmnij", np.linalg.inv(hf), m)
    return LinearizedOperator(model.lagrangian, phi, H, hf, sigma)


def centered_jets(phi: FieldConfig) -> np.ndarray:
    """Centered first differences (one-sided at the time ends), shape (2, n_t, n_x, n)."""
    lat = phi.lattice
    y = phi.values
    jt = np.gradient(y, lat.dt, axis=0) if lat.n_t > 1 else np.zeros_like(y)
    jx = (np.roll(y, -1, axis=1) - np.roll(y, 1, axis=1)) / (2 * lat.dx)
    return np.stack([jt, jx])


def curvature_term(model: WaveMapModel, phi: FieldConfig, X) -> np.ndarray:
    """R^k_{ilj} p^a_k phi^l_a X^i per site with p^a_k = g^{aa} h_kj phi^j_a."""
    lat = phi.lattice
    y = phi.values
    xs = X.components if isinstance(X, Variation) else np.asarray(X)
    R = phi.target.riemann(y)
    h = phi.target.metric(y)
    jets = centered_jets(phi)
    ginv = lat.inverse_metric()
    out = np.zeros_like(y)
    for a in range(2):
        p = ginv[a][..., None] * np.einsum("...kj,...j->...k", h, jets[a])
        out += np.einsum("...kilj,...k,...l,...i->...j", R, p, jets[a], xs)
    return out


def mixed_coefficients(model: WaveMapModel, phi: FieldConfig) -> np.ndarray:
    """A^mu_jk = g^{mu mu} phi^i_mu (d_k h_ij - h_jl Gamma^l_ik), shape (2, n_t, n_x, n, n).

    These multiply d_mu X^j Y^k in the second variation written with covariant
    derivatives.
    """
    y = phi.values
    tg = phi.target
    h = tg.metric(y)
    dh = tg.dmetric(y)
    G = tg.christoffel(y)
    jets = centered_jets(phi)
    ginv = phi.lattice.inverse_metric()
    bracket = dh - np.einsum("...jl,...lik->...ijk", h, G)
    return np.stack([ginv[a][..., None, None] * np.einsum("...i,...ijk->...jk", jets[a], bracket)
                     for a in range(2)])


def mixed_antisymmetry(model: WaveMapModel, phi: FieldConfig) -> tuple[float, float]:
    """(max |antisymmetric part|, max |symmetric part|) of the mixed coefficients."""
    A = mixed_coefficients(model, phi)
    anti = 0.5 * (A - np.swapaxes(A, -1, -2))
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    return float(np.abs(anti).max()), float(np.abs(sym).max())


# ----------------------------------------------------------------- backgrounds
def geodesic_background(lat: LorentzianLattice, target: TargetGeometry, base, velocity,
                        substeps: int = 8) -> FieldConfig:
    """phi(t, x) = gamma(t) for the geodesic with gamma(0) = base, gamma'(0) = velocity."""
    T = lat.times()[-1] if lat.n_t > 1 else 0.0
    steps = max(1, (lat.n_t - 1) * substeps)
    v = np.asarray(velocity, dtype=float) * T
    if T == 0.0:
        ys = np.asarray(base, dtype=float)[None]
    else:
        ys, _ = geodesic_path(target, base, v, steps)
        ys = ys[::substeps]
    vals = np.broadcast_to(ys[:, None, :], lat.shape + (target.dim,))
    return FieldConfig(lat, target, vals)


def smooth_background(lat: LorentzianLattice, target: TargetGeometry, amplitude: float,
                      seed: int = 0) -> FieldConfig:
    """Low-mode background with nonzero first jets, scaled to the given chart amplitude."""
    rng = np.random.Generator(np.random.Philox(seed))
    t = lat.times()[:, None]
    x = lat.positions()[None, :]
    L = lat.length
    vals = np.zeros(lat.shape + (target.dim,))
    for i in range(target.dim):
        a, b, c = rng.uniform(-1, 1, 3)
        k = 2 * math.pi / L
        vals[..., i] = a * np.cos(k * (x - t) + b) + c * np.sin(k * (x + t) + 0.5 * b)
    vals *= amplitude / max(1e-300, float(np.abs(vals).max()))
    return FieldConfig(lat, target, vals)


def gaussian_smearing(lat: LorentzianLattice, t0: float, x0: float, width: float) -> np.ndarray:
    """Smooth bump centered at physical (t0, x0), periodic distance in x."""
    t = lat.times()[:, None]
    x = lat.positions()[None, :]
    dx = np.abs(x - x0)
    dx = np.minimum(dx, lat.length - dx)
    r2 = ((t - t0) ** 2 + dx ** 2) / width ** 2
    return np.where(r2 < 1.0, np.exp(-1.0 / np.maximum(1.0 - r2, 1e-300)) * math.e, 0.0)


# ----------------------------------------------------------------- scenarios
PRESETS = ("flat-reduction", "geodesic-background-bracket", "curvature-on")


@dataclass
class ScenarioResult:
    preset: str
    rows: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def _scenario_lattice(N: int, T: float = 1.0, L: float = 2.0) -> LorentzianLattice:
    dx = L / N
    dt = 0.5 * dx
    return LorentzianLattice(int(round(T / dt)) + 1, N, dt, dx)


def _unit_bump(lat, t0, x0, width):
    f = gaussian_smearing(lat, t0, x0, width)
    return f / float((f * lat.vol_weight).sum())


def _scenario_functionals(lat, dim, direction_f=(1.0, 0.5), direction_g=(0.5, 1.0)):
    f = _unit_bump(lat, 0.8, 0.6, 0.18)
    g = _unit_bump(lat, 0.2, 0.9, 0.18)
    if dim == 1:
        return (power_smeared(lat, 1, f, 3, [1.0], "F"), linear_smeared(lat, 1, g, "G"))
    return (power_smeared(lat, dim, f, 3, direction_f, "F"),
            power_smeared(lat, dim, g, 1, direction_g, "G"))


def run_wavemap_scenario(preset: str, resolutions=(16, 32, 64), amplitude: float = 0.3,
                         seed: int = 0) -> ScenarioResult:
    """Bracket values of two smeared observables at several lattice resolutions."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    res = ScenarioResult(preset)
    sphere = builtin_target("sphere2_stereographic")
    flat1 = FlatTarget(1)
    flat2 = FlatTarget(2)
    for N in resolutions:
        lat = _scenario_lattice(N)
        row = {"n_x": N, "n_t": lat.n_t, "dx": lat.dx}
        if preset == "flat-reduction":
            model = WaveMapModel(lat, flat1)
            phi = smooth_background(lat, flat1, amplitude, seed)
            F, G = _scenario_functionals(lat, 1)
            v = bracket_value(model.lagrangian, F, G, phi)
            ref = bracket_value(GeneralizedLagrangian(free_scalar(1)), F, G, phi)
            row.update(value=v, reference=ref, deviation=abs(v - ref))
            res.checks[f"reduction@{N}"] = abs(v - ref) <= 1e-10 * max(1.0, abs(ref))
        elif preset == "geodesic-background-bracket":
            model = WaveMapModel(lat, sphere)
            phi = geodesic_background(lat, sphere, [0.1, -0.05], [0.2, 0.1])
            F, G = _scenario_functionals(lat, 2)
            rep = peierls_bracket(model.lagrangian, F, G, phi)
            rev = bracket_value(model.lagrangian, G, F, phi)
            forms = equivalent_forms(model.lagrangian, F, G, phi)
            anti = abs(rep.value + rev)
            row.update(value=rep.value, retarded=rep.retarded_product,
                       advanced=rep.advanced_product, antisymmetry=anti)
            res.checks[f"antisymmetry@{N}"] = anti <= 1e-12 * rep.scale
            res.checks[f"support@{N}"] = rep.support_check
            res.checks[f"forms@{N}"] = abs(forms["R-A"] - forms["R-Rt"]) <= 1e-10 * forms["scale"]
            # causally disjoint pair: vanishing bracket
            f_far = _unit_bump(lat, 0.5, 0.2, 0.1)
            g_far = _unit_bump(lat, 0.5, 1.2, 0.1)
            Ff = power_smeared(lat, 2, f_far, 2, [1.0, 0.0], "Ff")
            Gf = power_smeared(lat, 2, g_far, 2, [0.0, 1.0], "Gf")
            far = bracket_value(model.lagrangian, Ff, Gf, phi)
            row.update(disjoint_value=far)
            res.checks[f"disjoint@{N}"] = abs(far) <= 1e-12 * max(1.0, abs(far))
        else:
            model = WaveMapModel(lat, sphere)
            phi = smooth_background(lat, sphere, amplitude, seed)
            F, G = _scenario_functionals(lat, 2)
            v = bracket_value(model.lagrangian, F, G, phi)
            flat_phi = FieldConfig(lat, flat2, phi.values)
            ref = bracket_value(GeneralizedLagrangian(free_scalar(2)), F, G, flat_phi)
            row.update(value=v, flat_value=ref, difference=abs(v - ref))
            res.checks[f"curvature_active@{N}"] = abs(v - ref) > 1e-4
        res.rows.append(row)
    return res


def discrete_energy(lat: LorentzianLattice, vals: np.ndarray) -> np.ndarray:
    """Conserved leapfrog energy between rows t and t+1 for the free scalar, per t."""
    v = (vals[1:] - vals[:-1]) / lat.dt
    gx0 = (np.roll(vals[:-1], -1, axis=1) - vals[:-1]) / lat.dx
    gx1 = (np.roll(vals[1:], -1, axis=1) - vals[1:]) / lat.dx
    # the time links carry the averaged space gradient of both rows
    dens = 0.5 * np.sum(v * v, axis=-1) + 0.5 * np.sum(gx0 * gx1, axis=-1)
    return dens.sum(axis=1) * lat.dx


def evolve(model: WaveMapModel, row0, row1, newton_iter: int = 20, tol: float = 1e-13) -> FieldConfig:
    """March E = 0 forward from two initial rows by per-row Newton solves."""
    lat = model.lattice
    n = model.target.dim
    vals = np.zeros(lat.shape + (n,))
    vals[0] = np.asarray(row0, dtype=float).reshape(lat.n_x, n)
    vals[1] = np.asarray(row1, dtype=float).reshape(lat.n_x, n)
    gl = model.lagrangian
    for t in range(1, lat.n_t - 1):
        vals[t + 1] = 2 * vals[t] - vals[t - 1]
        for _ in range(newton_iter):
            phi = FieldConfig(lat, model.target, vals)
            g = gl.gradient(phi)[t]
            if np.abs(g).max() <= tol * max(1.0, np.abs(vals[t]).max()):
                break
            B = gl.engine(phi).time_link_blocks(phi)[t]
            vals[t + 1] = vals[t + 1] - np.linalg.solve(B, g[..., None])[..., 0]
    return FieldConfig(lat, model.target, vals)
