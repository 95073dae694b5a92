"""Retarded and advanced products, the Peierls bracket and its algebraic checks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fields import FieldConfig, Variation, chart_backward
from .green import advanced_solve, retarded_solve
from .observables import Functional, QuadForm, gradient
from .variational import GeneralizedLagrangian, LinearizedOperator, linearize, stencil_neighbourhood


class _Background:
    """Linearization at phi with cached Green solves on density-weighted gradients."""

    def __init__(self, gl: GeneralizedLagrangian, phi: FieldConfig,
                 op: LinearizedOperator | None = None):
        self.gl = gl
        self.phi = phi
        self.op = op if op is not None else linearize(gl, phi)
        self.shape = phi.values.shape

    def ret(self, g: np.ndarray) -> np.ndarray:
        return self._solve(retarded_solve, g)

    def adv(self, g: np.ndarray) -> np.ndarray:
        return self._solve(advanced_solve, g)

    def _solve(self, fn, g):
        g = np.asarray(g)
        if np.iscomplexobj(g):
            return self._solve(fn, g.real) + 1j * self._solve(fn, g.imag)
        arr = g.reshape(self.shape + (-1,))
        out = fn(self.op, arr)
        return out.reshape(g.shape)


def _grad(F: Functional, phi: FieldConfig) -> np.ndarray:
    if F.kernel1 is None:
        raise ValueError(f"missing kernels for {F.name}")
    return gradient(F, phi)


def retarded_product(L: GeneralizedLagrangian, F: Functional, G: Functional,
                     phi: FieldConfig, bg: _Background | None = None) -> float:
    """R_L(F, G)(phi) = <F', G+ G'>."""
    bg = bg or _Background(L, phi)
    return _pair(_grad(F, phi), bg.ret(_grad(G, phi)))


def advanced_product(L: GeneralizedLagrangian, F: Functional, G: Functional,
                     phi: FieldConfig, bg: _Background | None = None) -> float:
    bg = bg or _Background(L, phi)
    return _pair(_grad(F, phi), bg.adv(_grad(G, phi)))


def _pair(a, b):
    v = np.sum(a * b)
    return complex(v) if np.iscomplexobj(v) else float(v)


@dataclass
class BracketReport:
    value: float
    retarded_product: float
    advanced_product: float
    support_check: bool
    lagrangian_locality_check: bool | None = None
    scale: float = 1.0
    form_deviation: float = 0.0
    timings: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "value": _num(self.value),
            "retarded_product": _num(self.retarded_product),
            "advanced_product": _num(self.advanced_product),
            "support_check": bool(self.support_check),
            "lagrangian_locality_check": self.lagrangian_locality_check,
            "scale": _num(self.scale),
            "form_deviation": _num(self.form_deviation),
        }


def _num(x):
    if isinstance(x, complex):
        return [float(x.real), float(x.imag)]
    return float(x)


def _scale(*vals) -> float:
    return max([1.0] + [abs(v) for v in vals])


def bracket_value(L, F, G, phi, bg: _Background | None = None) -> float:
    bg = bg or _Background(L, phi)
    gF, gG = _grad(F, phi), _grad(G, phi)
    return _pair(gF, bg.ret(gG) - bg.adv(gG))


def _support_masks(F: Functional, G: Functional, phi: FieldConfig):
    lat = phi.lattice
    m = []
    for H in (F, G):
        g = np.asarray(H.kernel1(phi))
        scale = max(1e-300, float(np.abs(g).max()) if g.size else 0.0)
        m.append(np.any(np.abs(g) > 1e-14 * scale, axis=-1) if g.size and scale > 1e-300
                 else np.zeros(lat.shape, bool))
    return m


def causal_region(lat, mF: np.ndarray, mG: np.ndarray) -> np.ndarray:
    """(J+(F) u J-(F)) n (J+(G) u J-(G)) as a site mask."""
    return lat.causal_hull(mF) & lat.causal_hull(mG)


def peierls_bracket(L: GeneralizedLagrangian, F: Functional, G: Functional, phi: FieldConfig,
                    check_support: bool = True, perturbation: float = 0.05) -> BracketReport:
    """{F, G}_L = R_L(F, G) - A_L(F, G) with the support and form cross-checks."""
    timings = {}
    t0 = time.perf_counter()
    bg = _Background(L, phi)
    timings["linearize"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    gF, gG = _grad(F, phi), _grad(G, phi)
    rG, aG, rF = bg.ret(gG), bg.adv(gG), bg.ret(gF)
    R = _pair(gF, rG)
    A = _pair(gF, aG)
    RGF = _pair(gG, rF)
    value = R - A
    timings["solve"] = time.perf_counter() - t0
    scale = _scale(R, A, RGF)
    dev = abs((R - A) - (R - RGF))
    ok = dev <= 1e-10 * scale
    if check_support:
        t0 = time.perf_counter()
        ok &= _support_invariance(L, F, G, phi, value, scale, perturbation)
        timings["support_check"] = time.perf_counter() - t0
    return BracketReport(value, R, A, bool(ok), None, scale, dev, timings)


def _support_invariance(L, F, G, phi, value, scale, amp) -> bool:
    """Perturb phi at a site whose stencil stays clear of the causal region."""
    lat = phi.lattice
    mF, mG = _support_masks(F, G, phi)
    if not mF.any() or not mG.any():
        return True
    region = lat.future_mask(mF) & lat.past_mask(mG) | lat.past_mask(mF) & lat.future_mask(mG)
    region |= mF | mG
    blocked = stencil_neighbourhood(lat, stencil_neighbourhood(lat, region))
    free = np.argwhere(~blocked)
    if len(free) == 0:
        return True
    it, ix = free[len(free) // 2]
    comp = np.zeros_like(phi.values)
    comp[it, ix, 0] = amp
    psi = chart_backward(phi, Variation(phi, comp))
    # F and G must not see the perturbation either
    other = bracket_value(L, F, G, psi)
    return abs(other - value) <= 1e-12 * scale


def equivalent_forms(L, F, G, phi) -> dict:
    """R(F,G) - A(F,G), R(F,G) - R(G,F) and A(G,F) - A(F,G)."""
    bg = _Background(L, phi)
    gF, gG = _grad(F, phi), _grad(G, phi)
    rF, aF, rG, aG = bg.ret(gF), bg.adv(gF), bg.ret(gG), bg.adv(gG)
    R_fg, A_fg = _pair(gF, rG), _pair(gF, aG)
    R_gf, A_gf = _pair(gG, rF), _pair(gG, aF)
    return {"R-A": R_fg - A_fg, "R-Rt": R_fg - R_gf, "At-A": A_gf - A_fg,
            "scale": _scale(R_fg, A_fg, R_gf, A_gf)}


def bracket_gradient(L, G: Functional, H: Functional, phi: FieldConfig,
                     bg: _Background | None = None) -> np.ndarray:
    """Density-weighted gradient of phi -> {G, H}(phi), flat.

    d{G,H}(X) = G''(X, C H') - H''(X, C G') + G' dC(X) H' with C = G+ - G-,
    and dC(X) = G+ T_X G+ - G- T_X G- for T_X the third derivative of the
    action along X (so the last term is a third-derivative contraction).
    """
    bg = bg or _Background(L, phi)
    if G.kernel2 is None or H.kernel2 is None:
        raise ValueError("missing kernels")
    gG, gH = _grad(G, phi), _grad(H, phi)
    rG, aG, rH, aH = bg.ret(gG), bg.adv(gG), bg.ret(gH), bg.adv(gH)
    cH, cG = rH - aH, rG - aG
    out = G.kernel2(phi).matvec(cH) - H.kernel2(phi).matvec(cG)
    shape = phi.values.shape
    v = (L.third_vector(phi, aG.reshape(shape), rH.reshape(shape))
         - L.third_vector(phi, rG.reshape(shape), aH.reshape(shape)))
    return out + v.ravel()


def nested_bracket(L, F, G, H, phi, bg=None) -> float:
    """{F, {G, H}} with the inner bracket differentiated analytically."""
    bg = bg or _Background(L, phi)
    gF = _grad(F, phi)
    gB = bracket_gradient(L, G, H, phi, bg)
    return _pair(gF, bg.ret(gB) - bg.adv(gB))


def jacobi_residual(L: GeneralizedLagrangian, F: Functional, G: Functional, H: Functional,
                    phi: FieldConfig, mode: str = "analytic") -> float:
    """|{F,{G,H}} + {G,{H,F}} + {H,{F,G}}| at phi.

    mode "fd" differentiates the inner brackets by centered finite differences
    instead (one pair of brackets per coordinate; small lattices only).
    """
    bg = _Background(L, phi)
    if mode == "analytic":
        terms = [nested_bracket(L, F, G, H, phi, bg), nested_bracket(L, G, H, F, phi, bg),
                 nested_bracket(L, H, F, G, phi, bg)]
    elif mode == "fd":
        terms = []
        for A, B, C in ((F, G, H), (G, H, F), (H, F, G)):
            gB = _fd_bracket_gradient(L, B, C, phi)
            gA = _grad(A, phi)
            terms.append(_pair(gA, bg.ret(gB) - bg.adv(gB)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return abs(sum(terms))


def _fd_bracket_gradient(L, G, H, phi, h: float = 1e-5) -> np.ndarray:
    base = phi.values.reshape(-1)
    out = np.zeros(base.size)
    for j in range(base.size):
        vals = []
        for s in (h, -h):
            v = base.copy()
            v[j] += s
            vals.append(bracket_value(L, G, H, phi.with_values(v.reshape(phi.values.shape))))
        out[j] = (vals[0] - vals[1]) / (2 * h)
    return out


def leibniz_check(L: GeneralizedLagrangian, F: Functional, G: Functional, H: Functional,
                  phi: FieldConfig) -> float:
    """|{F, G H} - (G {F, H} + {F, G} H)|."""
    bg = _Background(L, phi)
    lhs = bracket_value(L, F, G * H, phi, bg)
    rhs = G(phi) * bracket_value(L, F, H, phi, bg) + bracket_value(L, F, G, phi, bg) * H(phi)
    return abs(lhs - rhs)


@dataclass
class LocalityReport:
    passed: bool
    difference: float
    scale: float
    overlaps_region: bool


def lagrangian_locality_check(L1: GeneralizedLagrangian, L2: GeneralizedLagrangian,
                              F: Functional, G: Functional, phi: FieldConfig,
                              allow_overlap: bool = False, rtol: float = 1e-10) -> LocalityReport:
    """Compare {F,G} under two Lagrangians whose linearizations differ off the causal region.

    The sites where the two linearizations differ are read off the Hessians.
    Unless ``allow_overlap`` is set, a difference within one link of the
    region raises, since the theorem then makes no claim.
    """
    lat = phi.lattice
    H1, H2 = L1.hessian(phi), L2.hessian(phi)
    diff = (H1 - H2).tocoo()
    n = phi.target.dim
    touched = np.zeros(lat.n_sites, bool)
    # ignore roundoff from the different summation order of the two assemblies
    hmax = max(float(np.abs(H1.data).max(initial=0.0)), float(np.abs(H2.data).max(initial=0.0)))
    big = np.abs(diff.data) > 1e-13 * hmax
    touched[diff.row[big] // n] = True
    touched[diff.col[big] // n] = True
    touched = touched.reshape(lat.shape)
    mF, mG = _support_masks(F, G, phi)
    region = causal_region(lat, mF, mG)
    overlap = bool(np.any(stencil_neighbourhood(lat, region) & touched))
    if overlap and not allow_overlap:
        raise ValueError("modification window overlaps the causal region")
    v1 = bracket_value(L1, F, G, phi)
    v2 = bracket_value(L2, F, G, phi)
    scale = _scale(v1, v2)
    d = abs(v1 - v2)
    return LocalityReport(d < rtol * scale, d, scale, overlap)


# ------------------------------------------------------------- on-shell ideal
@dataclass
class VariationFamily:
    """phi -> X_phi, affine in phi; ``jacobian`` gives dX/dphi as a sparse matrix."""

    components: Callable[[FieldConfig], np.ndarray]
    jacobian: Callable[[FieldConfig], sp.spmatrix] | None = None

    @classmethod
    def fixed(cls, comp) -> "VariationFamily":
        c = np.array(comp, dtype=float)
        c.setflags(write=False)
        return cls(lambda phi: c, None)

    @classmethod
    def scaled_field(cls, a) -> "VariationFamily":
        """X_phi = a(x) phi(x) (chart coordinates)."""
        a = np.array(a, dtype=float)

        def comp(phi):
            return a[..., None] * phi.values

        def jac(phi):
            return sp.diags(np.repeat(a.ravel(), phi.target.dim), format="csr")
        return cls(comp, jac)


def onshell_ideal_element(L: GeneralizedLagrangian, X: VariationFamily, lattice,
                          name: str = "ideal") -> Functional:
    """F(phi) = integrate(X_phi . E(L)_phi) = X_phi . dS(phi)."""
    dim = L.density.dim
    w = lattice.vol_weight[..., None]

    def ev(phi):
        return float(np.sum(X.components(phi) * L.gradient(phi)))

    def k1(phi):
        x = X.components(phi)
        g = (L.hessian(phi) @ x.ravel())
        if X.jacobian is not None:
            g = g + X.jacobian(phi).T @ L.gradient(phi).ravel()
        return g.reshape(phi.values.shape) / w

    def k2(phi):
        x = X.components(phi)
        M = L.third_matrix(phi, x)
        if X.jacobian is not None:
            J = X.jacobian(phi)
            Hs = L.hessian(phi)
            M = M + J.T @ Hs + Hs @ J
        return QuadForm(lattice.n_sites * dim, sp.csr_matrix(M))

    return Functional(lattice, dim, ev, k1, k2, "local", None, name)
