"""Functionals on sections: kernels, supports, classes, additivity and the *-algebra.

Kernel conventions for a functional F at a section phi (flat index a runs over
(site, component)):

- ``kernel1(phi)`` is a per-site covector k with F'(X) = integrate(k . X);
  :func:`gradient` returns the density-weighted flat vector vol * k.
- ``kernel2(phi)`` is a :class:`QuadForm` M with F''(X, Y) = X^T M Y in plain
  chart coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .fields import (FieldConfig, PullbackConnection, Variation, chart_backward,
                     interpolate_sections)
from .lattice import LorentzianLattice, SitePoint, integrate
from .variational import GeneralizedLagrangian, evaluate_action, stencil_neighbourhood

CLASSES = ("generic", "regular", "local", "microlocal")
JUMP_THRESHOLD = 0.5


class QuadForm:
    """Symmetric bilinear form: sparse part plus a sum of coef * u v^T terms."""

    def __init__(self, size: int, sparse=None, terms=()):
        self.size = size
        self.sparse = sparse
        self.terms = list(terms)

    @classmethod
    def zero(cls, size: int) -> "QuadForm":
        return cls(size)

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x)
        dt = complex if (self._is_complex() or np.iscomplexobj(x)) else float
        out = np.zeros(x.shape, dtype=dt)
        if self.sparse is not None:
            out = out + self.sparse @ x
        for c, u, v in self.terms:
            out = out + c * np.multiply.outer(u, v @ x)
        return out

    def _is_complex(self) -> bool:
        if self.sparse is not None and np.iscomplexobj(self.sparse.data):
            return True
        return any(np.iscomplexobj(c) or np.iscomplexobj(u) or np.iscomplexobj(v)
                   for c, u, v in self.terms)

    def bilinear(self, x, y):
        return np.asarray(x).ravel() @ self.matvec(np.asarray(y).ravel())

    def to_dense(self) -> np.ndarray:
        dt = complex if self._is_complex() else float
        out = np.zeros((self.size, self.size), dtype=dt)
        if self.sparse is not None:
            out += self.sparse.toarray()
        for c, u, v in self.terms:
            out += c * np.outer(u, v)
        return out

    def scaled(self, s) -> "QuadForm":
        sp_ = None if self.sparse is None else self.sparse * s
        return QuadForm(self.size, sp_, [(c * s, u, v) for c, u, v in self.terms])

    def __add__(self, other: "QuadForm") -> "QuadForm":
        if self.sparse is None:
            sp_ = other.sparse
        elif other.sparse is None:
            sp_ = self.sparse
        else:
            sp_ = self.sparse + other.sparse
        return QuadForm(self.size, sp_, self.terms + other.terms)

    def conj(self) -> "QuadForm":
        sp_ = None if self.sparse is None else self.sparse.conj()
        return QuadForm(self.size, sp_, [(np.conj(c), np.conj(u), np.conj(v))
                                         for c, u, v in self.terms])


class Functional:
    """An observable phi -> F(phi) with optional derivative kernels."""

    def __init__(self, lattice: LorentzianLattice, dim: int,
                 evaluate: Callable[[FieldConfig], complex],
                 kernel1: Callable | None = None, kernel2: Callable | None = None,
                 declared_class: str = "generic", declared_support: set | None = None,
                 name: str = "F", is_complex: bool = False):
        if declared_class not in CLASSES:
            raise ValueError(f"unknown class {declared_class!r}")
        self.lattice = lattice
        self.dim = dim
        self._evaluate = evaluate
        self.kernel1 = kernel1
        self.kernel2 = kernel2
        self.declared_class = declared_class
        self.declared_support = declared_support
        self.name = name
        self.is_complex = is_complex

    def __repr__(self) -> str:
        return f"Functional({self.name}, class={self.declared_class})"

    @property
    def size(self) -> int:
        return self.lattice.n_sites * self.dim

    def __call__(self, phi: FieldConfig):
        return self.evaluate(phi)

    def evaluate(self, phi: FieldConfig):
        if not phi.lattice.same_as(self.lattice):
            raise ValueError("mismatched lattices")
        v = self._evaluate(phi)
        return complex(v) if self.is_complex else float(np.real_if_close(v))

    def _check(self, other: "Functional"):
        if not self.lattice.same_as(other.lattice) or self.dim != other.dim:
            raise ValueError("mismatched lattices")

    # ------------------------------------------------------------- algebra
    def __add__(self, other):
        if not isinstance(other, Functional):
            return self + constant_functional(self.lattice, self.dim, other)
        self._check(other)
        k1 = k2 = None
        if self.kernel1 is not None and other.kernel1 is not None:
            k1 = (lambda phi, a=self, b=other: a.kernel1(phi) + b.kernel1(phi))
        if self.kernel2 is not None and other.kernel2 is not None:
            k2 = (lambda phi, a=self, b=other: a.kernel2(phi) + b.kernel2(phi))
        return Functional(self.lattice, self.dim, lambda phi: self(phi) + other(phi), k1, k2,
                          _join_class(self, other, product=False),
                          _union_support(self, other), f"({self.name}+{other.name})",
                          self.is_complex or other.is_complex)

    __radd__ = __add__

    def __mul__(self, other):
        if not isinstance(other, Functional):
            z = other
            k1 = None if self.kernel1 is None else (lambda phi: z * self.kernel1(phi))
            k2 = None if self.kernel2 is None else (lambda phi: self.kernel2(phi).scaled(z))
            return Functional(self.lattice, self.dim, lambda phi: z * self(phi), k1, k2,
                              self.declared_class, self.declared_support,
                              f"{z}*{self.name}", self.is_complex or np.iscomplexobj(z))
        self._check(other)
        a, b = self, other
        k1 = k2 = None
        if a.kernel1 is not None and b.kernel1 is not None:
            def k1(phi):  # noqa: F811
                return a(phi) * b.kernel1(phi) + b(phi) * a.kernel1(phi)
            if a.kernel2 is not None and b.kernel2 is not None:
                def k2(phi):  # noqa: F811
                    ga, gb = gradient(a, phi), gradient(b, phi)
                    form = a.kernel2(phi).scaled(b(phi)) + b.kernel2(phi).scaled(a(phi))
                    return form + QuadForm(a.size, None, [(1.0, ga, gb), (1.0, gb, ga)])
        return Functional(a.lattice, a.dim, lambda phi: a(phi) * b(phi), k1, k2,
                          _join_class(a, b, product=True), _union_support(a, b),
                          f"({a.name}*{b.name})", a.is_complex or b.is_complex)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Functional) else -other)

    def conj(self) -> "Functional":
        k1 = None if self.kernel1 is None else (lambda phi: np.conj(self.kernel1(phi)))
        k2 = None if self.kernel2 is None else (lambda phi: self.kernel2(phi).conj())
        return Functional(self.lattice, self.dim, lambda phi: np.conj(self(phi)), k1, k2,
                          self.declared_class, self.declared_support, f"{self.name}*",
                          self.is_complex)


def _join_class(a: Functional, b: Functional, product: bool) -> str:
    order = {"generic": 0, "regular": 1, "local": 2, "microlocal": 3}
    lo = min(order[a.declared_class], order[b.declared_class])
    if product:
        # products of local functionals are regular, not local (off-diagonal Hessian)
        consts = [f for f in (a, b) if f.declared_support == set()]
        if consts:
            other = b if consts[0] is a else a
            return other.declared_class
        lo = min(lo, order["regular"])
    return CLASSES[lo] if lo < 3 else "microlocal"


def _union_support(a: Functional, b: Functional):
    if a.declared_support is None or b.declared_support is None:
        return None
    return set(a.declared_support) | set(b.declared_support)


def gradient(F: Functional, phi: FieldConfig) -> np.ndarray:
    """Flat density-weighted first derivative vol * kernel1."""
    if F.kernel1 is None:
        raise ValueError("missing kernels")
    k = np.asarray(F.kernel1(phi))
    return (k * phi.lattice.vol_weight[..., None]).ravel()


def _site_dist_mask(lat: LorentzianLattice, mask: np.ndarray) -> set[SitePoint]:
    return LorentzianLattice.sites_from_mask(mask)


# -------------------------------------------------------------- built-ins
def _as_site_array(lat, dim, f):
    arr = np.asarray(f, dtype=float)
    if arr.shape == lat.shape:
        arr = np.repeat(arr[..., None], dim, axis=-1) if dim > 1 else arr[..., None]
    if arr.shape != lat.shape + (dim,):
        raise ValueError(f"smearing shape {arr.shape} does not match {lat.shape + (dim,)}")
    return arr


def constant_functional(lat: LorentzianLattice, dim: int, c=1.0) -> Functional:
    size = lat.n_sites * dim
    is_c = bool(np.iscomplexobj(c))
    return Functional(lat, dim, lambda phi: c,
                      lambda phi: np.zeros(lat.shape + (dim,)),
                      lambda phi: QuadForm.zero(size), "microlocal", set(),
                      f"const({c})", is_c)


def unit_functional(lat: LorentzianLattice, dim: int) -> Functional:
    return constant_functional(lat, dim, 1.0)


def linear_smeared(lat: LorentzianLattice, dim: int, f, name: str = "lin") -> Functional:
    """F(phi) = integrate(f . phi)."""
    fa = _as_site_array(lat, dim, f)
    fa.setflags(write=False)
    supp = _site_dist_mask(lat, np.any(fa != 0, axis=-1))
    size = lat.n_sites * dim
    return Functional(lat, dim, lambda phi: integrate(lat, fa * phi.values),
                      lambda phi: fa.copy(), lambda phi: QuadForm.zero(size),
                      "microlocal", supp, name)


def power_smeared(lat: LorentzianLattice, dim: int, f, p: int, direction=None,
                  name: str | None = None) -> Functional:
    """F(phi) = integrate(f (a . phi)^p / p) for a fixed direction a in the chart."""
    fs = np.asarray(f, dtype=float)
    if fs.shape != lat.shape:
        raise ValueError("smearing must be a per-site scalar array")
    a = np.zeros(dim) if direction is None else np.asarray(direction, dtype=float)
    if direction is None:
        a[0] = 1.0
    w = lat.vol_weight
    supp = _site_dist_mask(lat, fs != 0)
    n_sites = lat.n_sites

    def ev(phi):
        s = phi.values @ a
        return integrate(lat, fs * s ** p / p)

    def k1(phi):
        s = phi.values @ a
        return (fs * s ** (p - 1))[..., None] * a

    def k2(phi):
        s = phi.values @ a
        c = (w * fs * (p - 1) * s ** (p - 2)).ravel() if p >= 2 else np.zeros(n_sites)
        aa = np.outer(a, a)
        nz = np.nonzero(aa)
        rows = (np.arange(n_sites)[:, None] * dim + nz[0]).ravel()
        cols = (np.arange(n_sites)[:, None] * dim + nz[1]).ravel()
        vals = (c[:, None] * aa[nz]).ravel()
        size = n_sites * dim
        return QuadForm(size, sp.csr_matrix((vals, (rows, cols)), shape=(size, size)))

    return Functional(lat, dim, ev, k1, k2, "microlocal", supp, name or f"pow{p}")


def quadratic_smeared(lat: LorentzianLattice, dim: int, f, name: str = "quad") -> Functional:
    """F(phi) = integrate(f |phi|^2 / 2) (Euclidean chart norm)."""
    fs = np.asarray(f, dtype=float)
    if fs.shape != lat.shape:
        raise ValueError("smearing must be a per-site scalar array")
    supp = _site_dist_mask(lat, fs != 0)
    diag = np.repeat((lat.vol_weight * fs).ravel(), dim)
    return Functional(lat, dim,
                      lambda phi: integrate(lat, 0.5 * fs * np.sum(phi.values ** 2, axis=-1)),
                      lambda phi: fs[..., None] * phi.values,
                      lambda phi: QuadForm(lat.n_sites * dim, sp.diags(diag, format="csr")),
                      "microlocal", supp, name)


def action_functional(gl: GeneralizedLagrangian, lat: LorentzianLattice, f,
                      name: str = "action") -> Functional:
    """phi -> evaluate_action(gl, f, phi); kernels from the discrete action."""
    fa = np.broadcast_to(np.asarray(f, dtype=float), lat.shape).copy()
    fa.setflags(write=False)
    dim = gl.density.dim
    supp = _site_dist_mask(lat, stencil_neighbourhood(lat, fa != 0))
    w = lat.vol_weight[..., None]

    def k2(phi):
        return QuadForm(lat.n_sites * dim, gl.hessian(phi, fa))

    return Functional(lat, dim, lambda phi: evaluate_action(gl, fa, phi),
                      lambda phi: gl.gradient(phi, fa) / w, k2, "microlocal", supp, name)


def characteristic_action(gl: GeneralizedLagrangian, lat: LorentzianLattice, mask,
                          name: str = "action_chi") -> Functional:
    """Action with the characteristic function of a region as cutoff."""
    F = action_functional(gl, lat, np.asarray(mask, dtype=float), name)
    F.declared_class = "local"
    return F


def smooth_step(t):
    """chi: 1 for |t| <= 1/2, 0 for |t| >= 1, smooth in between; with chi', chi''."""
    t = np.abs(np.asarray(t, dtype=float))
    s = np.clip(2.0 * (t - 0.5), 0.0, 1.0)

    def psi(u):
        return np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)

    def dpsi(u):
        uu = np.where(u > 0, u, 1.0)
        return np.where(u > 0, np.exp(-1.0 / uu) / uu ** 2, 0.0)

    def d2psi(u):
        uu = np.where(u > 0, u, 1.0)
        return np.where(u > 0, np.exp(-1.0 / uu) * (1 - 2 * uu) / uu ** 4, 0.0)

    a, b = psi(1 - s), psi(s)
    da, db = -dpsi(1 - s), dpsi(s)
    d2a, d2b = d2psi(1 - s), d2psi(s)
    den = a + b
    val = a / den
    dval = (da * den - a * (da + db)) / den ** 2
    d2val = ((d2a * den - a * (d2a + d2b)) * den - 2 * (da * den - a * (da + db)) * (da + db)) / den ** 3
    inner = (t > 0.5) & (t < 1.0)
    chi = np.where(t <= 0.5, 1.0, np.where(t >= 1.0, 0.0, val))
    # ds/dt = 2 (sign of t handled by the caller through t >= 0 inputs)
    d1 = np.where(inner, 2.0 * dval, 0.0)
    d2 = np.where(inner, 4.0 * d2val, 0.0)
    return chi, d1, d2


def regular_exp_functional(gl: GeneralizedLagrangian, lat: LorentzianLattice, f,
                           name: str = "G_exp") -> Functional:
    """G(phi) = exp(1 - chi(L_f(phi)^2)): regular but not local."""
    L = action_functional(gl, lat, f)

    def psi(s):
        c, dc, d2c = smooth_step(s * s)
        val = math.exp(1.0 - float(c))
        d1 = -val * float(dc) * 2 * s
        d2 = val * ((float(dc) * 2 * s) ** 2 - float(d2c) * 4 * s * s - float(dc) * 2)
        return val, d1, d2

    G = smooth_compose(lambda z: psi(z[0])[0], [L],
                       grad=lambda z: np.array([psi(z[0])[1]]),
                       hess=lambda z: np.array([[psi(z[0])[2]]]), name=name)
    G.declared_class = "regular"
    return G


def sup_functional(lat: LorentzianLattice, dim: int, name: str = "sup") -> Functional:
    """1 / (1 + max_x |phi(x)|^2); evaluation only."""
    return Functional(lat, dim, lambda phi: 1.0 / (1.0 + float(np.max(np.sum(phi.values ** 2, -1)))),
                      None, None, "generic", None, name)


def smooth_compose(psi: Callable, Fs: Sequence[Functional], grad: Callable | None = None,
                   hess: Callable | None = None, name: str = "psi") -> Functional:
    """psi(F_1, ..., F_n) with chain-rule kernels; support is the union."""
    Fs = list(Fs)
    if not Fs:
        raise ValueError("need at least one functional")
    lat, dim = Fs[0].lattice, Fs[0].dim
    for F in Fs[1:]:
        Fs[0]._check(F)

    def vals(phi):
        return np.array([F(phi) for F in Fs])

    k1 = k2 = None
    if grad is not None and all(F.kernel1 is not None for F in Fs):
        def k1(phi):
            d = grad(vals(phi))
            return sum(d[j] * np.asarray(F.kernel1(phi)) for j, F in enumerate(Fs))
        if hess is not None and all(F.kernel2 is not None for F in Fs):
            def k2(phi):
                z = vals(phi)
                d, dd = grad(z), hess(z)
                form = QuadForm.zero(Fs[0].size)
                for j, F in enumerate(Fs):
                    form = form + F.kernel2(phi).scaled(d[j])
                gs = [gradient(F, phi) for F in Fs]
                terms = [(dd[j, k], gs[j], gs[k]) for j in range(len(Fs)) for k in range(len(Fs))
                         if dd[j, k] != 0]
                return form + QuadForm(Fs[0].size, None, terms)
    supp = None
    if all(F.declared_support is not None for F in Fs):
        supp = set().union(*[F.declared_support for F in Fs])
    cls = Fs[0].declared_class if len(Fs) == 1 else "regular"
    return Functional(lat, dim, lambda phi: psi(vals(phi)), k1, k2, cls, supp, name,
                      any(F.is_complex for F in Fs))


# ------------------------------------------------------------- operations
def algebra_ops(F: Functional, G: Functional, z=1.0) -> dict:
    """The four *-algebra operations: F+G, zF, FG and F*."""
    return {"sum": F + G, "scale": F * z, "product": F * G, "conj": F.conj()}


def _fd_probe_amplitude(phi: FieldConfig, amp: float | None) -> np.ndarray:
    if amp is not None:
        return np.full(phi.values.shape, float(amp))
    return 1e-5 * (1.0 + np.abs(phi.values))


def probe_support(F: Functional, phi_samples: Sequence[FieldConfig],
                  probe_amplitude: float | None = None) -> set[SitePoint]:
    """Union over samples of the sites where F responds to a variation."""
    lat = F.lattice
    out = np.zeros(lat.shape, dtype=bool)
    for phi in phi_samples:
        if F.kernel1 is not None:
            k = np.abs(np.asarray(F.kernel1(phi)))
            scale = max(1.0, float(k.max()) if k.size else 0.0)
            out |= np.any(k > 1e-12 * scale, axis=-1)
            continue
        base = F(phi)
        scale = max(1.0, abs(base))
        steps = _fd_probe_amplitude(phi, probe_amplitude)
        for it in range(lat.n_t):
            for ix in range(lat.n_x):
                for i in range(F.dim):
                    comp = np.zeros_like(phi.values)
                    comp[it, ix, i] = steps[it, ix, i]
                    if abs(F(chart_backward(phi, Variation(phi, comp))) - base) > 1e-12 * scale:
                        out[it, ix] = True
                        break
    return LorentzianLattice.sites_from_mask(out)


def covariant_hessian(F: Functional, phi: FieldConfig, conn: PullbackConnection,
                      X: Variation, Y: Variation) -> float:
    """F''(X, Y) + F'(Gamma_phi(X, Y))."""
    if F.kernel1 is None or F.kernel2 is None:
        raise ValueError("missing kernels")
    plain = F.kernel2(phi).bilinear(X.components, Y.components)
    corr = integrate(phi.lattice, np.asarray(F.kernel1(phi)) * conn.apply(X, Y).components)
    return plain + corr


@dataclass
class AdditivityReport:
    lhs: float
    rhs: float
    scale: float
    passed: bool

    @property
    def deviation(self) -> float:
        return abs(self.lhs - self.rhs)


def additivity_test(F: Functional, phi0: FieldConfig, X1: Variation, Xm1: Variation,
                    rtol: float = 1e-10) -> AdditivityReport:
    """F(exp(X1 + Xm1)) against F(exp X1) - F(phi0) + F(exp Xm1)."""
    if np.any(X1.support_mask & Xm1.support_mask):
        raise ValueError("overlapping supports")
    both = chart_backward(phi0, X1 + Xm1)
    f_both = F(both)
    f1 = F(chart_backward(phi0, X1))
    fm = F(chart_backward(phi0, Xm1))
    f0 = F(phi0)
    rhs = f1 - f0 + fm
    scale = max(1.0, abs(f_both), abs(f1), abs(f0), abs(fm))
    return AdditivityReport(f_both, rhs, scale, abs(f_both - rhs) <= rtol * scale)


def global_additivity_test(F: Functional, phi1: FieldConfig, phi0: FieldConfig,
                           phi_m1: FieldConfig, rtol: float = 1e-10) -> AdditivityReport:
    """F(glued) against F(phi1) - F(phi0) + F(phi_m1)."""
    glued, _ = interpolate_sections(phi0, phi1, phi_m1)
    lhs = F(glued)
    f1, f0, fm = F(phi1), F(phi0), F(phi_m1)
    rhs = f1 - f0 + fm
    scale = max(1.0, abs(lhs), abs(f1), abs(f0), abs(fm))
    return AdditivityReport(lhs, rhs, scale, abs(lhs - rhs) <= rtol * scale)


def nonlocal_entries_mask(lat: LorentzianLattice, dim: int) -> np.ndarray:
    """Boolean (N, N) mask of entries whose sites are more than one link apart."""
    t = np.repeat(np.arange(lat.n_t), lat.n_x)
    x = np.tile(np.arange(lat.n_x), lat.n_t)
    dt = np.abs(t[:, None] - t[None, :])
    dx = np.abs(x[:, None] - x[None, :]) % lat.n_x
    dx = np.minimum(dx, lat.n_x - dx)
    far = np.maximum(dt, dx) > 1
    return np.kron(far, np.ones((dim, dim), dtype=bool)).astype(bool)


def jump_ratio(k1: np.ndarray) -> float:
    """Largest jump of k1 between adjacent sites, relative to max |k1|.

    A kernel resolved on the lattice changes by O(dx / feature length) per
    link; a cutoff with a jump leaves an O(1/dx) layer that drops to zero on
    the neighbouring site, so the ratio is close to 1.
    """
    k = np.asarray(k1)
    top = float(np.sqrt(np.sum(np.abs(k) ** 2, axis=-1)).max()) if k.size else 0.0
    if top == 0.0:
        return 0.0
    best = 0.0
    # time axis (no wrap) and periodic space axis
    if k.shape[0] >= 2:
        best = max(best, float(np.sqrt(np.sum(np.abs(np.diff(k, axis=0)) ** 2, axis=-1)).max()))
    if k.shape[1] >= 2:
        d = np.roll(k, -1, axis=1) - k
        best = max(best, float(np.sqrt(np.sum(np.abs(d) ** 2, axis=-1)).max()))
    return best / top


@dataclass
class ClassReport:
    tag: str
    local: bool
    regular: bool
    microlocal_surrogate: bool
    boundary_singular: bool
    jump_ratio: float
    max_offdiag: float


def _dense_second(F: Functional, phi: FieldConfig) -> np.ndarray:
    if F.kernel2 is not None:
        return F.kernel2(phi).to_dense()
    # finite differences of the first kernel
    N = F.size
    out = np.zeros((N, N))
    base = phi.values.reshape(-1)
    for j in range(N):
        h = 1e-5 * (1.0 + abs(base[j]))
        cols = []
        for s in (h, -h, 0.5 * h, -0.5 * h):
            v = base.copy()
            v[j] += s
            cols.append(gradient(F, phi.with_values(v.reshape(phi.values.shape))))
        c1 = (cols[0] - cols[1]) / (2 * h)
        c2 = (cols[2] - cols[3]) / h
        out[:, j] = (4 * c2 - c1) / 3
    return out


def classify(F: Functional, phi_samples: Sequence[FieldConfig],
             max_dense: int = 4096) -> ClassReport:
    """Discrete surrogate of the functional classes.

    local: second kernel vanishes beyond one link (the stencil radius).
    microlocal-surrogate: local and no adjacent-site jump of the first kernel
    reaches half its maximum; otherwise boundary-singular.  Samples and
    cutoffs must be resolved on the lattice.
    regular: kernels exist and are finite but the second kernel is not local.
    """
    if F.kernel1 is None:
        return ClassReport("generic", False, False, False, False, float("nan"), float("nan"))
    lat = F.lattice
    if F.size > max_dense:
        raise ValueError(f"classification lattice too large ({F.size} > {max_dense})")
    far = nonlocal_entries_mask(lat, F.dim)
    off = 0.0
    finite = True
    jr = 0.0
    for phi in phi_samples:
        K = _dense_second(F, phi)
        finite &= bool(np.all(np.isfinite(K)))
        scale = max(1.0, float(np.abs(K).max()))
        off = max(off, float(np.abs(K[far]).max(initial=0.0)) / scale)
        jr = max(jr, jump_ratio(F.kernel1(phi)))
    local = off <= 1e-8
    if not finite:
        return ClassReport("generic", False, False, False, False, jr, off)
    if not local:
        return ClassReport("regular", False, True, False, False, jr, off)
    singular = jr > JUMP_THRESHOLD
    tag = "boundary-singular" if singular else "microlocal-surrogate"
    return ClassReport(tag, True, True, not singular, singular, jr, off)
