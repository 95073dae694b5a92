"""First-order Lagrangian densities and their discrete variational calculus.

A density has the split form

    lambda(x, y, y_t, y_x) = sum_mu a^mu(x) K(y, y_mu) + b(x) V(y)

summed over a list of kinetic and potential terms.  On the lattice the
action is built from *links*: every time link (t,x)->(t+1,x) and every space
link (t,x)->(t,x+1) carries the difference quotient of the field, and K is
averaged over the two link endpoints.  The discrete Euler-Lagrange kernel is
the exact gradient of this action, so pairing, Hessian and third derivative
are mutually consistent to rounding, the time stencil couples only adjacent
rows (explicit marching), and every stencil is second-order accurate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fields import FieldConfig, Variation, chart_backward
from .geometry import TargetGeometry
from .lattice import LorentzianLattice, integrate

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


# ------------------------------------------------------------------ vertices
class KineticVertex:
    """K(y, v) with derivative tensors in z = (y, v) up to third order."""

    quadratic: bool = True

    def derivs(self, y, v, order: int):
        raise NotImplementedError


class MetricKinetic(KineticVertex):
    """K = 1/2 k_ij(y) v^i v^j with k the target metric (or identity)."""

    def __init__(self, target: TargetGeometry | None = None, dim: int | None = None):
        self.target = target
        self.dim = target.dim if target is not None else int(dim)

    def derivs(self, y, v, order: int):
        n = self.dim
        if self.target is None:
            shp = y.shape[:-1]
            k = np.broadcast_to(np.eye(n), shp + (n, n))
            dk = d2k = d3k = None
        else:
            parts = self.target.metric_derivs(y, order)
            k = parts[0]
            dk = parts[1] if order >= 1 else None
            d2k = parts[2] if order >= 2 else None
            d3k = parts[3] if order >= 3 else None
        out = [0.5 * np.einsum("...ij,...i,...j->...", k, v, v)]
        if order >= 1:
            g = np.zeros(y.shape[:-1] + (2 * n,))
            g[..., n:] = np.einsum("...aj,...j->...a", k, v)
            if dk is not None:
                g[..., :n] = 0.5 * np.einsum("...ija,...i,...j->...a", dk, v, v)
            out.append(g)
        if order >= 2:
            H = np.zeros(y.shape[:-1] + (2 * n, 2 * n))
            H[..., n:, n:] = k
            if dk is not None:
                H[..., :n, :n] = 0.5 * np.einsum("...ijab,...i,...j->...ab", d2k, v, v)
                yv = np.einsum("...bja,...j->...ab", dk, v)
                H[..., :n, n:] = yv
                H[..., n:, :n] = np.swapaxes(yv, -1, -2)
            out.append(H)
        if order >= 3:
            T = np.zeros(y.shape[:-1] + (2 * n,) * 3)
            if dk is not None:
                T[..., :n, :n, :n] = 0.5 * np.einsum("...ijabc,...i,...j->...abc", d3k, v, v)
                yyv = np.einsum("...cjab,...j->...abc", d2k, v)
                T[..., :n, :n, n:] = yyv
                T[..., :n, n:, :n] = np.swapaxes(yyv, -1, -2)
                T[..., n:, :n, :n] = np.moveaxis(yyv, -1, -3)
                yvv = np.einsum("...bca->...abc", dk)
                T[..., :n, n:, n:] = yvv
                T[..., n:, :n, n:] = np.swapaxes(yvv, -2, -3)
                T[..., n:, n:, :n] = np.moveaxis(yvv, -3, -1)
            out.append(T)
        return out


class GradientKinetic(KineticVertex):
    """K = (Q y) . v, the jet form of d_mu u(phi) with u = 1/2 y^T Q y."""

    def __init__(self, Q):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.Q = 0.5 * (Q + Q.T)
        self.dim = self.Q.shape[0]

    def derivs(self, y, v, order: int):
        n = self.dim
        Q = self.Q
        out = [np.einsum("ab,...b,...a->...", Q, y, v)]
        if order >= 1:
            g = np.concatenate([v @ Q.T, y @ Q.T], axis=-1)
            out.append(g)
        if order >= 2:
            H = np.zeros(y.shape[:-1] + (2 * n, 2 * n))
            H[..., :n, n:] = Q
            H[..., n:, :n] = Q
            out.append(H)
        if order >= 3:
            out.append(np.zeros(y.shape[:-1] + (2 * n,) * 3))
        return out


class PotentialVertex:
    """V(y) with derivative tensors up to third order."""

    def derivs(self, y, order: int):
        raise NotImplementedError


class QuadraticPotential(PotentialVertex):
    """V = 1/2 |y|^2 (Euclidean)."""

    def derivs(self, y, order: int):
        n = y.shape[-1]
        shp = y.shape[:-1]
        out = [0.5 * np.einsum("...i,...i->...", y, y)]
        if order >= 1:
            out.append(np.array(y, dtype=float))
        if order >= 2:
            out.append(np.broadcast_to(np.eye(n), shp + (n, n)))
        if order >= 3:
            out.append(np.zeros(shp + (n, n, n)))
        return out


class ConstantPotential(PotentialVertex):
    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def derivs(self, y, order: int):
        n = y.shape[-1]
        shp = y.shape[:-1]
        out = [np.full(shp, self.value)]
        for k in range(1, order + 1):
            out.append(np.zeros(shp + (n,) * k))
        return out


class LinearPotential(PotentialVertex):
    """V = c . y."""

    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))

    def derivs(self, y, order: int):
        n = y.shape[-1]
        shp = y.shape[:-1]
        out = [y @ self.c]
        if order >= 1:
            out.append(np.broadcast_to(self.c, shp + (n,)))
        for k in range(2, order + 1):
            out.append(np.zeros(shp + (n,) * k))
        return out


# ------------------------------------------------------------------ densities
CoeffSpec = Callable[[LorentzianLattice], np.ndarray]


def _inverse_metric_coeff(lat: LorentzianLattice) -> np.ndarray:
    return lat.inverse_metric()


@dataclass
class KineticTerm:
    vertex: KineticVertex
    # (2, n_t, n_x) per-direction coefficient a^mu; None means g^{mu mu}
    coeff: CoeffSpec | None = None

    def coefficients(self, lat: LorentzianLattice) -> np.ndarray:
        if self.coeff is None:
            return _inverse_metric_coeff(lat)
        c = np.asarray(self.coeff(lat), dtype=float)
        return np.broadcast_to(c.reshape(c.shape + (1,) * (3 - c.ndim)) if c.ndim < 3 else c,
                               (2,) + lat.shape)


@dataclass
class PotentialTerm:
    vertex: PotentialVertex
    # scalar or (n_t, n_x) coefficient b(x)
    coeff: float | CoeffSpec = 1.0

    def coefficients(self, lat: LorentzianLattice) -> np.ndarray:
        c = self.coeff(lat) if callable(self.coeff) else self.coeff
        return np.broadcast_to(np.asarray(c, dtype=float), lat.shape)


@dataclass
class LagrangianDensity:
    """Sum of kinetic and potential terms; jet order 0 or 1."""

    name: str
    dim: int
    kinetic: list = field(default_factory=list)
    potential: list = field(default_factory=list)

    def __post_init__(self):
        if self.order > 1:
            raise ValueError("jet order above 1 is not supported")

    @property
    def order(self) -> int:
        return 1 if self.kinetic else 0

    def __add__(self, other: "LagrangianDensity") -> "LagrangianDensity":
        if self.dim != other.dim:
            raise ValueError("densities act on different target dimensions")
        return LagrangianDensity(f"{self.name}+{other.name}", self.dim,
                                 list(self.kinetic) + list(other.kinetic),
                                 list(self.potential) + list(other.potential))

    # --- continuum jet evaluation (for partial-derivative checks)
    def _site_coeffs(self, lat, it, ix):
        ks = [t.coefficients(lat)[:, it, ix] for t in self.kinetic]
        ps = [t.coefficients(lat)[it, ix] for t in self.potential]
        return ks, ps

    def jet_eval(self, lat: LorentzianLattice, it: int, ix: int, y, ymu) -> float:
        """lambda at site (it, ix) for jet values y (n,), ymu (2, n)."""
        y = np.asarray(y, dtype=float)
        ymu = np.asarray(ymu, dtype=float)
        ks, ps = self._site_coeffs(lat, it, ix)
        val = 0.0
        for term, a in zip(self.kinetic, ks):
            for mu in range(2):
                val += a[mu] * term.vertex.derivs(y, ymu[mu], 0)[0]
        for term, b in zip(self.potential, ps):
            val += b * term.vertex.derivs(y, 0)[0]
        return float(val)

    def jet_partials(self, lat, it, ix, y, ymu):
        """(d lambda/dy (n,), d lambda/dy_mu (2, n), second partials dict)."""
        y = np.asarray(y, dtype=float)
        ymu = np.asarray(ymu, dtype=float)
        n = self.dim
        ks, ps = self._site_coeffs(lat, it, ix)
        dy = np.zeros(n)
        dmu = np.zeros((2, n))
        yy = np.zeros((n, n))
        ymu_y = np.zeros((2, n, n))
        m = np.zeros((2, 2, n, n))
        for term, a in zip(self.kinetic, ks):
            for mu in range(2):
                d = term.vertex.derivs(y, ymu[mu], 2)
                dy += a[mu] * d[1][:n]
                dmu[mu] += a[mu] * d[1][n:]
                yy += a[mu] * d[2][:n, :n]
                ymu_y[mu] += a[mu] * d[2][n:, :n]
                m[mu, mu] += a[mu] * d[2][n:, n:]
        for term, b in zip(self.potential, ps):
            d = term.vertex.derivs(y, 2)
            dy += b * d[1]
            yy += b * d[2]
        return dy, dmu, {"yy": yy, "ymu_y": ymu_y, "m": m}

    def m_tensor(self, lat: LorentzianLattice, phi_vals, jets) -> np.ndarray:
        """m^{mu nu}_ij per site, shape (n_t, n_x, 2, 2, n, n)."""
        n = self.dim
        out = np.zeros(lat.shape + (2, 2, n, n))
        for term in self.kinetic:
            a = term.coefficients(lat)
            for mu in range(2):
                d2 = term.vertex.derivs(phi_vals, jets[mu], 2)[2]
                out[..., mu, mu, :, :] += a[mu][..., None, None] * d2[..., n:, n:]
        return out


def free_scalar(dim: int = 1) -> LagrangianDensity:
    return LagrangianDensity("free_scalar", dim, [KineticTerm(MetricKinetic(dim=dim))])


def wave_map(target: TargetGeometry) -> LagrangianDensity:
    return LagrangianDensity("wave_map", target.dim, [KineticTerm(MetricKinetic(target))])


def mass_term(m2, dim: int = 1, name: str = "mass") -> LagrangianDensity:
    """1/2 m^2(x) |y|^2 with m^2 a scalar, an (n_t, n_x) array or a callable."""
    if callable(m2) or np.ndim(m2) == 0:
        coeff = m2
    else:
        arr = np.asarray(m2, dtype=float)
        coeff = (lambda lat, arr=arr: arr)
    return LagrangianDensity(name, dim, [], [PotentialTerm(QuadraticPotential(), coeff)])


def kg_mass(m: float, dim: int = 1) -> LagrangianDensity:
    d = free_scalar(dim) + mass_term(float(m) ** 2, dim)
    d.name = f"kg_mass({m:g})"
    return d


def time_kinetic_only(dim: int = 1) -> LagrangianDensity:
    """1/2 (phi_t)^2 with no spatial gradient term."""
    coeff = (lambda lat: np.stack([np.ones(lat.shape), np.zeros(lat.shape)]))
    return LagrangianDensity("time_kinetic", dim, [KineticTerm(MetricKinetic(dim=dim), coeff)])


def constant_density(value: float = 1.0, dim: int = 1) -> LagrangianDensity:
    return LagrangianDensity("constant", dim, [], [PotentialTerm(ConstantPotential(value))])


def divergence_density(Q, dim: int | None = None) -> LagrangianDensity:
    """d_t u(phi) + d_x u(phi) with u = 1/2 y^T Q y; a trivial Lagrangian."""
    vert = GradientKinetic(Q)
    coeff = (lambda lat: np.ones((2,) + lat.shape))
    return LagrangianDensity("divergence", vert.dim, [KineticTerm(vert, coeff)])


def builtin_density(name: str, target: TargetGeometry) -> LagrangianDensity:
    key = name.strip()
    if key == "free_scalar":
        return free_scalar(target.dim)
    if key == "wave_map":
        return wave_map(target)
    if key.startswith("kg_mass"):
        inner = key[len("kg_mass"):].strip()
        if not (inner.startswith("(") and inner.endswith(")")):
            raise ValueError(f"kg_mass needs a mass parameter, got {name!r}")
        return kg_mass(float(inner[1:-1]), target.dim)
    raise ValueError(f"unknown density {name!r}")


# ------------------------------------------------------------ discrete action
def _chain_matrices(n: int, d: float):
    """Linear maps (a, b) -> (a, (b-a)/d) and (a, b) -> (b, (b-a)/d)."""
    I = np.eye(n)
    Z = np.zeros((n, n))
    JA = np.block([[I, Z], [-I / d, I / d]])
    JB = np.block([[Z, I], [-I / d, I / d]])
    return JA, JB


class _LinkSet:
    """Index data for the links of one direction."""

    def __init__(self, lat: LorentzianLattice, mu: int):
        nt, nx = lat.shape
        t, x = np.meshgrid(np.arange(nt), np.arange(nx), indexing="ij")
        if mu == 0:
            t0, x0 = t[:-1].ravel(), x[:-1].ravel()
            t1, x1 = t0 + 1, x0
            self.d = lat.dt
        else:
            t0, x0 = t.ravel(), x.ravel()
            t1, x1 = t0, (x0 + 1) % nx
            self.d = lat.dx
        self.a = t0 * nx + x0
        self.b = t1 * nx + x1


class DiscreteAction:
    """Action, gradient, Hessian and third derivative for one density on one lattice."""

    def __init__(self, density: LagrangianDensity, lat: LorentzianLattice):
        self.density = density
        self.lat = lat
        self.n = density.dim
        self.links = [_LinkSet(lat, 0), _LinkSet(lat, 1)]
        w = lat.vol_weight.ravel()
        self.w = w
        # link weights per kinetic term and direction
        self.link_w = []
        for term in density.kinetic:
            a = term.coefficients(lat)
            per_mu = []
            for mu, ls in enumerate(self.links):
                wa = (w * a[mu].ravel())
                per_mu.append(0.5 * (wa[ls.a] + wa[ls.b]))
            self.link_w.append(per_mu)
        self.pot_w = [w * term.coefficients(lat).ravel() for term in density.potential]
        self.chains = [_chain_matrices(self.n, ls.d) for ls in self.links]

    @property
    def size(self) -> int:
        return self.lat.n_sites * self.n

    def _flat(self, phi) -> np.ndarray:
        vals = phi.values if isinstance(phi, FieldConfig) else np.asarray(phi, dtype=float)
        return vals.reshape(self.lat.n_sites, self.n)

    def _cut(self, f):
        if f is None:
            return None
        return np.broadcast_to(np.asarray(f, dtype=float), self.lat.shape).ravel()

    def _iter_links(self, f):
        """Yield (term, vertex, a-sites, b-sites, weight, chain pair)."""
        for k, term in enumerate(self.density.kinetic):
            for mu, ls in enumerate(self.links):
                c = self.link_w[k][mu]
                if f is not None:
                    c = c * 0.5 * (f[ls.a] + f[ls.b])
                if not np.any(c):
                    continue
                yield term.vertex, ls, c, self.chains[mu]

    def _local_index(self, ls) -> np.ndarray:
        n = self.n
        comp = np.arange(n)
        ia = ls.a[:, None] * n + comp
        ib = ls.b[:, None] * n + comp
        return np.concatenate([ia, ib], axis=1)

    # --------------------------------------------------------------- values
    def site_energy(self, phi) -> np.ndarray:
        """Per-site share e_p of the action; S_f = sum_p f_p e_p."""
        y = self._flat(phi)
        e = np.zeros(self.lat.n_sites)
        for vert, ls, c, _ in self._iter_links(None):
            a, b = y[ls.a], y[ls.b]
            delta = (b - a) / ls.d
            val = 0.5 * c * (vert.derivs(a, delta, 0)[0] + vert.derivs(b, delta, 0)[0])
            e += 0.5 * np.bincount(ls.a, val, self.lat.n_sites)
            e += 0.5 * np.bincount(ls.b, val, self.lat.n_sites)
        for term, c in zip(self.density.potential, self.pot_w):
            e += c * term.vertex.derivs(y, 0)[0]
        return e.reshape(self.lat.shape)

    def action(self, phi, f=None) -> float:
        e = self.site_energy(phi)
        if f is None:
            return float(e.sum())
        return float((np.broadcast_to(np.asarray(f, dtype=float), self.lat.shape) * e).sum())

    def gradient(self, phi, f=None) -> np.ndarray:
        """dS_f/dphi, shape (n_t, n_x, n)."""
        y = self._flat(phi)
        fc = self._cut(f)
        N = self.size
        g = np.zeros(N)
        for vert, ls, c, (JA, JB) in self._iter_links(fc):
            a, b = y[ls.a], y[ls.b]
            delta = (b - a) / ls.d
            dA = vert.derivs(a, delta, 1)[1]
            dB = vert.derivs(b, delta, 1)[1]
            loc = 0.5 * c[:, None] * (dA @ JA + dB @ JB)
            idx = self._local_index(ls)
            g += np.bincount(idx.ravel(), loc.ravel(), N)
        for term, c in zip(self.density.potential, self.pot_w):
            cc = c if fc is None else c * fc
            g += (cc[:, None] * term.vertex.derivs(y, 1)[1]).ravel()
        return g.reshape(self.lat.shape + (self.n,))

    def hessian(self, phi, f=None) -> sp.csr_matrix:
        y = self._flat(phi)
        fc = self._cut(f)
        N = self.size
        rows, cols, vals = [], [], []
        for vert, ls, c, (JA, JB) in self._iter_links(fc):
            a, b = y[ls.a], y[ls.b]
            delta = (b - a) / ls.d
            hA = vert.derivs(a, delta, 2)[2]
            hB = vert.derivs(b, delta, 2)[2]
            loc = 0.5 * c[:, None, None] * (
                np.einsum("zw,lzy,yv->lwv", JA, hA, JA) + np.einsum("zw,lzy,yv->lwv", JB, hB, JB))
            idx = self._local_index(ls)
            rows.append(np.repeat(idx[:, :, None], idx.shape[1], axis=2).ravel())
            cols.append(np.repeat(idx[:, None, :], idx.shape[1], axis=1).ravel())
            vals.append(loc.ravel())
        n = self.n
        site_idx = np.arange(self.lat.n_sites)[:, None] * n + np.arange(n)
        for term, c in zip(self.density.potential, self.pot_w):
            cc = c if fc is None else c * fc
            loc = cc[:, None, None] * term.vertex.derivs(y, 2)[2]
            rows.append(np.repeat(site_idx[:, :, None], n, axis=2).ravel())
            cols.append(np.repeat(site_idx[:, None, :], n, axis=1).ravel())
            vals.append(np.asarray(loc).ravel())
        if not rows:
            return sp.csr_matrix((N, N))
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N)).tocsr()
        H.sum_duplicates()
        return H

    def third_matrix(self, phi, X, f=None) -> sp.csr_matrix:
        """d/de Hessian(phi + e X) at e = 0 (plain chart coordinates)."""
        y = self._flat(phi)
        xv = self._flat(X.components if isinstance(X, Variation) else X)
        fc = self._cut(f)
        N = self.size
        rows, cols, vals = [], [], []
        for vert, ls, c, (JA, JB) in self._iter_links(fc):
            a, b = y[ls.a], y[ls.b]
            delta = (b - a) / ls.d
            xi = np.concatenate([xv[ls.a], xv[ls.b]], axis=1)
            loc = 0
            for J, base in ((JA, a), (JB, b)):
                T = vert.derivs(base, delta, 3)[3]
                Jxi = xi @ J.T
                loc = loc + np.einsum("zw,lzyu,yv,lu->lwv", J, T, J, Jxi)
            loc = 0.5 * c[:, None, None] * loc
            idx = self._local_index(ls)
            rows.append(np.repeat(idx[:, :, None], idx.shape[1], axis=2).ravel())
            cols.append(np.repeat(idx[:, None, :], idx.shape[1], axis=1).ravel())
            vals.append(loc.ravel())
        n = self.n
        site_idx = np.arange(self.lat.n_sites)[:, None] * n + np.arange(n)
        for term, c in zip(self.density.potential, self.pot_w):
            cc = c if fc is None else c * fc
            T = term.vertex.derivs(y, 3)[3]
            loc = cc[:, None, None] * np.einsum("lijk,lk->lij", T, xv)
            rows.append(np.repeat(site_idx[:, :, None], n, axis=2).ravel())
            cols.append(np.repeat(site_idx[:, None, :], n, axis=1).ravel())
            vals.append(loc.ravel())
        if not rows:
            return sp.csr_matrix((N, N))
        M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N)).tocsr()
        M.sum_duplicates()
        return M

    def third_vector(self, phi, u, v, f=None) -> np.ndarray:
        """Gradient in phi of u^T Hessian(phi) v, shape (n_t, n_x, n)."""
        y = self._flat(phi)
        uf = self._flat(u)
        vf = self._flat(v)
        fc = self._cut(f)
        N = self.size
        g = np.zeros(N)
        for vert, ls, c, (JA, JB) in self._iter_links(fc):
            a, b = y[ls.a], y[ls.b]
            delta = (b - a) / ls.d
            ul = np.concatenate([uf[ls.a], uf[ls.b]], axis=1)
            vl = np.concatenate([vf[ls.a], vf[ls.b]], axis=1)
            loc = 0
            for J, base in ((JA, a), (JB, b)):
                T = vert.derivs(base, delta, 3)[3]
                loc = loc + np.einsum("zw,lzyx,ly,lx->lw", J, T, ul @ J.T, vl @ J.T)
            loc = 0.5 * c[:, None] * loc
            idx = self._local_index(ls)
            g += np.bincount(idx.ravel(), loc.ravel(), N)
        for term, c in zip(self.density.potential, self.pot_w):
            cc = c if fc is None else c * fc
            T = term.vertex.derivs(y, 3)[3]
            g += (cc[:, None] * np.einsum("lijk,lj,lk->li", T, uf, vf)).ravel()
        return g.reshape(self.lat.shape + (self.n,))

    def time_link_blocks(self, phi) -> np.ndarray:
        """Hessian blocks coupling (t,x) to (t+1,x): shape (n_t-1, n_x, n, n)."""
        y = self._flat(phi)
        n = self.n
        ls = self.links[0]
        JA, JB = self.chains[0]
        out = np.zeros((len(ls.a), n, n))
        for k, term in enumerate(self.density.kinetic):
            c = self.link_w[k][0]
            if not np.any(c):
                continue
            a, b = y[ls.a], y[ls.b]
            delta = (b - a) / ls.d
            hA = term.vertex.derivs(a, delta, 2)[2]
            hB = term.vertex.derivs(b, delta, 2)[2]
            loc = 0.5 * c[:, None, None] * (
                np.einsum("zw,lzy,yv->lwv", JA, hA, JA) + np.einsum("zw,lzy,yv->lwv", JB, hB, JB))
            out += loc[:, :n, n:]
        return out.reshape(self.lat.n_t - 1, self.lat.n_x, n, n)

    def forward_jets(self, phi) -> np.ndarray:
        """Forward difference quotients per direction, shape (2, n_t, n_x, n).

        The last time row has no forward link and repeats the one-sided
        backward quotient.
        """
        vals = phi.values if isinstance(phi, FieldConfig) else np.asarray(phi)
        jt = np.empty_like(vals)
        if self.lat.n_t > 1:
            jt[:-1] = (vals[1:] - vals[:-1]) / self.lat.dt
            jt[-1] = jt[-2]
        else:
            jt[:] = 0.0
        jx = (np.roll(vals, -1, axis=1) - vals) / self.lat.dx
        return np.stack([jt, jx])


_ACTION_CACHE: dict = {}


def discrete_action(density: LagrangianDensity, lat: LorentzianLattice) -> DiscreteAction:
    key = (id(density), id(lat))
    hit = _ACTION_CACHE.get(key)
    if hit is not None and hit.density is density and hit.lat is lat:
        return hit
    if len(_ACTION_CACHE) > 64:
        _ACTION_CACHE.clear()
    act = DiscreteAction(density, lat)
    _ACTION_CACHE[key] = act
    return act


# ------------------------------------------------------------ user-facing types
class GeneralizedLagrangian:
    """Cutoff-smeared action f -> L(f), L(f)(phi) = sum_p f_p lambda_p w_p."""

    def __init__(self, density: LagrangianDensity):
        self.density = density

    def __repr__(self) -> str:
        return f"GeneralizedLagrangian({self.density.name})"

    def engine(self, phi: FieldConfig) -> DiscreteAction:
        if phi.target.dim != self.density.dim:
            raise ValueError("density and section have different target dimensions")
        return discrete_action(self.density, phi.lattice)

    def evaluate(self, f, phi: FieldConfig) -> float:
        return evaluate_action(self, f, phi)

    def gradient(self, phi, f=None):
        return self.engine(phi).gradient(phi, f)

    def hessian(self, phi, f=None):
        return self.engine(phi).hessian(phi, f)

    def third_matrix(self, phi, X, f=None):
        return self.engine(phi).third_matrix(phi, X, f)

    def third_vector(self, phi, u, v, f=None):
        return self.engine(phi).third_vector(phi, u, v, f)

    def __add__(self, other: "GeneralizedLagrangian") -> "GeneralizedLagrangian":
        return GeneralizedLagrangian(self.density + other.density)


@dataclass
class ELKernel:
    """E_i(x); pairs with a variation through integrate(E_i X^i)."""

    base: FieldConfig
    components: np.ndarray

    @property
    def boundary_rows(self) -> np.ndarray:
        """Rows whose value is affected by truncating the time window."""
        m = np.zeros(self.base.lattice.shape, dtype=bool)
        m[0] = True
        m[-1] = True
        return m

    def pair(self, X: Variation) -> float:
        return float(integrate(self.base.lattice, np.einsum("...i,...i->...", self.components,
                                                            X.components)))

    def residual(self) -> float:
        """max |E| over interior rows."""
        inner = self.components[1:-1]
        return float(np.abs(inner).max()) if inner.size else 0.0


def evaluate_action(gl: GeneralizedLagrangian, f, phi: FieldConfig) -> float:
    """integrate(f * lambda(j^1 phi)) with the link discretization."""
    if not np.all(phi.target.chart_domain(phi.values)):
        raise ValueError("section leaves the chart domain")
    return gl.engine(phi).action(phi, f)


def el_kernel(gl: GeneralizedLagrangian, phi: FieldConfig) -> ELKernel:
    """E = dlambda/dy - d_mu(dlambda/dy_mu) as the exact gradient of the action.

    The first and last time rows miss one link and are flagged through
    :attr:`ELKernel.boundary_rows`.
    """
    g = gl.gradient(phi)
    return ELKernel(phi, g / phi.lattice.vol_weight[..., None])


def stencil_neighbourhood(lat: LorentzianLattice, mask: np.ndarray) -> np.ndarray:
    """Sites within one link of ``mask`` (the reach of the difference stencil)."""
    out = mask.copy()
    out |= np.roll(mask, 1, axis=1) | np.roll(mask, -1, axis=1)
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    return out


def directional_derivative_check(gl: GeneralizedLagrangian, f, phi: FieldConfig,
                                 X: Variation, step: float = 1e-4):
    """(pairing of E with X, finite difference of the smeared action along exp(tX))."""
    lat = phi.lattice
    fa = np.broadcast_to(np.asarray(f, dtype=float), lat.shape)
    supp = X.support_mask
    if not supp.any():
        return 0.0, 0.0
    near = stencil_neighbourhood(lat, supp)
    if np.any(fa[near] != 1.0):
        raise ValueError("cutoff too small")
    analytic = el_kernel(gl, phi).pair(X)

    def S(t):
        return evaluate_action(gl, fa, chart_backward(phi, t * X))

    def cd(h):
        return (S(h) - S(-h)) / (2 * h)

    numeric = (4 * cd(step / 2) - cd(step)) / 3.0
    return analytic, numeric


class LinearizedOperator:
    """D_phi = -(phi*h)^sharp o (1/vol) o Hessian of the action.

    ``hessian`` is the symmetric matrix of second derivatives of the discrete
    action in plain chart coordinates (density weighted).  ``apply`` returns
    D_phi X as a variation; ``apply_lowered`` returns the covector density
    -Hessian X, which is what Green operators invert.
    """

    def __init__(self, gl: GeneralizedLagrangian, phi: FieldConfig, hessian: sp.csr_matrix,
                 fiber_metric: np.ndarray, principal: np.ndarray):
        self.gl = gl
        self.base = phi
        self.lattice = phi.lattice
        self.dim = phi.target.dim
        self.hessian = hessian
        self.fiber_metric = fiber_metric
        self.fiber_metric_inv = np.linalg.inv(fiber_metric)
        self.principal = principal
        self._time_blocks = None
        self._nh = None

    @property
    def size(self) -> int:
        return self.lattice.n_sites * self.dim

    def _as_flat(self, X):
        arr = X.components if isinstance(X, Variation) else np.asarray(X, dtype=float)
        return arr.reshape(self.size, *arr.shape[3:])

    def apply_lowered(self, X) -> np.ndarray:
        arr = X.components if isinstance(X, Variation) else np.asarray(X, dtype=float)
        out = -(self.hessian @ arr.reshape(self.size, *arr.shape[3:]))
        return out.reshape(arr.shape)

    def raise_index(self, covector_density) -> np.ndarray:
        """h^{ij} s_j / vol per site."""
        s = np.asarray(covector_density)
        w = self.lattice.vol_weight[..., None]
        if s.ndim == 4:
            return np.einsum("txij,txjk->txik", self.fiber_metric_inv, s / w[..., None])
        return np.einsum("txij,txj->txi", self.fiber_metric_inv, s / w)

    def lower_index(self, X) -> np.ndarray:
        """vol * h_ij X^j per site (covector density)."""
        arr = X.components if isinstance(X, Variation) else np.asarray(X, dtype=float)
        w = self.lattice.vol_weight[..., None]
        return w * np.einsum("txij,txj->txi", self.fiber_metric, arr)

    def apply(self, X) -> Variation:
        out = self.raise_index(self.apply_lowered(X))
        return Variation(self.base, out)

    @property
    def time_blocks(self) -> np.ndarray:
        """Blocks of the Hessian coupling (t,x) to (t+1,x), shape (n_t-1, n_x, n, n)."""
        if self._time_blocks is None:
            self._time_blocks = self.gl.engine(self.base).time_link_blocks(self.base)
        return self._time_blocks

    def normal_hyperbolicity(self, tol: float = 1e-10):
        if self._nh is None or self._nh[0] != tol:
            self._nh = (tol, is_normally_hyperbolic(self, tol))
        return self._nh[1]


def linearize(gl: GeneralizedLagrangian, phi: FieldConfig, h_fiber=None) -> LinearizedOperator:
    """Assemble D_phi from the Hessian blocks of the discrete action.

    ``h_fiber`` selects the fiber metric used to raise indices: ``None`` uses
    the target metric, otherwise a TargetGeometry or a callable y -> (.., n, n).
    """
    if gl.density.order < 1 and not gl.density.potential:
        raise ValueError("missing second partials")
    eng = gl.engine(phi)
    H = eng.hessian(phi)
    if h_fiber is None:
        hf = phi.target.metric(phi.values)
    elif isinstance(h_fiber, TargetGeometry):
        hf = h_fiber.metric(phi.values)
    else:
        hf = np.asarray(h_fiber(phi.values), dtype=float)
    jets = eng.forward_jets(phi)
    m = gl.density.m_tensor(phi.lattice, phi.values, jets)
    sigma = np.einsum("txik,txmnkj->txmnij", np.linalg.inv(hf), m)
    return LinearizedOperator(gl, phi, H, hf, sigma)


def principal_symbol(op: LinearizedOperator) -> np.ndarray:
    """sigma_2^{mu nu i}_j = h^{ik} m^{mu nu}_{kj}, shape (n_t, n_x, 2, 2, n, n)."""
    return op.principal


@dataclass
class NormalHyperbolicity:
    ok: bool
    factor: np.ndarray
    max_deviation: float

    def __bool__(self) -> bool:
        return self.ok


def is_normally_hyperbolic(op: LinearizedOperator, tol: float = 1e-10) -> NormalHyperbolicity:
    """Test sigma_2 = c(x) g^{-1} (x) id per site; report the factor c."""
    lat = op.lattice
    n = op.dim
    ginv = np.zeros(lat.shape + (2, 2))
    ginv[..., 0, 0] = 1.0 / lat.g_tt
    ginv[..., 1, 1] = 1.0 / lat.g_xx
    ref = np.einsum("txmn,ij->txmnij", ginv, np.eye(n))
    sig = op.principal
    num = np.einsum("txmnij,txmnij->tx", sig, ref)
    den = np.einsum("txmnij,txmnij->tx", ref, ref)
    c = num / den
    dev = sig - c[..., None, None, None, None] * ref
    scale = np.sqrt(np.einsum("txmnij,txmnij->tx", sig, sig))
    rel = np.sqrt(np.einsum("txmnij,txmnij->tx", dev, dev)) / np.maximum(scale, 1e-300)
    ok = bool(np.all(c > 0) and np.all(rel <= tol))
    return NormalHyperbolicity(ok, c, float(rel.max()) if rel.size else 0.0)


def reconstruct_density(F, phi0: FieldConfig, phi: FieldConfig, steps: int = 64) -> np.ndarray:
    """theta(x) = int_0^1 F^(1)_{phi0}[tX](X)(x) dt with 16-point Gauss-Legendre.

    X = chart_forward(phi0, phi); the derivative at chart point tX is the
    kernel of F at exp(tX) paired with the geodesic velocity there.
    """
    from .fields import chart_forward
    from .geometry import FlatTarget, geodesic_path

    if getattr(F, "kernel1", None) is None:
        raise ValueError("functional lacks first-derivative kernels")
    X = chart_forward(phi0, phi)
    comp = X.components
    theta = np.zeros(phi0.lattice.shape, dtype=complex if getattr(F, "is_complex", False) else float)
    mask = X.support_mask
    tg = phi0.target
    for node, wgt in zip(_GL_NODES, _GL_WEIGHTS):
        t = 0.5 * (node + 1.0)
        vals = phi0.values.copy()
        vel = np.zeros_like(comp)
        if np.any(mask):
            if isinstance(tg, FlatTarget):
                vals[mask] = phi0.values[mask] + t * comp[mask]
                vel[mask] = comp[mask]
            else:
                ys, us = geodesic_path(tg, phi0.values[mask], t * comp[mask], steps)
                vals[mask] = ys[-1]
                vel[mask] = us[-1] / t
        k1 = F.kernel1(FieldConfig(phi0.lattice, tg, vals))
        theta = theta + 0.5 * wgt * np.einsum("txi,txi->tx", k1, vel)
    return theta
