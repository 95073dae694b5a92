"""Sections, compactly supported variations, exponential charts and gluing."""

from __future__ import annotations

import math

import numpy as np

from .geometry import TargetGeometry, exp_inverse, exp_map
from .lattice import LorentzianLattice, SitePoint


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class FieldConfig:
    """A section: one target-chart point per lattice site, shape (n_t, n_x, n)."""

    def __init__(self, lattice: LorentzianLattice, target: TargetGeometry, values):
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 2 and target.dim == 1:
            vals = vals[..., None]
        if vals.shape != (lattice.n_t, lattice.n_x, target.dim):
            raise ValueError(f"values shape {vals.shape} does not match "
                             f"({lattice.n_t}, {lattice.n_x}, {target.dim})")
        if not np.all(target.chart_domain(vals)):
            raise ValueError("section leaves the target chart domain")
        self.lattice = lattice
        self.target = target
        self.values = _frozen(vals)

    @classmethod
    def constant(cls, lattice, target, point) -> "FieldConfig":
        p = np.asarray(point, dtype=float).reshape(target.dim)
        return cls(lattice, target, np.broadcast_to(p, lattice.shape + (target.dim,)))

    @classmethod
    def zeros(cls, lattice, target) -> "FieldConfig":
        return cls(lattice, target, np.zeros(lattice.shape + (target.dim,)))

    def with_values(self, values) -> "FieldConfig":
        return FieldConfig(self.lattice, self.target, values)

    def compatible(self, other: "FieldConfig") -> bool:
        return self.lattice.same_as(other.lattice) and self.target.dim == other.target.dim \
            and type(self.target) is type(other.target)

    def __repr__(self) -> str:
        return f"FieldConfig({self.lattice.n_t}x{self.lattice.n_x}, target={self.target.name})"


class Variation:
    """Tangent vector field X along a section; support is the exact nonzero set."""

    def __init__(self, base: FieldConfig, components):
        comp = np.asarray(components, dtype=float)
        if comp.ndim == 2 and base.target.dim == 1:
            comp = comp[..., None]
        if comp.shape != base.values.shape:
            raise ValueError(f"components shape {comp.shape} != {base.values.shape}")
        self.base = base
        self.components = _frozen(comp)

    @classmethod
    def zero(cls, base: FieldConfig) -> "Variation":
        return cls(base, np.zeros_like(base.values))

    @property
    def support_mask(self) -> np.ndarray:
        return np.any(self.components != 0, axis=-1)

    @property
    def support(self) -> set[SitePoint]:
        return LorentzianLattice.sites_from_mask(self.support_mask)

    def __add__(self, other: "Variation") -> "Variation":
        return Variation(self.base, self.components + other.components)

    def __sub__(self, other: "Variation") -> "Variation":
        return Variation(self.base, self.components - other.components)

    def __mul__(self, s: float) -> "Variation":
        return Variation(self.base, s * self.components)

    __rmul__ = __mul__

    def __neg__(self) -> "Variation":
        return Variation(self.base, -self.components)


class PullbackConnection:
    """Gamma_phi(X, Y)^i(x) = Gamma^i_jk(phi(x)) X^j(x) Y^k(x)."""

    def __init__(self, base: FieldConfig):
        self.base = base
        self.coefficients = _frozen(base.target.christoffel(base.values))

    def apply(self, X, Y) -> Variation:
        xs = X.components if isinstance(X, Variation) else np.asarray(X)
        ys = Y.components if isinstance(Y, Variation) else np.asarray(Y)
        return Variation(self.base, np.einsum("...ijk,...j,...k->...i", self.coefficients, xs, ys))


def _check_pair(a: FieldConfig, b: FieldConfig):
    if not a.lattice.same_as(b.lattice):
        raise ValueError("mismatched lattices")
    if a.target.dim != b.target.dim:
        raise ValueError("mismatched targets")


def relative_support(phi: FieldConfig, psi: FieldConfig) -> set[SitePoint]:
    """Sites where the two sections differ (exact comparison)."""
    return LorentzianLattice.sites_from_mask(relative_support_mask(phi, psi))


def relative_support_mask(phi: FieldConfig, psi: FieldConfig) -> np.ndarray:
    _check_pair(phi, psi)
    return np.any(phi.values != psi.values, axis=-1)


def chart_forward(phi0: FieldConfig, psi: FieldConfig) -> Variation:
    """u_phi0(psi): sitewise inverse exponential, exactly zero where psi = phi0."""
    _check_pair(phi0, psi)
    mask = relative_support_mask(phi0, psi)
    comp = np.zeros_like(phi0.values)
    if np.any(mask):
        base = phi0.values[mask]
        tgt = psi.values[mask]
        try:
            comp[mask] = exp_inverse(phi0.target, base, tgt)
        except ValueError:
            bad = _first_failing_site(phi0.target, base, tgt, np.argwhere(mask))
            raise ValueError(f"sections not chart-compatible at site {bad}") from None
    return Variation(phi0, comp)


def _first_failing_site(target, base, tgt, sites):
    for k in range(len(base)):
        try:
            exp_inverse(target, base[k], tgt[k])
        except ValueError:
            it, ix = sites[k]
            return SitePoint(int(it), int(ix))
    return None


def chart_backward(phi0: FieldConfig, X: Variation) -> FieldConfig:
    """u_phi0^{-1}(X): sitewise exponential; sites with X = 0 keep phi0 exactly."""
    comp = X.components if isinstance(X, Variation) else np.asarray(X, dtype=float)
    mask = np.any(comp != 0, axis=-1)
    vals = phi0.values.copy()
    if np.any(mask):
        vals[mask] = exp_map(phi0.target, phi0.values[mask], comp[mask])
    return FieldConfig(phi0.lattice, phi0.target, vals)


def transition_map(phi1: FieldConfig, phi2: FieldConfig, X: Variation) -> Variation:
    """u_phi1 o u_phi2^{-1}, sending a variation at phi2 to one at phi1."""
    return chart_forward(phi1, chart_backward(phi2, X))


def interpolation_steps(phi0: FieldConfig, X: Variation, Y: Variation) -> int:
    """Number of interpolation steps from the largest geodesic length."""
    tg = phi0.target
    lengths = np.concatenate([
        tg.norm(phi0.values, X.components).ravel(),
        tg.norm(phi0.values, Y.components).ravel()])
    dmax = float(lengths.max()) if lengths.size else 0.0
    if not math.isfinite(tg.injectivity_hint) or dmax == 0.0:
        return 1
    return max(1, math.ceil(dmax / (0.5 * tg.injectivity_hint)))


def interpolate_sections(phi0: FieldConfig, phi1: FieldConfig, phi_m1: FieldConfig,
                         n: int | None = None):
    """Glue two sections whose relative supports (w.r.t. phi0) are disjoint.

    Returns ``(glued, family)`` where ``family[k][l]`` is phi0 moved along
    k/n of the vector towards phi1 and l/n of the vector towards phi_m1.
    ``family[n][0] == phi1``, ``family[0][n] == phi_m1`` and
    ``family[n][n] == glued``.
    """
    _check_pair(phi0, phi1)
    _check_pair(phi0, phi_m1)
    s1 = relative_support_mask(phi0, phi1)
    s2 = relative_support_mask(phi0, phi_m1)
    if np.any(s1 & s2):
        raise ValueError("supports not disjoint")
    Xp = chart_forward(phi0, phi1)
    Xm = chart_forward(phi0, phi_m1)
    if n is None:
        n = interpolation_steps(phi0, Xp, Xm)
    family = []
    for k in range(n + 1):
        row = []
        for l in range(n + 1):
            if k == n and l == 0:
                row.append(phi1)
                continue
            if k == 0 and l == n:
                row.append(phi_m1)
                continue
            vals = phi0.values.copy()
            if k == n:
                vals[s1] = phi1.values[s1]
            elif k > 0:
                vals[s1] = exp_map(phi0.target, phi0.values[s1], (k / n) * Xp.components[s1])
            if l == n:
                vals[s2] = phi_m1.values[s2]
            elif l > 0:
                vals[s2] = exp_map(phi0.target, phi0.values[s2], (l / n) * Xm.components[s2])
            row.append(FieldConfig(phi0.lattice, phi0.target, vals))
        family.append(row)
    return family[n][n], family


def glue_in_order(phi0: FieldConfig, phi1: FieldConfig, phi_m1: FieldConfig,
                  first: str = "plus") -> FieldConfig:
    """Apply the two exponential flows one after the other, in either order."""
    Xp = chart_forward(phi0, phi1)
    Xm = chart_forward(phi0, phi_m1)
    if first == "plus":
        mid = chart_backward(phi0, Xp)
        return chart_backward(mid, Variation(mid, Xm.components))
    mid = chart_backward(phi0, Xm)
    return chart_backward(mid, Variation(mid, Xp.components))
