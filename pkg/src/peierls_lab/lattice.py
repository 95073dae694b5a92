"""Discretized cylinder spacetime R_t x S^1_x with a diagonal Lorentzian metric."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

# slack used when rounding c*dt/dx up to whole sites
_CONE_SLACK = 1e-12


@dataclass(frozen=True, order=True)
class SitePoint:
    it: int
    ix: int


def _site_field(value, n_t: int, n_x: int, name: str) -> np.ndarray:
    """Broadcast a scalar, per-column (n_x,) or per-site (n_t, n_x) value."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        out = np.full((n_t, n_x), float(arr))
    elif arr.shape == (n_x,):
        out = np.broadcast_to(arr, (n_t, n_x)).copy()
    elif arr.shape == (n_t, n_x):
        out = arr.copy()
    else:
        raise ValueError(f"{name}: expected scalar, ({n_x},) or ({n_t}, {n_x}), got {arr.shape}")
    out.setflags(write=False)
    return out


class LorentzianLattice:
    """Finite time window of the cylinder with metric diag(g_tt, g_xx).

    Space is periodic with ``n_x`` sites; time runs over ``n_t`` rows.  The
    metric may vary in space (and time) but must keep g_tt < 0 < g_xx and the
    causal-stability bound dt/dx <= sqrt(g_xx / -g_tt) at every site.
    """

    def __init__(self, n_t: int, n_x: int, dt: float, dx: float,
                 g_tt=-1.0, g_xx=1.0, allow_unstable: bool = False):
        if int(n_t) != n_t or int(n_x) != n_x or n_t < 1 or n_x < 1:
            raise ValueError("n_t and n_x must be positive integers")
        if not (dt > 0 and dx > 0 and math.isfinite(dt) and math.isfinite(dx)):
            raise ValueError("dt and dx must be positive and finite")
        self.n_t = int(n_t)
        self.n_x = int(n_x)
        self.dt = float(dt)
        self.dx = float(dx)
        self.g_tt = _site_field(g_tt, self.n_t, self.n_x, "g_tt")
        self.g_xx = _site_field(g_xx, self.n_t, self.n_x, "g_xx")
        if np.any(self.g_tt >= 0) or np.any(self.g_xx <= 0):
            raise ValueError("metric must satisfy g_tt < 0 < g_xx at every site")
        w = np.sqrt(-self.g_tt * self.g_xx) * self.dt * self.dx
        w.setflags(write=False)
        self.vol_weight = w
        c = np.sqrt(-self.g_tt / self.g_xx)
        c.setflags(write=False)
        self.light_speed = c
        if not allow_unstable and not self.is_causally_stable:
            raise ValueError(
                f"unstable discretization: dt/dx = {self.dt / self.dx:.6g} exceeds "
                f"min sqrt(g_xx/-g_tt) = {float(np.min(1.0 / c)):.6g}")
        steps = np.ceil(c * self.dt / self.dx - _CONE_SLACK).astype(int)
        steps = np.maximum(steps, 1)
        steps.setflags(write=False)
        self.cone_step = steps

    @classmethod
    def minkowski(cls, n_t: int, n_x: int, dt: float, dx: float) -> "LorentzianLattice":
        return cls(n_t, n_x, dt, dx)

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_t, self.n_x)

    @property
    def n_sites(self) -> int:
        return self.n_t * self.n_x

    @property
    def length(self) -> float:
        return self.n_x * self.dx

    @property
    def cfl_ratio(self) -> float:
        """max over sites of c*dt/dx; the scheme is stable when this is <= 1."""
        return float(np.max(self.light_speed) * self.dt / self.dx)

    @property
    def is_causally_stable(self) -> bool:
        return self.cfl_ratio <= 1.0 + _CONE_SLACK

    @property
    def is_constant_metric(self) -> bool:
        return bool(np.all(self.g_tt == self.g_tt.flat[0]) and np.all(self.g_xx == self.g_xx.flat[0]))

    def inverse_metric(self) -> np.ndarray:
        """Diagonal of g^{-1} per site, shape (2, n_t, n_x) ordered (t, x)."""
        return np.stack([1.0 / self.g_tt, 1.0 / self.g_xx])

    def times(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt

    def positions(self) -> np.ndarray:
        return np.arange(self.n_x) * self.dx

    def site(self, it: int, ix: int) -> SitePoint:
        if not 0 <= it < self.n_t:
            raise ValueError(f"time index {it} outside [0, {self.n_t})")
        return SitePoint(int(it), int(ix) % self.n_x)

    def flat_index(self, p: SitePoint) -> int:
        return p.it * self.n_x + (p.ix % self.n_x)

    def spatial_distance(self, ix: int, jx: int) -> int:
        d = abs(ix - jx) % self.n_x
        return min(d, self.n_x - d)

    def same_as(self, other: "LorentzianLattice") -> bool:
        return (self is other) or (
            self.shape == other.shape and self.dt == other.dt and self.dx == other.dx
            and np.array_equal(self.g_tt, other.g_tt) and np.array_equal(self.g_xx, other.g_xx))

    def __repr__(self) -> str:
        return (f"LorentzianLattice(n_t={self.n_t}, n_x={self.n_x}, dt={self.dt:g}, "
                f"dx={self.dx:g}, constant_metric={self.is_constant_metric})")

    # ------------------------------------------------------------ conversions
    def mask_from_sites(self, sites: Iterable[SitePoint]) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for p in sites:
            if not 0 <= p.it < self.n_t:
                raise ValueError(f"site {p} outside the time window")
            mask[p.it, p.ix % self.n_x] = True
        return mask

    @staticmethod
    def sites_from_mask(mask: np.ndarray) -> set[SitePoint]:
        its, ixs = np.nonzero(mask)
        return {SitePoint(int(a), int(b)) for a, b in zip(its, ixs)}

    # -------------------------------------------------------------- cones
    def _dilate(self, row: np.ndarray, steps: np.ndarray) -> np.ndarray:
        out = row.copy()
        for k in np.unique(steps[row]):
            src = row & (steps == k)
            if k >= self.n_x // 2:
                if src.any():
                    out[:] = True
                continue
            for s in range(1, int(k) + 1):
                out |= np.roll(src, s) | np.roll(src, -s)
        return out

    def future_mask(self, mask: np.ndarray) -> np.ndarray:
        """Lattice J+ of a set of sites given as a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        out = np.zeros(self.shape, dtype=bool)
        cur = np.zeros(self.n_x, dtype=bool)
        for t in range(self.n_t):
            if t > 0:
                cur = self._dilate(cur, self.cone_step[t - 1])
            cur = cur | mask[t]
            out[t] = cur
        return out

    def past_mask(self, mask: np.ndarray) -> np.ndarray:
        """Lattice J- of a set of sites; mirror of :meth:`future_mask`."""
        mask = np.asarray(mask, dtype=bool)
        out = np.zeros(self.shape, dtype=bool)
        cur = np.zeros(self.n_x, dtype=bool)
        for t in range(self.n_t - 1, -1, -1):
            if t < self.n_t - 1:
                # a site at row t reaches row t+1 with its own step size
                grown = np.zeros(self.n_x, dtype=bool)
                steps = self.cone_step[t]
                for k in np.unique(steps):
                    if k >= self.n_x // 2:
                        reach = np.full(self.n_x, cur.any())
                    else:
                        reach = cur.copy()
                        for s in range(1, int(k) + 1):
                            reach |= np.roll(cur, s) | np.roll(cur, -s)
                    grown |= reach & (steps == k)
                cur = grown
            cur = cur | mask[t]
            out[t] = cur
        return out

    def causal_hull(self, mask: np.ndarray) -> np.ndarray:
        """J+(A) union J-(A)."""
        return self.future_mask(mask) | self.past_mask(mask)


def causal_future(lat: LorentzianLattice, p: SitePoint) -> set[SitePoint]:
    """All lattice sites in J+(p), built by per-row cone growth."""
    return lat.sites_from_mask(lat.future_mask(lat.mask_from_sites([p])))


def causal_past(lat: LorentzianLattice, p: SitePoint) -> set[SitePoint]:
    return lat.sites_from_mask(lat.past_mask(lat.mask_from_sites([p])))


def causally_disjoint(lat: LorentzianLattice, A, B) -> bool:
    """True iff (J+(A) u J-(A)) does not meet B.

    ``A`` and ``B`` may be sets of :class:`SitePoint` or boolean masks.
    """
    ma = A if isinstance(A, np.ndarray) else lat.mask_from_sites(A)
    mb = B if isinstance(B, np.ndarray) else lat.mask_from_sites(B)
    if not ma.any() or not mb.any():
        raise ValueError("empty support")
    return not bool(np.any(lat.causal_hull(ma) & mb))


def integrate(lat: LorentzianLattice, density) -> float:
    """Sum of density * vol_weight over all sites (pairwise summation)."""
    d = np.asarray(density)
    if d.shape[:2] != lat.shape:
        raise ValueError(f"density shape {d.shape} does not match lattice {lat.shape}")
    if d.ndim > 2:
        d = d.sum(axis=tuple(range(2, d.ndim)))
    return (d * lat.vol_weight).sum()
