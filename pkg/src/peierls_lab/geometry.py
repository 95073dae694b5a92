"""Riemannian target manifolds in a single chart.

Targets are conformally flat, h_ij(y) = rho(y) delta_ij, which covers the
Euclidean spaces and the round sphere in stereographic coordinates.  All
derivative tensors are analytic; arrays carry arbitrary leading batch axes.
"""

from __future__ import annotations

import re

import numpy as np

# coordinate radius beyond which a stereographic point counts as off-chart
SPHERE_CHART_RADIUS = 50.0


class TargetGeometry:
    """Metric h, its derivatives, Christoffels and Riemann tensor.

    Index conventions (trailing axes):
      metric[..., i, j]            h_ij
      dmetric[..., i, j, k]        d_k h_ij
      d2metric[..., i, j, k, l]    d_k d_l h_ij
      christoffel[..., i, j, k]    Gamma^i_jk
      riemann[..., k, i, l, j]     R^k_ilj
    """

    name: str = "target"
    dim: int = 1
    # Newton shooting is trusted for geodesic distances below this value
    injectivity_hint: float = np.inf

    # conformal factor and its derivatives -----------------------------------
    def rho(self, y):
        raise NotImplementedError

    def rho_derivs(self, y, order: int = 3):
        """Return (rho, d rho, d2 rho, d3 rho) up to ``order``."""
        raise NotImplementedError

    # metric -----------------------------------------------------------------
    def chart_domain(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.all(np.isfinite(y), axis=-1)

    def metric(self, y):
        y = np.asarray(y, dtype=float)
        r = self.rho(y)
        return r[..., None, None] * np.eye(self.dim)

    def inverse_metric(self, y):
        y = np.asarray(y, dtype=float)
        r = self.rho(y)
        return (1.0 / r)[..., None, None] * np.eye(self.dim)

    def metric_derivs(self, y, order: int = 3):
        """(h, dh, d2h, d3h) with derivative indices appended last."""
        y = np.asarray(y, dtype=float)
        n = self.dim
        eye = np.eye(n)
        ders = self.rho_derivs(y, order)
        out = [ders[0][..., None, None] * eye]
        if order >= 1:
            out.append(np.einsum("ij,...k->...ijk", eye, ders[1]))
        if order >= 2:
            out.append(np.einsum("ij,...kl->...ijkl", eye, ders[2]))
        if order >= 3:
            out.append(np.einsum("ij,...klm->...ijklm", eye, ders[3]))
        return tuple(out)

    def dmetric(self, y):
        return self.metric_derivs(y, 1)[1]

    def christoffel(self, y):
        """Gamma^i_jk = 1/2 h^il (d_j h_lk + d_k h_lj - d_l h_jk)."""
        h, dh = self.metric_derivs(y, 1)
        hinv = np.linalg.inv(h)
        # dh[..., l, k, j] = d_j h_lk
        low = 0.5 * (np.swapaxes(dh, -1, -2) + dh - np.moveaxis(dh, -1, -3))
        # low[..., l, j, k] = Gamma_{l, jk}
        return np.einsum("...il,...ljk->...ijk", hinv, low)

    def dchristoffel(self, y):
        """d_m Gamma^i_jk, trailing index m."""
        h, dh, d2h = self.metric_derivs(y, 2)
        hinv = np.linalg.inv(h)
        low = 0.5 * (np.swapaxes(dh, -1, -2) + dh - np.moveaxis(dh, -1, -3))
        # d_m of low[l, j, k]; d2h[a, b, c, m] = d_m d_c h_ab
        d_low = 0.5 * (np.einsum("...lkjm->...ljkm", d2h)
                       + np.einsum("...ljkm->...ljkm", d2h)
                       - np.einsum("...jklm->...ljkm", d2h))
        dhinv = -np.einsum("...ia,...abm,...bl->...ilm", hinv, dh, hinv)
        return (np.einsum("...ilm,...ljk->...ijkm", dhinv, low)
                + np.einsum("...il,...ljkm->...ijkm", hinv, d_low))

    def riemann(self, y):
        """R^k_ilj = d_l G^k_ij - d_j G^k_il + G^k_lm G^m_ij - G^k_jm G^m_il."""
        G = self.christoffel(y)
        dG = self.dchristoffel(y)
        term1 = np.einsum("...kijl->...kilj", dG)
        term2 = np.einsum("...kilj->...kilj", dG)
        term3 = np.einsum("...klm,...mij->...kilj", G, G)
        term4 = np.einsum("...kjm,...mil->...kilj", G, G)
        return term1 - term2 + term3 - term4

    def sectional_curvature(self, y, u, v):
        """K(u, v) = <R(u,v)v, u> / (|u|^2 |v|^2 - <u,v>^2)."""
        y = np.asarray(y, dtype=float)
        R = self.riemann(y)
        h = self.metric(y)
        # R(u,v)v in components: R^k_ilj v^i u^l v^j  (R^k_{i l j} with l,j the 2-form slots)
        Ruvv = np.einsum("...kilj,...i,...l,...j->...k", R, v, u, v)
        num = np.einsum("...k,...kn,...n->...", Ruvv, h, u)
        uu = np.einsum("...i,...ij,...j->...", u, h, u)
        vv = np.einsum("...i,...ij,...j->...", v, h, v)
        uv = np.einsum("...i,...ij,...j->...", u, h, v)
        return num / (uu * vv - uv ** 2)

    def norm(self, y, v):
        h = self.metric(y)
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, h, v))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, dim={self.dim})"


class FlatTarget(TargetGeometry):
    def __init__(self, n: int = 1):
        if n < 1:
            raise ValueError("dimension must be positive")
        self.dim = int(n)
        self.name = f"flat({n})"

    def rho(self, y):
        return np.ones(np.shape(y)[:-1])

    def rho_derivs(self, y, order: int = 3):
        shp = np.shape(y)[:-1]
        n = self.dim
        out = [np.ones(shp), np.zeros(shp + (n,)), np.zeros(shp + (n, n)),
               np.zeros(shp + (n, n, n))]
        return tuple(out[: order + 1])


class StereographicSphere(TargetGeometry):
    """Unit 2-sphere, h = 4 delta / (1 + |y|^2)^2, sectional curvature 1."""

    def __init__(self):
        self.dim = 2
        self.name = "sphere2_stereographic"
        self.injectivity_hint = np.pi

    def chart_domain(self, y):
        y = np.asarray(y, dtype=float)
        ok = np.all(np.isfinite(y), axis=-1)
        return ok & (np.einsum("...i,...i->...", y, y) < SPHERE_CHART_RADIUS ** 2)

    def rho(self, y):
        y = np.asarray(y, dtype=float)
        s = 1.0 + np.einsum("...i,...i->...", y, y)
        return 4.0 / s ** 2

    def rho_derivs(self, y, order: int = 3):
        y = np.asarray(y, dtype=float)
        eye = np.eye(2)
        s = 1.0 + np.einsum("...i,...i->...", y, y)
        out = [4.0 / s ** 2]
        if order >= 1:
            out.append(-16.0 * y / (s ** 3)[..., None])
        if order >= 2:
            out.append(-16.0 * eye / (s ** 3)[..., None, None]
                       + 96.0 * np.einsum("...k,...l->...kl", y, y) / (s ** 4)[..., None, None])
        if order >= 3:
            sym = (np.einsum("kl,...m->...klm", eye, y) + np.einsum("km,...l->...klm", eye, y)
                   + np.einsum("lm,...k->...klm", eye, y))
            out.append(96.0 * sym / (s ** 4)[..., None, None, None]
                       - 768.0 * np.einsum("...k,...l,...m->...klm", y, y, y)
                       / (s ** 5)[..., None, None, None])
        return tuple(out)


def builtin_target(name: str) -> TargetGeometry:
    """``flat``, ``flat(n)`` or ``sphere2_stereographic``."""
    key = name.strip().lower()
    if key == "flat":
        return FlatTarget(1)
    m = re.fullmatch(r"flat\((\d+)\)", key)
    if m:
        return FlatTarget(int(m.group(1)))
    if key in ("sphere2_stereographic", "sphere2"):
        return StereographicSphere()
    raise ValueError(f"unknown target {name!r}")


# --------------------------------------------------------------------- geodesics
def _geodesic_rhs(tg: TargetGeometry, y, v):
    G = tg.christoffel(y)
    return v, -np.einsum("...ijk,...j,...k->...i", G, v, v)


def geodesic_path(tg: TargetGeometry, base, v, steps: int = 64, check: bool = True):
    """RK4 samples (y_k, ydot_k), k = 0..steps, of the geodesic on [0, 1]."""
    y = np.array(base, dtype=float)
    u = np.array(v, dtype=float)
    y, u = np.broadcast_arrays(y, u)
    y, u = y.copy(), u.copy()
    h = 1.0 / steps
    ys, us = [y.copy()], [u.copy()]
    for _ in range(steps):
        k1y, k1u = _geodesic_rhs(tg, y, u)
        k2y, k2u = _geodesic_rhs(tg, y + 0.5 * h * k1y, u + 0.5 * h * k1u)
        k3y, k3u = _geodesic_rhs(tg, y + 0.5 * h * k2y, u + 0.5 * h * k2u)
        k4y, k4u = _geodesic_rhs(tg, y + h * k3y, u + h * k3u)
        y = y + h / 6.0 * (k1y + 2 * k2y + 2 * k3y + k4y)
        u = u + h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
        if check and not np.all(tg.chart_domain(y)):
            raise ValueError("chart overflow")
        ys.append(y.copy())
        us.append(u.copy())
    return np.stack(ys), np.stack(us)


def exp_map(tg: TargetGeometry, base, v, steps: int = 64):
    """Endpoint of the geodesic from ``base`` with initial velocity ``v``.

    Fixed-step RK4 over unit parameter.  Zero vectors return the base point
    exactly.  Raises ``ValueError("chart overflow")`` if the path leaves the
    chart.
    """
    base = np.asarray(base, dtype=float)
    v = np.asarray(v, dtype=float)
    if not np.all(tg.chart_domain(base)):
        raise ValueError("chart overflow")
    if isinstance(tg, FlatTarget):
        return base + v
    ys, _ = geodesic_path(tg, base, v, steps)
    out = ys[-1]
    zero = np.all(v == 0, axis=-1)
    if np.any(zero):
        out = np.where(zero[..., None], np.broadcast_to(base, out.shape), out)
    return out


def exp_inverse(tg: TargetGeometry, base, target, tol: float = 1e-12,
                max_iter: int = 60, steps: int = 64):
    """Initial velocity v with exp_map(base, v) = target, by damped Newton.

    Works on batches; each batch element converges independently.  Raises
    ``ValueError("outside injectivity radius")`` when some element fails.
    """
    base = np.asarray(base, dtype=float)
    target = np.asarray(target, dtype=float)
    base, target = np.broadcast_arrays(base, target)
    if isinstance(tg, FlatTarget):
        return target - base
    n = tg.dim
    batch = base.shape[:-1]
    b = base.reshape(-1, n)
    q = target.reshape(-1, n)
    v = np.zeros_like(b)
    same = np.all(b == q, axis=-1)
    active = ~same
    if not np.any(active):
        return v.reshape(base.shape)
    b_a, q_a = b[active], q[active]
    # chart difference is the first-order guess
    v_a = q_a - b_a
    scale = 1.0 + np.abs(q_a).max(axis=-1)
    eps = 1e-6
    done = np.zeros(len(b_a), dtype=bool)
    try:
        r = exp_map(tg, b_a, v_a, steps) - q_a
    except ValueError:
        raise ValueError("outside injectivity radius") from None
    for _ in range(max_iter):
        err = np.linalg.norm(r, axis=-1)
        done = err <= tol * scale
        if np.all(done):
            break
        idx = ~done
        bb, vv, rr = b_a[idx], v_a[idx], r[idx]
        J = np.empty(bb.shape + (n,))
        for k in range(n):
            e = np.zeros(n)
            e[k] = eps
            plus = exp_map(tg, bb, vv + e, steps)
            minus = exp_map(tg, bb, vv - e, steps)
            J[..., k] = (plus - minus) / (2 * eps)
        try:
            step = np.linalg.solve(J, rr[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise ValueError("outside injectivity radius") from None
        lam = np.ones(len(bb))
        cur = np.linalg.norm(rr, axis=-1)
        new_v = vv - step
        for _ls in range(30):
            try:
                new_r = exp_map(tg, bb, new_v, steps) - q_a[idx]
                new_err = np.linalg.norm(new_r, axis=-1)
            except ValueError:
                new_err = np.full(len(bb), np.inf)
                new_r = rr
            bad = ~(new_err < cur) & (new_err > tol * scale[idx])
            if not np.any(bad):
                break
            lam = np.where(bad, lam * 0.5, lam)
            new_v = vv - lam[:, None] * step
        v_a[idx] = new_v
        r[idx] = exp_map(tg, bb, new_v, steps) - q_a[idx]
    err = np.linalg.norm(r, axis=-1)
    if not np.all(err <= tol * scale):
        raise ValueError("outside injectivity radius")
    v[active] = v_a
    return v.reshape(batch + (n,))
