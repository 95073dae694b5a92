"""Retarded, advanced and causal Green operators by explicit time marching.

Sign convention: with H the Hessian of the discrete action, D = -h^{-1} H / vol
and the Green operators on covector densities are G(s) = -H^{-1} s with the
retarded (advanced) boundary condition.  The march itself solves H u = -s,
whose time stencil has a positive second-derivative coefficient; the minus
sign is applied once, at the source.  With this convention the free scalar
impulse response is -1/2 on the forward cone, and the response of -D is +1/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import FieldConfig, Variation
from .variational import GeneralizedLagrangian, LinearizedOperator, linearize

SIGN_CONVENTION = "G solves D G s = s/vol raised by h; internal march uses -D (monic time stencil)"
DEFAULT_DENSE_LIMIT = 64 * 64


class _Marcher:
    """Row blocks of the Hessian and inverted time-link blocks, cached per operator."""

    def __init__(self, op: LinearizedOperator):
        lat = op.lattice
        self.n_t, self.n_x, self.n = lat.n_t, lat.n_x, op.dim
        m = self.n_x * self.n
        self.m = m
        H = op.hessian.tocsr()
        self.diag = []
        self.lower = []
        self.upper = []
        for t in range(self.n_t):
            rows = H[t * m:(t + 1) * m]
            self.diag.append(rows[:, t * m:(t + 1) * m].tocsr())
            self.lower.append(rows[:, (t - 1) * m:t * m].tocsr() if t > 0 else None)
            self.upper.append(rows[:, (t + 1) * m:(t + 2) * m].tocsr() if t < self.n_t - 1 else None)
        blocks = op.time_blocks
        if blocks.size:
            dets = np.linalg.det(blocks)
            if np.any(dets == 0) or not np.all(np.isfinite(dets)):
                raise ValueError("singular time stencil: operator not normally hyperbolic")
            self.b_inv = np.linalg.inv(blocks)
            self.bt_inv = np.swapaxes(self.b_inv, -1, -2)
        else:
            self.b_inv = self.bt_inv = blocks

    def _solve_block(self, inv, rhs):
        # rhs (m, k) -> per-x (n, k)
        r = rhs.reshape(self.n_x, self.n, -1)
        return np.einsum("xij,xjk->xik", inv, r).reshape(self.m, -1)

    def retarded(self, s: np.ndarray) -> np.ndarray:
        """Solve H u = -s forward in time with u = 0 on row 0; s shape (n_t, m, k)."""
        u = np.zeros_like(s)
        for t in range(self.n_t - 1):
            r = -s[t] - self.diag[t] @ u[t]
            if t > 0:
                r = r - self.lower[t] @ u[t - 1]
            u[t + 1] = self._solve_block(self.b_inv[t], r)
        return u

    def advanced(self, s: np.ndarray) -> np.ndarray:
        u = np.zeros_like(s)
        for t in range(self.n_t - 1, 0, -1):
            r = -s[t] - self.diag[t] @ u[t]
            if t < self.n_t - 1:
                r = r - self.upper[t] @ u[t + 1]
            u[t - 1] = self._solve_block(self.bt_inv[t - 1], r)
        return u


def _marcher(op: LinearizedOperator) -> _Marcher:
    m = getattr(op, "_marcher", None)
    if m is None:
        m = _Marcher(op)
        op._marcher = m
    return m


def _check_preconditions(op: LinearizedOperator):
    if not op.lattice.is_causally_stable:
        raise ValueError("unstable discretization")
    nh = op.normal_hyperbolicity(1e-8)
    if not nh.ok:
        raise ValueError("operator not normally hyperbolic")


def _shape_source(op: LinearizedOperator, source):
    s = source.components if isinstance(source, Variation) else np.asarray(source, dtype=float)
    lat = op.lattice
    base_shape = lat.shape + (op.dim,)
    if s.ndim == 2 and op.dim == 1 and s.shape == lat.shape:
        s = s[..., None]
    batched = s.ndim == 4
    if s.shape[:3] != base_shape:
        raise ValueError(f"source shape {s.shape} does not match {base_shape}")
    k = s.shape[3] if batched else 1
    return s.reshape(lat.n_t, lat.n_x * op.dim, k), batched


def _solve(op, source, kind):
    _check_preconditions(op)
    s, batched = _shape_source(op, source)
    mar = _marcher(op)
    if kind == "retarded":
        u = mar.retarded(s)
    elif kind == "advanced":
        u = mar.advanced(s)
    else:
        u = mar.retarded(s) - mar.advanced(s)
    lat = op.lattice
    out = u.reshape(lat.n_t, lat.n_x, op.dim, -1)
    if batched:
        return out
    return Variation(op.base, out[..., 0])


def retarded_solve(op: LinearizedOperator, source):
    """G+ applied to a covector density; returns a Variation (or array for batches)."""
    return _solve(op, source, "retarded")


def advanced_solve(op: LinearizedOperator, source):
    return _solve(op, source, "advanced")


@dataclass
class GreenOperator:
    kind: str
    op: LinearizedOperator
    dense_limit: int = DEFAULT_DENSE_LIMIT
    sign_convention: str = SIGN_CONVENTION

    @property
    def base(self) -> FieldConfig:
        return self.op.base

    def apply(self, source):
        return _solve(self.op, source, self.kind)

    def apply_array(self, source) -> np.ndarray:
        out = self.apply(source)
        return out.components if isinstance(out, Variation) else out

    def on_sections(self, u):
        """G_M: acts on variations after lowering with the fiber metric and volume."""
        return self.apply(self.op.lower_index(u))

    def dense_kernel(self) -> np.ndarray:
        """Matrix K with K[a, b] = response at flat index a to a unit source at b."""
        lat = self.op.lattice
        if lat.n_sites > self.dense_limit:
            raise ValueError(f"dense assembly refused: {lat.n_sites} sites exceeds limit "
                             f"{self.dense_limit}")
        N = self.op.size
        eye = np.eye(N).reshape(lat.n_t, lat.n_x, self.op.dim, N)
        return self.apply(eye).reshape(N, N)


def retarded_operator(op: LinearizedOperator) -> GreenOperator:
    return GreenOperator("retarded", op)


def advanced_operator(op: LinearizedOperator) -> GreenOperator:
    return GreenOperator("advanced", op)


def causal_propagator(op: LinearizedOperator, dense_limit: int = DEFAULT_DENSE_LIMIT) -> GreenOperator:
    return GreenOperator("causal", op, dense_limit)


def propagator_derivative(gl: GeneralizedLagrangian, phi: FieldConfig, X: Variation,
                          kind: str = "retarded", op: LinearizedOperator | None = None):
    """Linear map s -> (dG/dphi)(X) s.

    With D' the lowered derivative of D along X (minus the third derivative of
    the action contracted with X): dG+- = -G+- D' G+- and
    dG = -G D' G+ - G- D' G.
    """
    if kind not in ("retarded", "advanced", "causal"):
        raise ValueError(f"unknown propagator kind {kind!r}")
    if op is None:
        op = linearize(gl, phi)
    T = gl.third_matrix(phi, X)
    lat = phi.lattice
    n = op.dim

    def dprime(u):
        # D' u as a covector density: -T u
        flat = u.reshape(op.size, -1)
        return (-(T @ flat)).reshape(u.shape)

    def apply(source):
        s = source.components if isinstance(source, Variation) else np.asarray(source, dtype=float)
        if s.ndim == 2 and n == 1:
            s = s[..., None]
        if kind == "causal":
            gp = retarded_solve(op, s[..., None])[..., 0]
            gc = gp - advanced_solve(op, s[..., None])[..., 0]
            a = -_solve(op, dprime(gp)[..., None], "causal")[..., 0]
            b = -_solve(op, dprime(gc)[..., None], "advanced")[..., 0]
            out = a + b
        else:
            g1 = _solve(op, s[..., None], kind)[..., 0]
            out = -_solve(op, dprime(g1)[..., None], kind)[..., 0]
        return out.reshape(lat.shape + (n,))

    return apply
