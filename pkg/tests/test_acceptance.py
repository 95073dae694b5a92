"""Acceptance criteria 1-12, one PASS/FAIL line each.

Run with pytest (lines appear in the terminal summary) or directly:
    python3 tests/test_acceptance.py
"""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from peierls_lab import cli
from peierls_lab.fields import FieldConfig, Variation, chart_backward
from peierls_lab.geometry import FlatTarget, builtin_target
from peierls_lab.green import advanced_solve, causal_propagator, retarded_solve
from peierls_lab.lattice import LorentzianLattice
from peierls_lab.observables import (action_functional, additivity_test, constant_functional,
                                     global_additivity_test, linear_smeared, power_smeared,
                                     quadratic_smeared, regular_exp_functional)
from peierls_lab.peierls import (VariationFamily, bracket_value, causal_region, equivalent_forms,
                                 jacobi_residual, lagrangian_locality_check, leibniz_check,
                                 onshell_ideal_element, peierls_bracket)
from peierls_lab.studies import (constant_residual, geodesic_residual, jacobi_wavemap,
                                 plane_wave_residual, propagator_derivative_study, rates,
                                 retarded_kernel_error)
from peierls_lab.variational import (GeneralizedLagrangian, el_kernel, free_scalar,
                                     is_normally_hyperbolic, linearize, mass_term,
                                     reconstruct_density, stencil_neighbourhood, wave_map)
from peierls_lab.wavemaps import WaveMapModel, evolve, gaussian_smearing, smooth_background

ROOT = Path(__file__).resolve().parents[1]
SPHERE = builtin_target("sphere2_stereographic")
RESULTS: dict[int, tuple[bool, str]] = {}


def rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def unit_bump(lat, t0, x0, w):
    f = gaussian_smearing(lat, t0, x0, w)
    return f / float((f * lat.vol_weight).sum())


def mask_of(F, lat):
    return lat.mask_from_sites(F.declared_support)


# ---------------------------------------------------------------- criteria
def criterion_1():
    lat = LorentzianLattice(128, 64, 0.05, 0.1)
    op = linearize(GeneralizedLagrangian(free_scalar(1)), FieldConfig.zeros(lat, FlatTarget(1)))
    r = rng(1)
    pts = [(int(r.integers(0, 128)), int(r.integers(0, 64))) for _ in range(100)]
    start = time.perf_counter()
    S = np.zeros(lat.shape + (1, len(pts)))
    for j, (it, ix) in enumerate(pts):
        S[it, ix, 0, j] = 1.0
    U = retarded_solve(op, S)
    V = advanced_solve(op, S)
    leak = 0
    for j, (it, ix) in enumerate(pts):
        m = np.zeros(lat.shape, bool)
        m[it, ix] = True
        leak += int(np.count_nonzero(U[..., 0, j][~lat.future_mask(m)]))
        leak += int(np.count_nonzero(V[..., 0, j][~lat.past_mask(m)]))
    elapsed = time.perf_counter() - start
    return leak == 0 and elapsed < 5.0, f"nonzero entries outside J+/J- = {leak}, {elapsed:.2f} s"


def criterion_2():
    start = time.perf_counter()
    errs = [retarded_kernel_error(N) for N in (50, 100, 200)]
    elapsed = time.perf_counter() - start
    rt = rates(errs)
    ok = errs[-1] < 0.05 and all(r >= 0.8 for r in rt) and elapsed < 30.0
    return ok, (f"L1 errors {', '.join(f'{e:.4f}' for e in errs)} at N = 50, 100, 200; "
                f"rates {', '.join(f'{r:.3f}' for r in rt)}; {elapsed:.1f} s")


def criterion_3():
    N = 32
    lat = LorentzianLattice(N, N, 1.0 / N, 2.0 / N)
    gl = GeneralizedLagrangian(wave_map(SPHERE))
    phi = smooth_background(lat, SPHERE, 0.3, 3)
    op = linearize(gl, phi)
    r = rng(3)
    U = r.standard_normal(lat.shape + (2, 50))
    V = r.standard_normal(lat.shape + (2, 50))
    GU = retarded_solve(op, U)
    AV = advanced_solve(op, V)
    worst = 0.0
    for j in range(50):
        a = float(np.sum(GU[..., j] * V[..., j]))
        b = float(np.sum(U[..., j] * AV[..., j]))
        worst = max(worst, abs(a - b) / max(1.0, abs(a), abs(b)))
    lat48 = LorentzianLattice(48, 48, 0.05, 0.1)
    op48 = linearize(GeneralizedLagrangian(free_scalar(1)), FieldConfig.zeros(lat48, FlatTarget(1)))
    K = causal_propagator(op48).dense_kernel()
    anti = float(np.abs(K + K.T).max()) / max(1.0, float(np.abs(K).max()))
    return worst < 1e-11 and anti < 1e-11, f"adjoint {worst:.2e}, dense antisymmetry {anti:.2e}"


def _bracket_setup():
    N = 32
    lat = LorentzianLattice(N + 1, N, 1.0 / N, 2.0 / N)
    gl = GeneralizedLagrangian(wave_map(SPHERE))
    phi = smooth_background(lat, SPHERE, 0.2, 4)
    F = power_smeared(lat, 2, unit_bump(lat, 0.7, 0.8, 0.25), 3, [1.0, 0.4], "F")
    G = quadratic_smeared(lat, 2, unit_bump(lat, 0.3, 1.0, 0.25), "G")
    H = linear_smeared(lat, 2, unit_bump(lat, 0.5, 1.2, 0.25)[..., None] * [0.3, 1.0], "H")
    return lat, gl, phi, F, G, H


def criterion_4():
    lat, gl, phi, F, G, H = _bracket_setup()
    fg, gf = bracket_value(gl, F, G, phi), bracket_value(gl, G, F, phi)
    scale = max(1.0, abs(fg))
    anti = abs(fg + gf) / scale
    forms = equivalent_forms(gl, F, G, phi)
    form_dev = abs(forms["R-A"] - forms["R-Rt"]) / forms["scale"]
    leib = leibniz_check(gl, F, G, H, phi) / scale
    # causally disjoint narrow pair
    Fa = quadratic_smeared(lat, 2, unit_bump(lat, 0.5, 0.3, 0.08), "Fa")
    Fb = power_smeared(lat, 2, unit_bump(lat, 0.5, 1.3, 0.08), 3, [1.0, 1.0], "Fb")
    assert not np.any(lat.causal_hull(mask_of(Fa, lat)) & mask_of(Fb, lat))
    rep = peierls_bracket(gl, Fa, Fb, phi)
    disjoint = abs(rep.value) / rep.scale
    # Lagrangian locality: causally related narrow pair, mass bump off / on the region
    Fc = power_smeared(lat, 2, unit_bump(lat, 0.85, 0.4, 0.08), 3, [1.0, 0.5], "Fc")
    region = causal_region(lat, mask_of(Fa, lat), mask_of(Fc, lat))
    near = stencil_neighbourhood(lat, region)
    far = ~stencil_neighbourhood(lat, near)
    m_far = np.where(far, 2.0, 0.0)
    pos = lagrangian_locality_check(gl, GeneralizedLagrangian(gl.density + mass_term(m_far, 2)),
                                    Fa, Fc, phi)
    m_in = np.where(region, 50.0, 0.0)
    neg = lagrangian_locality_check(gl, GeneralizedLagrangian(gl.density + mass_term(m_in, 2)),
                                    Fa, Fc, phi, allow_overlap=True)
    pos_rel, neg_rel = pos.difference / pos.scale, neg.difference / neg.scale
    ok = (anti < 1e-12 and disjoint < 1e-12 and rep.support_check and form_dev < 1e-10
          and leib < 1e-10 and pos_rel < 1e-10 and neg_rel > 1e-6)
    return ok, (f"antisymmetry {anti:.1e}, disjoint {disjoint:.1e}, forms {form_dev:.1e}, "
                f"Leibniz {leib:.1e}, locality +{pos_rel:.1e} / -{neg_rel:.1e}")


def criterion_5():
    lat = LorentzianLattice(24, 24, 0.05, 0.1)
    gl = GeneralizedLagrangian(free_scalar(1))
    phi = FieldConfig(lat, FlatTarget(1), 0.1 * rng(5).standard_normal(lat.shape + (1,)))
    T, L = lat.times()[-1], lat.length
    Fs = [quadratic_smeared(lat, 1, unit_bump(lat, a * T, b * L, 0.3), n)
          for a, b, n in ((0.7, 0.3, "F"), (0.3, 0.45, "G"), (0.5, 0.6, "H"))]
    free = jacobi_residual(gl, *Fs, phi)
    res = [jacobi_wavemap(N)["residual"] for N in (16, 32, 64)]
    disc = retarded_kernel_error(64)
    monotone = all(b < a for a, b in zip(res[:-1], res[1:]))
    ok = free < 1e-10 and monotone and res[-1] < 10 * disc
    return ok, (f"free {free:.1e}; wave maps {', '.join(f'{r:.1e}' for r in res)} at N = 16, 32, 64 "
                f"(monotone: {monotone}); final vs 10x propagator error {10 * disc:.2e}")


def criterion_6():
    lat = LorentzianLattice(16, 16, 0.05, 0.1)
    free = is_normally_hyperbolic(linearize(GeneralizedLagrangian(free_scalar(1)),
                                            FieldConfig.zeros(lat, FlatTarget(1))))
    gl = GeneralizedLagrangian(wave_map(SPHERE))
    lo, hi, all_ok = math.inf, -math.inf, True
    for seed in range(20):
        phi = smooth_background(lat, SPHERE, 0.5, seed)
        nh = is_normally_hyperbolic(linearize(gl, phi))
        all_ok &= nh.ok
        lo, hi = min(lo, float(nh.factor.min())), max(hi, float(nh.factor.max()))
    dev = max(abs(lo - 0.5), abs(hi - 0.5))
    free_exact = free.ok and bool(np.all(free.factor == 1.0))
    ok = free_exact and all_ok and dev < 1e-12
    return ok, (f"free scalar c == 1 exactly: {free_exact}; wave maps normally hyperbolic: "
                f"{all_ok}, c in [{lo:.15g}, {hi:.15g}] over 20 backgrounds (target 1/2)")


def criterion_7():
    Ns = (16, 32, 64, 128)
    pw = rates([plane_wave_residual(N) for N in Ns])
    geo = rates([geodesic_residual(N) for N in Ns])
    const = [constant_residual(N) for N in (8, 16, 32)]
    ok = min(pw) >= 1.8 and min(geo) >= 1.8 and all(c == 0.0 for c in const)
    return ok, (f"plane-wave rates {', '.join(f'{r:.2f}' for r in pw)}; geodesic rates "
                f"{', '.join(f'{r:.2f}' for r in geo)}; constant max |E| = {max(const)}")


def _disjoint_pair(r, lat, dim, amp=0.05):
    """Two variations on x-intervals separated by at least one empty column."""
    nx = lat.n_x
    a = int(r.integers(0, nx))
    la = int(r.integers(1, nx // 3))
    gap = int(r.integers(1, 3))
    b = (a + la + gap) % nx
    lb = int(r.integers(1, nx - la - 2 * gap))
    X1 = np.zeros(lat.shape + (dim,))
    X2 = np.zeros(lat.shape + (dim,))
    t0 = int(r.integers(0, lat.n_t - 1))
    t1 = int(r.integers(t0 + 1, lat.n_t))
    cols_a = (a + np.arange(la)) % nx
    cols_b = (b + np.arange(lb)) % nx
    X1[t0:t1 + 1, cols_a] = amp * r.standard_normal((t1 + 1 - t0, la, dim))
    X2[:, cols_b] = amp * r.standard_normal((lat.n_t, lb, dim))
    return X1, X2


def criterion_8():
    lat = LorentzianLattice(12, 16, 0.05, 0.1)
    r = rng(8)
    glf = GeneralizedLagrangian(free_scalar(2))
    glw = GeneralizedLagrangian(wave_map(SPHERE))
    f = r.random(lat.shape)
    locals_ = [linear_smeared(lat, 2, r.standard_normal(lat.shape + (2,)), "lin"),
               quadratic_smeared(lat, 2, f, "quad"),
               power_smeared(lat, 2, f, 3, [1.0, -0.5], "cubic"),
               action_functional(glf, lat, f, "free_action"),
               action_functional(glw, lat, f, "wavemap_action"),
               constant_functional(lat, 2, 1.5)]
    worst = 0.0
    for k in range(50):
        phi0 = smooth_background(lat, SPHERE, 0.3, k)
        X1, X2 = _disjoint_pair(r, lat, 2)
        for F in locals_:
            rep = additivity_test(F, phi0, Variation(phi0, X1), Variation(phi0, X2))
            worst = max(worst, rep.deviation / rep.scale)
            phi1 = chart_backward(phi0, Variation(phi0, X1))
            phim = chart_backward(phi0, Variation(phi0, X2))
            g = global_additivity_test(F, phi1, phi0, phim)
            worst = max(worst, g.deviation / g.scale)
    # regular, non-local functional on a pair constructed to cross the cutoff plateau
    lat2 = LorentzianLattice(8, 16, 0.05, 0.1)
    phi0 = FieldConfig.zeros(lat2, FlatTarget(1))
    mask = np.zeros(lat2.shape)
    mask[2:6, 2:14] = 1.0
    Greg = regular_exp_functional(GeneralizedLagrangian(free_scalar(1)), lat2, mask)
    X1 = np.zeros(lat2.shape + (1,))
    X2 = np.zeros(lat2.shape + (1,))
    X1[2:6, 3:7, 0] = np.linspace(0.0, 4.0, 4)[None, :]
    X2[2:6, 9:13, 0] = np.linspace(0.0, 4.0, 4)[None, :]
    bad = additivity_test(Greg, phi0, Variation(phi0, X1), Variation(phi0, X2))
    ok = worst < 1e-10 and bad.deviation > 1e-6
    return ok, f"local worst {worst:.1e} over 50 pairs x 6 functionals; regular deviation {bad.deviation:.2e}"


def criterion_9():
    lat = LorentzianLattice(10, 12, 0.05, 0.1)
    r = rng(9)
    f = r.random(lat.shape)
    cases = [(FlatTarget(1), linear_smeared(lat, 1, r.standard_normal(lat.shape + (1,)), "lin")),
             (FlatTarget(1), quadratic_smeared(lat, 1, f, "quad")),
             (SPHERE, action_functional(GeneralizedLagrangian(wave_map(SPHERE)), lat, f, "wm"))]
    worst = 0.0
    for tg, F in cases:
        for k in range(5):
            phi0 = smooth_background(lat, tg, 0.3, k)
            X = 0.1 * r.standard_normal(phi0.values.shape)
            phi = chart_backward(phi0, Variation(phi0, X))
            theta = reconstruct_density(F, phi0, phi)
            gap = abs(F(phi) - F(phi0) - float(np.sum(theta * lat.vol_weight)))
            worst = max(worst, gap)
    return worst < 1e-8, f"max |F(phi) - F(phi0) - int theta| = {worst:.2e}"


def criterion_10():
    N = 24
    lat = LorentzianLattice(N + 1, N, 1.0 / N, 2.0 / N)
    model = WaveMapModel(lat, SPHERE)
    gl = model.lagrangian
    seed_bg = smooth_background(lat, SPHERE, 0.2, 10)
    phi = evolve(model, seed_bg.values[0], seed_bg.values[1])
    resid = el_kernel(gl, phi).residual()
    r = rng(10)
    X = np.zeros(phi.values.shape)
    X[3:N - 3, 4:N - 4] = r.standard_normal((N - 6, N - 8, 2))
    a = np.zeros(lat.shape)
    a[3:N - 3] = r.random((N - 6, N))
    ideals = [onshell_ideal_element(gl, VariationFamily.fixed(X), lat, "I_fixed"),
              onshell_ideal_element(gl, VariationFamily.scaled_field(a), lat, "I_scaled")]
    others = [power_smeared(lat, 2, unit_bump(lat, 0.3, 0.9, 0.3), 3, [1.0, 0.3], "F"),
              quadratic_smeared(lat, 2, unit_bump(lat, 0.7, 1.1, 0.3), "G"),
              action_functional(gl, lat, unit_bump(lat, 0.5, 0.5, 0.3), "S")]
    Gm = others[1]
    worst_val = worst_br = 0.0
    for I in ideals:
        worst_val = max(worst_val, abs(I(phi)), abs((Gm * I)(phi)))
        for B in others:
            worst_br = max(worst_br, abs(bracket_value(gl, I, B, phi)),
                           abs(bracket_value(gl, Gm * I, B, phi)))
    ref = max(abs(bracket_value(gl, others[0], B, phi)) for B in others[1:])
    tol = 100.0 * max(resid, np.finfo(float).eps) * max(1.0, ref)
    ok = worst_val <= tol * float(np.abs(X).sum() + 1) and worst_br <= tol
    return ok, (f"EL residual {resid:.1e}; ideal values {worst_val:.1e}, brackets {worst_br:.1e} "
                f"(tol {tol:.1e}, reference bracket {ref:.1e})")


def criterion_11():
    rows = propagator_derivative_study((1e-2, 5e-3, 2.5e-3))
    c = [r["constant"] for r in rows]
    bounded = max(c) / min(c) < 1.5
    decreasing = all(b["error"] < a["error"] for a, b in zip(rows[:-1], rows[1:]))
    return bounded and decreasing, ("error/t = " + ", ".join(f"{v:.3f}" for v in c)
                                    + " at t = 1e-2, 5e-3, 2.5e-3")


def criterion_12(tmp: Path | None = None):
    import tempfile
    base = Path(tmp) if tmp is not None else Path(tempfile.mkdtemp())
    cfg = ROOT / "configs" / "free_scalar.toml"
    blobs, codes = [], []
    for k in (1, 2):
        out = base / f"run{k}"
        codes.append(cli.run(["verify", "--config", str(cfg), "--out", str(out), "--seed", "11"]))
        blobs.append((out / "report.json").read_bytes())
    ok = blobs[0] == blobs[1] and codes == [0, 0]
    return ok, f"exit codes {codes}, reports identical: {blobs[0] == blobs[1]}"


CRITERIA = {1: ("Green support exact on J+/J-", criterion_1),
            2: ("retarded kernel accuracy and rate", criterion_2),
            3: ("Green adjointness and causal antisymmetry", criterion_3),
            4: ("Peierls bracket laws", criterion_4),
            5: ("Jacobi identity", criterion_5),
            6: ("normal hyperbolicity factors", criterion_6),
            7: ("Euler-Lagrange convergence", criterion_7),
            8: ("additivity and locality", criterion_8),
            9: ("density reconstruction", criterion_9),
            10: ("on-shell ideal", criterion_10),
            11: ("propagator derivative", criterion_11),
            12: ("determinism of verify", criterion_12)}


def line(n: int, ok: bool, detail: str) -> str:
    return f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {CRITERIA[n][0]} ({detail})"


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, tmp_path):
    fn = CRITERIA[n][1]
    ok, detail = fn(tmp_path) if n == 12 else fn()
    RESULTS[n] = (ok, detail)
    print(line(n, ok, detail))
    assert ok, line(n, ok, detail)


if __name__ == "__main__":
    failed = 0
    for n, (_, fn) in sorted(CRITERIA.items()):
        ok, detail = fn()
        failed += not ok
        print(line(n, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
