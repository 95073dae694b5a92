"""peierls-lab command line: el-check, green, bracket, verify, converge, wavemap.

Exit codes: 0 success, 2 verification failure, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .fields import FieldConfig, Variation
from .geometry import builtin_target
from .green import advanced_solve, causal_propagator, retarded_solve
from .lattice import LorentzianLattice
from .observables import (action_functional, additivity_test, linear_smeared, power_smeared,
                          quadratic_smeared)
from .peierls import (bracket_value, equivalent_forms, jacobi_residual, lagrangian_locality_check,
                      leibniz_check, peierls_bracket, causal_region)
from .studies import QUANTITIES, rates, run_quantity
from .variational import (GeneralizedLagrangian, builtin_density, directional_derivative_check,
                          divergence_density, el_kernel, evaluate_action, is_normally_hyperbolic,
                          linearize, mass_term, stencil_neighbourhood)
from .wavemaps import (PRESETS, gaussian_smearing, geodesic_background, run_wavemap_scenario,
                       smooth_background)

COMMANDS = ("el-check", "green", "bracket", "verify", "converge", "wavemap")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config
def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix.lower() == ".json":
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: line {e.lineno} column {e.colno}: {e.msg}") from None
    else:
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            cfg = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a table at top level")
    cfg["_base_dir"] = str(p.parent.resolve())
    validate_config(cfg)
    return cfg


def _require(table: dict, key: str, where: str, kind=None):
    if key not in table:
        raise ConfigError(f"missing key '{where}.{key}'")
    v = table[key]
    if kind is not None and not isinstance(v, kind):
        raise ConfigError(f"key '{where}.{key}' has wrong type {type(v).__name__}")
    return v


def validate_config(cfg: dict):
    lat = cfg.get("lattice")
    if not isinstance(lat, dict):
        raise ConfigError("missing table 'lattice'")
    for k in ("n_t", "n_x"):
        v = _require(lat, k, "lattice", int)
        if v < 1:
            raise ConfigError(f"key 'lattice.{k}' must be positive")
    for k in ("dt", "dx"):
        v = _require(lat, k, "lattice", (int, float))
        if v <= 0:
            raise ConfigError(f"key 'lattice.{k}' must be positive")
    tol = cfg.get("tolerances", {})
    for k, v in tol.items():
        if not isinstance(v, (int, float)) or v <= 0:
            raise ConfigError(f"key 'tolerances.{k}' must be a positive number")
    conv = cfg.get("converge")
    if conv is not None:
        res = _require(conv, "resolutions", "converge", list)
        if len(res) < 2:
            raise ConfigError("key 'converge.resolutions' needs at least 2 entries")
        if any(b <= a for a, b in zip(res[:-1], res[1:])):
            raise ConfigError("key 'converge.resolutions' must be strictly increasing")
    for i, f in enumerate(cfg.get("functionals", [])):
        if "data" in f:
            path = Path(cfg["_base_dir"]) / f["data"]
            if not path.exists():
                raise ConfigError(f"functionals[{i}].data: file not found: {f['data']}")


def make_lattice(cfg: dict) -> LorentzianLattice:
    L = cfg["lattice"]
    metric = L.get("metric", "minkowski")
    if metric == "minkowski":
        g_xx = 1.0
    elif isinstance(metric, list):
        g_xx = np.asarray(metric, dtype=float)
    else:
        raise ConfigError("key 'lattice.metric' must be \"minkowski\" or a table of g_xx values")
    try:
        return LorentzianLattice(L["n_t"], L["n_x"], float(L["dt"]), float(L["dx"]), -1.0, g_xx)
    except ValueError as e:
        raise ConfigError(f"lattice: {e}") from None


def make_target(cfg: dict):
    return builtin_target(cfg.get("target", {}).get("name", "flat"))


def make_lagrangian(cfg: dict, target) -> GeneralizedLagrangian:
    name = cfg.get("lagrangian", {}).get("name", "free_scalar")
    return GeneralizedLagrangian(builtin_density(name, target))


def make_background(cfg: dict, lat, target, rng) -> FieldConfig:
    bg = cfg.get("background", {"kind": "zeros"})
    kind = bg.get("kind", "zeros")
    if kind == "zeros":
        return FieldConfig.zeros(lat, target)
    if kind == "constant":
        return FieldConfig.constant(lat, target, _require(bg, "point", "background"))
    if kind == "smooth":
        return smooth_background(lat, target, float(bg.get("amplitude", 0.2)),
                                 int(bg.get("seed", 0)))
    if kind == "geodesic":
        return geodesic_background(lat, target, _require(bg, "point", "background"),
                                   _require(bg, "velocity", "background"))
    if kind == "random":
        amp = float(bg.get("amplitude", 0.1))
        return FieldConfig(lat, target, amp * rng.standard_normal(lat.shape + (target.dim,)))
    if kind == "file":
        path = Path(cfg["_base_dir"]) / _require(bg, "path", "background")
        return FieldConfig(lat, target, np.load(path))
    raise ConfigError(f"unknown background kind {kind!r}")


def make_functional(spec: dict, cfg: dict, lat, target, gl):
    kind = _require(spec, "kind", "functionals[]")
    name = spec.get("name", kind)
    dim = target.dim
    if "data" in spec:
        f = np.load(Path(cfg["_base_dir"]) / spec["data"])
    else:
        c = spec.get("center", [0.5 * lat.times()[-1], 0.5 * lat.length])
        f = gaussian_smearing(lat, float(c[0]), float(c[1]), float(spec.get("width", 0.2)))
        if spec.get("normalize", True) and f.any():
            f = f / float((f * lat.vol_weight).sum())
    direction = spec.get("direction")
    if kind == "linear":
        if direction is not None:
            f = f[..., None] * np.asarray(direction, dtype=float)
        return linear_smeared(lat, dim, f, name)
    if kind == "quadratic":
        return quadratic_smeared(lat, dim, f, name)
    if kind == "power":
        return power_smeared(lat, dim, f, int(spec.get("power", 3)), direction, name)
    if kind == "action":
        return action_functional(gl, lat, f, name)
    raise ConfigError(f"unknown functional kind {kind!r}")


def thread_count(cfg: dict, cli_threads) -> int:
    env = os.environ.get("CFT_THREADS")
    if cli_threads is not None:
        return max(1, int(cli_threads))
    if env:
        return max(1, int(env))
    return max(1, int(cfg.get("threads", os.cpu_count() or 1)))


# ------------------------------------------------------------------ output
def _clean(obj, path="report"):
    if isinstance(obj, dict):
        return {str(k): _clean(v, f"{path}.{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v, f"{path}[{i}]") for i, v in enumerate(obj)]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite value in {path}")
        return x
    if isinstance(obj, complex):
        return [_clean(obj.real, path), _clean(obj.imag, path)]
    return obj


def write_json(path: Path, obj):
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


# ------------------------------------------------------------------ commands
def _setup(cfg, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    lat = make_lattice(cfg)
    target = make_target(cfg)
    gl = make_lagrangian(cfg, target)
    phi = make_background(cfg, lat, target, rng)
    return rng, lat, target, gl, phi


def _interior_variation(phi, rng, frac=0.25):
    lat = phi.lattice
    comp = np.zeros(phi.values.shape)
    a, b = max(1, int(lat.n_t * frac)), max(2, int(lat.n_t * (1 - frac)))
    c, d = int(lat.n_x * frac), max(int(lat.n_x * frac) + 1, int(lat.n_x * (1 - frac)))
    comp[a:b, c:d] = 0.05 * rng.standard_normal((b - a, d - c, phi.target.dim))
    return Variation(phi, comp)


def cmd_el_check(cfg, seed, out, threads):
    rng, lat, target, gl, phi = _setup(cfg, seed)
    E = el_kernel(gl, phi)
    X = _interior_variation(phi, rng)
    a, n = directional_derivative_check(gl, np.ones(lat.shape), phi, X)
    ok = abs(a - n) < 1e-6 * (1 + abs(a))
    rep = {"command": "el-check", "seed": seed, "residual_interior": E.residual(),
           "directional": {"analytic": a, "numeric": n, "passed": ok}}
    write_json(out / "report.json", rep)
    return ok


def cmd_green(cfg, seed, out, threads):
    rng, lat, target, gl, phi = _setup(cfg, seed)
    op = linearize(gl, phi)
    srcs = cfg.get("green", {}).get("sources", [[lat.n_t // 4, lat.n_x // 2]])
    entries = []
    ok = True
    for k, (it, ix) in enumerate(srcs):
        s = np.zeros(phi.values.shape)
        s[int(it), int(ix), 0] = 1.0
        u = retarded_solve(op, s).components
        v = advanced_solve(op, s).components
        m = np.zeros(lat.shape, bool)
        m[int(it), int(ix)] = True
        sup_r = bool(np.all(u[~lat.future_mask(m)] == 0))
        sup_a = bool(np.all(v[~lat.past_mask(m)] == 0))
        ok &= sup_r and sup_a
        rows = [(t, x, i, u[t, x, i]) for t, x, i in zip(*np.nonzero(u))]
        write_csv(out / f"impulse_{k}.csv", ["it", "ix", "component", "value"], rows)
        entries.append({"source": [int(it), int(ix)], "retarded_support_exact": sup_r,
                        "advanced_support_exact": sup_a, "max_abs": float(np.abs(u).max())})
    rep = {"command": "green", "seed": seed, "impulses": entries}
    if cfg.get("green", {}).get("dense", False):
        K = causal_propagator(op).dense_kernel()
        anti = float(np.abs(K + K.T).max())
        rep["causal_antisymmetry"] = anti
        write_json(out / "kernel_causal.json",
                   {"index": "flat (it * n_x + ix) * n + component", "shape": list(K.shape),
                    "values": K.tolist()})
        ok &= anti <= 1e-11 * max(1.0, float(np.abs(K).max()))
    write_json(out / "report.json", rep)
    return ok


def cmd_bracket(cfg, seed, out, threads):
    rng, lat, target, gl, phi = _setup(cfg, seed)
    specs = cfg.get("functionals", [])
    if len(specs) < 2:
        raise ConfigError("bracket needs two entries in 'functionals'")
    F = make_functional(specs[0], cfg, lat, target, gl)
    G = make_functional(specs[1], cfg, lat, target, gl)
    rep = peierls_bracket(gl, F, G, phi)
    tol = float(cfg.get("tolerances", {}).get("disjoint", 1e-12))
    d = rep.as_dict()
    mF = np.zeros(lat.shape, bool)
    mG = np.zeros(lat.shape, bool)
    for p in F.declared_support or ():
        mF[p.it, p.ix] = True
    for p in G.declared_support or ():
        mG[p.it, p.ix] = True
    disjoint = bool(mF.any() and mG.any() and not np.any(lat.causal_hull(mF) & mG))
    d["causally_disjoint"] = disjoint
    ok = rep.support_check
    if disjoint:
        d["below_tolerance"] = abs(rep.value) < tol * rep.scale
        ok &= d["below_tolerance"]
    write_json(out / "report.json", {"command": "bracket", "seed": seed, "bracket": d})
    return ok


def _verify_suite(cfg, seed, threads):
    """Invariant checks on the configured lattice; returns a list of rows."""
    rng, lat, target, gl, phi = _setup(cfg, seed)
    tol = cfg.get("tolerances", {})
    op = linearize(gl, phi)
    n = target.dim
    rows = []

    def add(name, value, limit, passed=None):
        ok = (value <= limit) if passed is None else passed
        rows.append({"invariant": name, "value": float(value), "tolerance": float(limit),
                     "status": "pass" if ok else "fail"})

    nh = is_normally_hyperbolic(op)
    add("normal_hyperbolicity", nh.max_deviation, 1e-10, nh.ok)

    # Green support on random sources
    k = int(cfg.get("verify", {}).get("sources", 8))
    S = np.zeros(lat.shape + (n, k))
    pts = [(int(rng.integers(0, lat.n_t)), int(rng.integers(0, lat.n_x))) for _ in range(k)]
    for j, (it, ix) in enumerate(pts):
        S[it, ix, 0, j] = 1.0
    U, V = retarded_solve(op, S), advanced_solve(op, S)
    leak = 0.0
    for j, (it, ix) in enumerate(pts):
        m = np.zeros(lat.shape, bool)
        m[it, ix] = True
        leak = max(leak, float(np.abs(U[..., j][~lat.future_mask(m)]).max(initial=0.0)),
                   float(np.abs(V[..., j][~lat.past_mask(m)]).max(initial=0.0)))
    add("green_support_exact", leak, 0.0)

    # inverse property and adjointness on interior sources
    u = np.zeros(phi.values.shape)
    v = np.zeros(phi.values.shape)
    a0, a1 = lat.n_t // 4, max(lat.n_t // 4 + 1, 3 * lat.n_t // 4)
    u[a0:a1] = rng.standard_normal(u[a0:a1].shape)
    v[a0:a1] = rng.standard_normal(v[a0:a1].shape)
    Gu = retarded_solve(op, u).components
    res = op.apply_lowered(Gu) - u
    add("green_inverse", float(np.abs(res[:-1]).max()) / max(1.0, float(np.abs(u).max())),
        float(tol.get("inverse", 1e-9)))
    lhs = float(np.sum(Gu * v))
    rhs = float(np.sum(u * advanced_solve(op, v).components))
    add("green_adjoint", abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)),
        float(tol.get("adjoint", 1e-11)))
    if lat.n_sites <= 32 * 32:
        K = causal_propagator(op).dense_kernel()
        add("causal_antisymmetry", float(np.abs(K + K.T).max()) / max(1.0, float(np.abs(K).max())),
            float(tol.get("adjoint", 1e-11)))

    # variational checks
    X = _interior_variation(phi, rng)
    a, num = directional_derivative_check(gl, np.ones(lat.shape), phi, X)
    add("el_directional_derivative", abs(a - num) / (1 + abs(a)), 1e-6)
    Q = np.eye(n)
    gl_div = GeneralizedLagrangian(gl.density + divergence_density(Q))
    e1 = el_kernel(gl, phi).components[1:-1]
    e2 = el_kernel(gl_div, phi).components[1:-1]
    add("trivial_lagrangian_invariance", float(np.abs(e1 - e2).max(initial=0.0)), 1e-10)
    f1 = np.zeros(lat.shape)
    f2 = np.zeros(lat.shape)
    f3 = np.zeros(lat.shape)
    third = max(1, lat.n_x // 3)
    f1[:, :third] = rng.random((lat.n_t, third))
    f2[:, third // 2: 2 * third] = rng.random((lat.n_t, 2 * third - third // 2))
    f3[:, 2 * third:] = rng.random((lat.n_t, lat.n_x - 2 * third))
    S_ = [evaluate_action(gl, f, phi) for f in (f1 + f2 + f3, f1 + f2, f2, f2 + f3)]
    add("gl_cocycle", abs(S_[0] - (S_[1] - S_[2] + S_[3])) / max(1.0, *map(abs, S_)), 1e-12)

    # bracket laws with smeared observables
    T = lat.times()[-1]
    Lx = lat.length

    def bump(t0, x0, w):
        f = gaussian_smearing(lat, t0, x0, w)
        return f / max(1e-300, float((f * lat.vol_weight).sum()))

    w = 0.2 * min(T, Lx)
    F = power_smeared(lat, n, bump(0.7 * T, 0.3 * Lx, w), 3, None, "F")
    G = quadratic_smeared(lat, n, bump(0.3 * T, 0.45 * Lx, w), "G")
    H = linear_smeared(lat, n, bump(0.5 * T, 0.6 * Lx, w), "H")
    fg, gf = bracket_value(gl, F, G, phi), bracket_value(gl, G, F, phi)
    scale = max(1.0, abs(fg))
    add("bracket_antisymmetry", abs(fg + gf) / scale, 1e-12)
    forms = equivalent_forms(gl, F, G, phi)
    add("bracket_forms", abs(forms["R-A"] - forms["R-Rt"]) / forms["scale"], 1e-10)
    add("leibniz", leibniz_check(gl, F, G, H, phi) / scale, 1e-10)
    add("jacobi", jacobi_residual(gl, F, G, H, phi), float(tol.get("jacobi", 1e-10)))
    ws = 0.04 * min(T, Lx)
    Fa = quadratic_smeared(lat, n, bump(0.5 * T, 0.2 * Lx, ws), "Fa")
    Fb = quadratic_smeared(lat, n, bump(0.5 * T, 0.7 * Lx, ws), "Fb")
    mA = np.zeros(lat.shape, bool)
    mB = np.zeros(lat.shape, bool)
    for p in Fa.declared_support:
        mA[p.it, p.ix] = True
    for p in Fb.declared_support:
        mB[p.it, p.ix] = True
    if not np.any(lat.causal_hull(mA) & mB):
        rep = peierls_bracket(gl, Fa, Fb, phi)
        add("bracket_causal_support", abs(rep.value) / rep.scale, 1e-12)
    rep = peierls_bracket(gl, F, G, phi)
    add("bracket_support_perturbation", 0.0, 0.0, rep.support_check)

    # locality in the Lagrangian: a mass bump away from the causal region of Fa, Fc
    Fc = power_smeared(lat, n, bump(0.8 * T, 0.25 * Lx, ws), 3, None, "Fc")
    mC = np.zeros(lat.shape, bool)
    for p in Fc.declared_support:
        mC[p.it, p.ix] = True
    region = stencil_neighbourhood(lat, causal_region(lat, mA, mC))
    free = ~stencil_neighbourhood(lat, region)
    if free.any():
        m2 = np.where(free, 1.0 + rng.random(lat.shape), 0.0)
        gl_mod = GeneralizedLagrangian(gl.density + mass_term(m2, n))
        loc = lagrangian_locality_check(gl, gl_mod, Fa, Fc, phi)
        add("lagrangian_locality", loc.difference / loc.scale, 1e-10)

    # additivity of a local functional on a disjoint pair with a one-site gap
    Fl = action_functional(gl, lat, bump(0.5 * T, 0.5 * Lx, 0.45 * min(T, Lx)))
    X1 = np.zeros(phi.values.shape)
    Xm = np.zeros(phi.values.shape)
    q = max(1, lat.n_x // 4)
    X1[1:-1, :q] = 0.05 * rng.standard_normal(X1[1:-1, :q].shape)
    Xm[1:-1, q + 2: 2 * q + 2] = 0.05 * rng.standard_normal(Xm[1:-1, q + 2: 2 * q + 2].shape)
    ar = additivity_test(Fl, phi, Variation(phi, X1), Variation(phi, Xm))
    add("additivity_local", ar.deviation / ar.scale, 1e-10)
    return rows


def cmd_verify(cfg, seed, out, threads):
    rows = _verify_suite(cfg, seed, threads)
    ok = all(r["status"] == "pass" for r in rows)
    rep = {"command": "verify", "seed": seed, "generator": "Philox",
           "invariants": rows, "status": "pass" if ok else "fail"}
    write_json(out / "report.json", rep)
    write_csv(out / "verify.csv", ["invariant", "value", "tolerance", "status"],
              [(r["invariant"], r["value"], r["tolerance"], r["status"]) for r in rows])
    for r in rows:
        if r["status"] != "pass":
            print(f"invariant {r['invariant']} failed: {r['value']:.3e} > {r['tolerance']:.1e}",
                  file=sys.stderr)
    return ok


def cmd_converge(cfg, seed, out, threads):
    conv = cfg.get("converge")
    if conv is None:
        raise ConfigError("missing table 'converge'")
    quantity = conv.get("quantity", "retarded_kernel")
    if quantity not in QUANTITIES:
        raise ConfigError(f"key 'converge.quantity' must be one of {', '.join(QUANTITIES)}")
    res = [int(r) for r in conv["resolutions"]]
    if any(b != 2 * a for a, b in zip(res[:-1], res[1:])):
        raise ConfigError("non-nested resolutions: each must double the previous")
    with ThreadPoolExecutor(max_workers=threads) as ex:
        errs = list(ex.map(lambda r: run_quantity(quantity, r, seed), res))
    rt = rates(errs)
    table = [(r, e, "" if i == 0 else rt[i - 1]) for i, (r, e) in enumerate(zip(res, errs))]
    write_csv(out / f"converge_{quantity}.csv", ["resolution", "error", "rate"], table)
    threshold = conv.get("min_rate")
    ok = True
    if threshold is not None:
        ok = all(r == "exact" or (isinstance(r, float) and r >= float(threshold)) for r in rt)
    rep = {"command": "converge", "seed": seed, "quantity": quantity,
           "resolutions": res, "errors": errs, "rates": rt,
           "min_rate": threshold, "passed": ok}
    write_json(out / "report.json", rep)
    return ok


def cmd_wavemap(cfg, seed, out, threads):
    wm = cfg.get("wavemap", {})
    preset = wm.get("preset", "flat-reduction")
    if preset not in PRESETS:
        raise ConfigError(f"key 'wavemap.preset' must be one of {', '.join(PRESETS)}")
    res = [int(r) for r in wm.get("resolutions", [16, 32])]
    result = run_wavemap_scenario(preset, res, float(wm.get("amplitude", 0.3)), seed)
    keys = sorted({k for r in result.rows for k in r})
    write_csv(out / f"wavemap_{preset}.csv", keys, [[r.get(k, "") for k in keys] for r in result.rows])
    write_json(out / "report.json", {"command": "wavemap", "seed": seed, "preset": preset,
                                     "rows": result.rows, "checks": result.checks,
                                     "passed": result.passed})
    return result.passed


HANDLERS = {"el-check": cmd_el_check, "green": cmd_green, "bracket": cmd_bracket,
            "verify": cmd_verify, "converge": cmd_converge, "wavemap": cmd_wavemap}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peierls-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        threads = thread_count(cfg, args.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ok = HANDLERS[args.command](cfg, seed, out, threads)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if not ok:
        print("verification failed; see report.json", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
