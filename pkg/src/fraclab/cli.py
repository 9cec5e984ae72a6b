"""Command line driver: JSON config in, CSV (or JSON) tables out.

Every table starts with a ``#`` header block holding the code version, the
canonical config and its SHA-256, the seed, the tolerances and the truncation
boxes.  Identical config and seed give identical bytes.

Exit status: 0 when every checked inequality holds, 1 when one fails,
2 for invalid configurations.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys

import numpy as np

from . import __version__
from .capacity import TOL_CAP, cap_local, cap_sp, int_cap_sp
from .constants import TOL_EIG, counterexample_sweep, doubleside_check
from .domain import (TOL_GEOM, ConfigurationError, ConvexPolygon, cone_eccentricity, domain_from_dict,
                     eccentricity, inradius_incenter, random_convex_polygon, scaled_distance_check)
from .hardy import TOL_QUAD, hardy_margin, hardy_sides, sharpness_profile
from .kfunctional import TOL_K, k_profile
from .norms import GridFunction, MathConstants, gagliardo_energy, grad_seminorm, lp_norm, set_threads

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "constants": {"domains": [{"kind": "box", "dim": 1, "side": 1.0, "h": 1 / 32}],
                  "s": [0.5], "p": [2.0], "slack": 0.05, "with_upper": False},
    "counterexample": {"n_list": [0, 1, 2, 3], "h": 1 / 16, "s": 0.3, "p": 2.0, "dim": 1, "slack": 0.05},
    "kprofile": {"domain": {"kind": "box", "dim": 1, "side": 1.0, "h": 1 / 32},
                 "function": {"kind": "bump"}, "p": 2.0,
                 "t": {"t_min": 1e-3, "t_max": 10.0, "n": 41}, "tol": TOL_K},
    "capacity": {"box": {"kind": "box", "dim": 1, "side": 2.0, "h": 0.125, "lower": -1.0},
                 "F": [[8]], "s": 0.45, "p": 2.0, "kind": "sp", "doubling": False, "tol": TOL_CAP,
                 "minimizer_csv": None},
    "hardy": {"alpha": [0.5, 1.0, 2.0], "p": [1.5, 2.0, 3.0], "deltas": [1e-2, 1e-4, 1e-8],
              "T": 1.0, "width": 1.0, "per_unit": 400},
    "geometry": {"betas": [0.0, 0.5], "n_polygons": 20, "n_vertices": 7,
                 "t": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]},
    "slimits": {"domain": {"kind": "box", "dim": 1, "side": 4.0, "h": 1 / 16, "lower": -2.0},
                "function": {"kind": "bump", "radius": 0.5},
                "s": [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95], "p": 2.0},
}


# ---------------------------------------------------------------------------
# configuration


def load_config(command: str, path: str | None, seed: int | None) -> dict:
    cfg = dict(DEFAULTS[command])
    if path:
        with open(path) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(user) - set(cfg) - {"seed"}
        if unknown:
            raise ConfigurationError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(user)
    if seed is not None:
        cfg["seed"] = seed
    if "seed" not in cfg:
        raise ConfigurationError("a random seed is required (--seed or 'seed' in the config)")
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise ConfigurationError("seed must be an unsigned 64-bit integer")
    VALIDATORS[command](cfg)
    return cfg


def _nonempty(cfg, key):
    val = cfg[key]
    if not isinstance(val, list) or not val:
        raise ConfigurationError(f"'{key}' must be a non-empty list")
    return val


def _check_sp(s, p):
    if not 0 < s < 1:
        raise ConfigurationError(f"s must lie in (0, 1), got {s}")
    if not p > 1:
        raise ConfigurationError(f"p must exceed 1, got {p}")


def _validate_constants(cfg):
    for s in _nonempty(cfg, "s"):
        for p in _nonempty(cfg, "p"):
            _check_sp(s, p)
    for d in _nonempty(cfg, "domains"):
        domain_from_dict(d)


def _validate_counterexample(cfg):
    _check_sp(cfg["s"], cfg["p"])
    if cfg["s"] * cfg["p"] >= 1:
        raise ConfigurationError("the cracked-cube sweep needs s*p < 1")
    if any(not isinstance(n, int) or n < 0 for n in _nonempty(cfg, "n_list")):
        raise ConfigurationError("n_list entries must be nonnegative integers")


def _validate_kprofile(cfg):
    if not cfg["p"] > 1:
        raise ConfigurationError("p must exceed 1")
    make_function(domain_from_dict(cfg["domain"]), cfg["function"], 0)
    _t_samples(cfg["t"])


def _validate_capacity(cfg):
    if cfg["kind"] not in ("sp", "local", "int"):
        raise ConfigurationError("capacity kind must be 'sp', 'local' or 'int'")
    if cfg["kind"] != "local":
        _check_sp(cfg["s"], cfg["p"])
    elif not cfg["p"] > 1:
        raise ConfigurationError("p must exceed 1")
    domain_from_dict(cfg["box"])


def _validate_hardy(cfg):
    if any(a <= 0 for a in _nonempty(cfg, "alpha")):
        raise ConfigurationError("alpha values must be positive")
    if any(p <= 1 for p in _nonempty(cfg, "p")):
        raise ConfigurationError("p values must exceed 1")
    if any(not 0 < d * math.exp(cfg["width"]) < cfg["T"] for d in _nonempty(cfg, "deltas")):
        raise ConfigurationError("each delta needs 0 < delta e^width < T")


def _validate_geometry(cfg):
    if any(not 0 <= b < 1 for b in cfg["betas"]):
        raise ConfigurationError("betas must lie in [0, 1)")
    if any(not 0 < t < 1 for t in _nonempty(cfg, "t")):
        raise ConfigurationError("t values must lie in (0, 1)")
    if cfg["n_polygons"] < 0 or cfg["n_vertices"] < 3:
        raise ConfigurationError("need n_polygons >= 0 and n_vertices >= 3")


def _validate_slimits(cfg):
    for s in _nonempty(cfg, "s"):
        _check_sp(s, cfg["p"])
    make_function(domain_from_dict(cfg["domain"]), cfg["function"], 0)


VALIDATORS = {"constants": _validate_constants, "counterexample": _validate_counterexample,
              "kprofile": _validate_kprofile, "capacity": _validate_capacity, "hardy": _validate_hardy,
              "geometry": _validate_geometry, "slimits": _validate_slimits}


def make_function(domain, spec: dict, seed: int) -> GridFunction:
    """Test functions: ``zero``, ``bump`` (smooth, radius/center), ``sine``, ``random`` or explicit ``values``."""
    kind = spec.get("kind", "bump")
    x = domain.active_coordinates()
    if kind == "zero":
        return GridFunction.zeros(domain)
    if kind == "values":
        return GridFunction(domain, spec["values"])
    if kind == "random":
        rng = np.random.default_rng(seed)
        return GridFunction(domain, rng.standard_normal(domain.n_active))
    if kind == "sine":
        lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
        return GridFunction(domain, np.prod(np.sin(np.pi * (x - lo) / (hi - lo)), axis=1))
    if kind == "bump":
        mid = (np.asarray(domain.lower) + np.asarray(domain.upper)) / 2
        c = np.asarray(spec.get("center", mid), dtype=float)
        r = float(spec.get("radius", 0.25 * min(b - a for a, b in domain.box)))
        q = np.sum((x - c) ** 2, axis=1) / r**2
        return GridFunction(domain, np.where(q < 1, (1 - q) ** 2, 0.0))
    raise ConfigurationError(f"unknown function kind {kind!r}")


def _t_samples(spec) -> np.ndarray:
    if isinstance(spec, list):
        t = np.asarray(spec, dtype=float)
    else:
        t = np.geomspace(float(spec["t_min"]), float(spec["t_max"]), int(spec["n"]))
    if t.size == 0 or np.any(t <= 0):
        raise ConfigurationError("t samples must be a non-empty list of positive numbers")
    return t


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def header(command: str, cfg: dict, tolerances: dict, boxes: list) -> list[str]:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return [f"# fraclab {__version__} {command}",
            f"# config_sha256: {hashlib.sha256(canon.encode()).hexdigest()}",
            f"# config: {canon}",
            f"# seed: {cfg['seed']}",
            f"# tolerances: {json.dumps(tolerances, sort_keys=True)}",
            f"# truncation_boxes: {json.dumps(boxes, sort_keys=True)}"]


def render_csv(head: list[str], columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write("\n".join(head) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands; each returns (text, exit status)


def cmd_constants(cfg: dict) -> tuple[str, int]:
    rows, status, boxes = [], EXIT_OK, []
    for d in cfg["domains"]:
        dom = domain_from_dict(d)
        boxes.append(dom.describe())
        for s in cfg["s"]:
            for p in cfg["p"]:
                rep = doubleside_check(dom, s, p, with_upper=cfg["with_upper"], slack=cfg["slack"],
                                       seed=cfg["seed"])
                row = rep.row()
                row["oneside_ok"] = rep.oneside_ok
                rows.append(row)
                if not rep.oneside_ok:
                    status = EXIT_FAIL
    cols = ["domain", "s", "p", "lambda1", "lambdaS", "LambdaS_upper", "residual_oneside",
            "residual_equivalence", "residual_twosideconv", "ratio_twoside", "oneside_ok"]
    head = header("constants", cfg, {"tol_eig": TOL_EIG, "slack": cfg["slack"]}, boxes)
    return render_csv(head, cols, rows), status


def cmd_counterexample(cfg: dict) -> tuple[str, int]:
    table = counterexample_sweep(cfg["n_list"], cfg["h"], cfg["s"], cfg["p"], dim=cfg["dim"],
                                 slack=cfg["slack"], seed=cfg["seed"])
    rows = [r.as_dict() for r in table.rows]
    side = 2 * max(cfg["n_list"]) + 1
    head = header("counterexample", cfg, {"tol_eig": TOL_EIG, "slack": cfg["slack"]},
                  [{"box": [[-side / 2, side / 2]] * cfg["dim"], "h": cfg["h"]}])
    head.append(f"# lambdaS_decreasing: {_fmt(table.lambdaS_decreasing)}")
    head.append(f"# lambda1_lower_ok: {_fmt(table.lambda1_lower_ok)}")
    cols = ["n", "h", "s", "p", "lambda1", "lambdaS", "mu", "ratio", "lambdaS_uncracked",
            "lambdaS_dilated_cell", "lambdaS_scaled_cell"]
    return render_csv(head, cols, rows), EXIT_OK if table.ok else EXIT_FAIL


def profile_shape_ok(prof, tol: float) -> bool:
    """Monotone, concave in ``t`` and below ``min(||u||, t ||grad u||)``, all up to ``tol``."""
    order = np.argsort(prof.t_samples)
    t, k = prof.t_samples[order], prof.k_values[order]
    ok = bool(np.all(k <= prof.upper_envelope()[order] + tol))
    ok &= bool(np.all(np.diff(k) >= -tol))
    if len(t) > 2:
        # each value lies above the chord through its neighbours
        chord = k[:-2] + (k[2:] - k[:-2]) * (t[1:-1] - t[:-2]) / (t[2:] - t[:-2])
        ok &= bool(np.all(k[1:-1] >= chord - tol))
    return ok


def cmd_kprofile(cfg: dict) -> tuple[str, int]:
    dom = domain_from_dict(cfg["domain"])
    u = make_function(dom, cfg["function"], cfg["seed"])
    prof = k_profile(u, _t_samples(cfg["t"]), cfg["p"], tol=cfg["tol"])
    env = prof.upper_envelope()
    rows = [{"t": t, "K": k, "upper": e, "residual": r, "regime": g}
            for t, k, e, r, g in zip(prof.t_samples, prof.k_values, env, prof.residuals, prof.regimes)]
    head = header("kprofile", cfg, {"tol_k": cfg["tol"]}, [dom.describe()])
    head.append(f"# norm_u: {_fmt(prof.norm_u)}  norm_grad: {_fmt(prof.norm_grad)}")
    ok = profile_shape_ok(prof, 2 * cfg["tol"] * max(1.0, prof.norm_u))
    return render_csv(head, ["t", "K", "upper", "residual", "regime"], rows), EXIT_OK if ok else EXIT_FAIL


def cmd_capacity(cfg: dict) -> tuple[str, int]:
    box = domain_from_dict(cfg["box"])
    F = cfg["F"]
    if cfg["kind"] == "sp":
        res = cap_sp(F, box, cfg["s"], cfg["p"], doubling=cfg["doubling"], tol=cfg["tol"])
    elif cfg["kind"] == "local":
        res = cap_local(F, box, cfg["p"], tol=cfg["tol"])
    else:
        res = int_cap_sp(F, box, cfg["s"], cfg["p"])
    doc = json.loads(res.to_json())
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    out = {"fraclab_version": __version__, "command": "capacity", "config": cfg,
           "config_sha256": hashlib.sha256(canon.encode()).hexdigest(), "seed": cfg["seed"],
           "tolerances": {"tol_cap": cfg["tol"]}, "result": doc}
    if cfg["minimizer_csv"]:
        coords = res.minimizer.domain.active_coordinates()
        cols = [f"x{k}" for k in range(coords.shape[1])] + ["u"]
        rows = [dict(zip(cols, [*c, v])) for c, v in zip(coords, res.minimizer.values)]
        text = render_csv(header("capacity", cfg, {"tol_cap": cfg["tol"]}, [box.describe()]), cols, rows)
        with open(cfg["minimizer_csv"], "w", newline="") as fh:
            fh.write(text)
    ok = res.max_constraint_violation <= 1e-12 and (cfg["kind"] == "int" or res.relative_gap <= cfg["tol"])
    return json.dumps(out, sort_keys=True, indent=1) + "\n", EXIT_OK if ok else EXIT_FAIL


def cmd_hardy(cfg: dict) -> tuple[str, int]:
    rows, status = [], EXIT_OK
    for a in cfg["alpha"]:
        for p in cfg["p"]:
            prev = math.inf
            for d in sorted(cfg["deltas"], reverse=True):
                prof = sharpness_profile(a, p, d, cfg["T"], cfg["width"], cfg["per_unit"])
                lhs, rhs = hardy_sides(prof, a, p)
                m = hardy_margin(prof, a, p)
                ratio = m / rhs
                ok = m >= -TOL_QUAD * rhs and ratio <= prev + TOL_QUAD
                prev = ratio
                rows.append({"alpha": a, "p": p, "delta": d, "lhs": lhs, "rhs": rhs, "margin": m,
                             "margin_over_rhs": ratio, "ok": ok})
                if not ok:
                    status = EXIT_FAIL
    head = header("hardy", cfg, {"tol_quad": TOL_QUAD}, [{"T": cfg["T"]}])
    cols = ["alpha", "p", "delta", "lhs", "rhs", "margin", "margin_over_rhs", "ok"]
    return render_csv(head, cols, rows), status


def cmd_geometry(cfg: dict) -> tuple[str, int]:
    rows, status = [], EXIT_OK
    for b in cfg["betas"]:
        rows.append({"kind": "cone", "id": f"beta={b!r}", "t": "", "eccentricity": cone_eccentricity(b),
                     "inradius": "", "margin": "", "ok": True})
    rng = np.random.default_rng(cfg["seed"])
    for i in range(cfg["n_polygons"]):
        poly: ConvexPolygon = random_convex_polygon(rng, cfg["n_vertices"])
        ecc = eccentricity(poly)
        r, _ = inradius_incenter(poly)
        for t in cfg["t"]:
            rep = scaled_distance_check(poly, t)
            rows.append({"kind": "polygon", "id": i, "t": t, "eccentricity": ecc, "inradius": r,
                         "margin": rep.margin, "ok": rep.ok})
            if not rep.ok:
                status = EXIT_FAIL
    head = header("geometry", cfg, {"tol_geom": TOL_GEOM}, [])
    cols = ["kind", "id", "t", "eccentricity", "inradius", "margin", "ok"]
    return render_csv(head, cols, rows), status


def cmd_slimits(cfg: dict) -> tuple[str, int]:
    """Trend table only: ``s [u]^p`` and ``(1-s) [u]^p`` next to their limit values."""
    dom = domain_from_dict(cfg["domain"])
    u = make_function(dom, cfg["function"], cfg["seed"])
    p = cfg["p"]
    mc = MathConstants(dom.dim, p)
    beta_term = mc.beta * lp_norm(u, p) ** p
    alpha_term = mc.alpha * grad_seminorm(u, p) ** p
    rows = []
    for s in cfg["s"]:
        e = gagliardo_energy(u, s, p, exterior=True)
        rows.append({"s": s, "p": p, "seminorm_p": e, "s_weighted": s * e, "one_minus_s_weighted": (1 - s) * e,
                     "beta_lp": beta_term, "alpha_grad": alpha_term})
    head = header("slimits", cfg, {}, [dom.describe()])
    cols = ["s", "p", "seminorm_p", "s_weighted", "one_minus_s_weighted", "beta_lp", "alpha_grad"]
    return render_csv(head, cols, rows), EXIT_OK


COMMANDS = {"constants": cmd_constants, "counterexample": cmd_counterexample, "kprofile": cmd_kprofile,
            "capacity": cmd_capacity, "hardy": cmd_hardy, "geometry": cmd_geometry, "slimits": cmd_slimits}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fraclab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fraclab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").split("\n")[0] or None)
        sp.add_argument("--config", metavar="PATH", help="JSON config (defaults are used for missing keys)")
        sp.add_argument("--out", metavar="PATH", help="output file (stdout if omitted)")
        sp.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads for pair sums")
        sp.add_argument("--seed", type=int, metavar="U64", help="random seed (required here or in the config)")
    return ap


def run(command: str, config_path: str | None = None, seed: int | None = None,
        threads: int = 1) -> tuple[str, int]:
    """Validate the config, run ``command`` and return ``(text, exit status)``."""
    cfg = load_config(command, config_path, seed)
    set_threads(threads)
    try:
        return COMMANDS[command](cfg)
    finally:
        set_threads(1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        text, status = run(args.command, args.config, args.seed, args.threads)
    except (ConfigurationError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
