"""Command line interface: ``sfpe <subcommand> --config run.toml``.

Exit codes: 0 success, 1 error, 2 iteration limit reached without
convergence, 3 a check failed.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys

import numpy as np

from . import __version__, _backend
from .config import ConfigError, load, require
from .expr import ExprError, EvalDomainError
from .grid import GridSpec
from .lyapunov import LyapunovError, check_generator, from_expression, polynomial_lyapunov, supermartingale_test
from .problem import ProblemError, build
from .sde import BrownianDriver, PathExplosion, coupling_locality, freeze_at_rest, simulate
from .solver import (McConfig, SolverDivergence, WorkCapExceeded, contraction_sweep, default_grid,
                     nested_estimate, picard_solve)

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER, EXIT_CHECK_FAILED = 0, 1, 2, 3

log = logging.getLogger("sfpe")

_EXPECTED = (ConfigError, ProblemError, ExprError, EvalDomainError, LyapunovError, PathExplosion,
             SolverDivergence, WorkCapExceeded, ValueError, ZeroDivisionError, FloatingPointError, OSError,
             ImportError)


# ------------------------------------------------------------------ helpers

def _seed(cfg, args):
    if args.seed is not None:
        return args.seed
    return require(cfg, "solver", "seed")


def _threads(cfg, args):
    if args.threads is not None:
        return _backend.resolve_threads(args.threads)
    if "threads" in cfg["solver"]:
        return _backend.resolve_threads(cfg["solver"]["threads"])
    return _backend.resolve_threads(None)


def _problem(cfg, section="problem", body=None):
    try:
        return build(cfg[section] if body is None else body)
    except ProblemError as exc:
        raise ConfigError(f"{section}.{exc}") from exc


def _lyapunov(cfg, p):
    sec = cfg.get("lyapunov") or {}
    if "expression" in sec:
        return from_expression(sec["expression"], p.d, sec.get("rho"))
    if "rho" in sec:
        raise ConfigError("lyapunov.rho: only valid together with lyapunov.expression")
    c = sec.get("c", p.growth_c)
    if c is None:
        raise ConfigError("lyapunov.c: missing (the problem has no builtin growth constant)")
    return polynomial_lyapunov(float(sec.get("p", 2.0)), float(c), p.d)


def _vec(v, d, key):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.size == 1 and d > 1:
        a = np.full(d, float(a[0]))
    if a.size != d:
        raise ConfigError(f"{key}: expected {d} values")
    return a


def _grid(cfg, p):
    sec = cfg["solver"]
    base = default_grid(p, int(sec["K"]), 41)
    lo = _vec(sec["lo"], p.d, "solver.lo") if "lo" in sec else np.array(base.lo)
    hi = _vec(sec["hi"], p.d, "solver.hi") if "hi" in sec else np.array(base.hi)
    knots = sec["knots"]
    n = tuple([int(knots)] * p.d) if isinstance(knots, int) else tuple(int(k) for k in knots)
    if len(n) != p.d:
        raise ConfigError(f"solver.knots: expected {p.d} values")
    return GridSpec(p.T, int(sec["K"]), tuple(lo), tuple(hi), n)


def _mc(cfg, args, n_paths=None):
    sec = cfg["solver"]
    return McConfig(int(n_paths or sec["n_paths"]), int(sec["M"]), int(_seed(cfg, args)), sec["quadrature"])


def _out_dir(cfg, args):
    d = args.out or cfg["output"]["dir"]
    os.makedirs(d, exist_ok=True)
    return d


def _meta(args, command):
    return {
        "command": command,
        "version": __version__,
        "config": os.path.basename(args.config) if args.config else None,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def write_report(path, meta, body):
    """JSON object whose first line carries ``meta`` (the only volatile part)."""
    with open(path, "w") as fh:
        fh.write('{"meta": ' + json.dumps(meta, sort_keys=True) + ",\n")
        fh.write('"report": ' + json.dumps(body, indent=1, sort_keys=True) + "}\n")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_solve(cfg, args):
    p = _problem(cfg)
    V = _lyapunov(cfg, p)
    sec = cfg["solver"]
    grid = _grid(cfg, p)
    rep = picard_solve(p, V, grid, _mc(cfg, args), sec["lambda"], float(sec["tol"]), int(sec["max_iter"]),
                       residual=bool(sec["residual"]), residual_paths=sec.get("residual_paths"),
                       threads=_threads(cfg, args), backend=sec.get("backend"),
                       callback=lambda r: log.info("iteration %d delta %.6g", r.iteration, r.delta))
    out = _out_dir(cfg, args)
    rep.u.to_csv(os.path.join(out, cfg["output"]["csv"]))
    body = rep.to_dict(timing=False)
    body["problem"] = p.describe()
    write_report(os.path.join(out, cfg["output"]["json"]), dict(_meta(args, "solve"), wall=rep.wall), body)
    _emit({"converged": rep.converged, "iterations": len(rep.iterations),
           "delta": rep.deltas[-1], "residual": rep.residual, "out": out})
    return EXIT_OK if rep.converged else EXIT_MAX_ITER


def _parse_widths(text):
    pairs = [tuple(int(a) for a in part.split(",")) for part in text.split(";") if part.strip()]
    if not pairs or any(len(q) != 2 for q in pairs):
        raise ConfigError("--widths: expected 'N_g,N_f' or 'N_g,N_f;N_g,N_f;...'")
    return pairs[0] if len(pairs) == 1 else pairs


def cmd_estimate(cfg, args):
    p = _problem(cfg)
    sec = cfg["estimate"]
    t = float(args.t if args.t is not None else sec["t"])
    if args.x is not None:
        x = _vec([float(a) for a in args.x.split(",")], p.d, "--x")
    else:
        x = _vec(sec.get("x", 0.0), p.d, "estimate.x")
    depth = int(args.depth if args.depth is not None else sec["depth"])
    widths = _parse_widths(args.widths) if args.widths else sec["widths"]
    if widths and isinstance(widths[0], list):
        widths = [tuple(w) for w in widths]
    res = nested_estimate(p, t, x, depth, widths, int(_seed(cfg, args)), M=int(sec["M"]),
                          time_nodes=sec["time_nodes"], max_work=int(sec["max_work"]),
                          backend=cfg["solver"].get("backend"))
    _emit({"estimate": res.estimate, "work": res.work, "widths": [list(w) for w in res.widths],
           "iterate": res.iterate, "t": t, "x": x.tolist()})
    return EXIT_OK


def cmd_check_lyapunov(cfg, args):
    p = _problem(cfg)
    V = _lyapunov(cfg, p)
    sec = cfg["check"]
    seed = int(_seed(cfg, args))
    probes = [(float(q["t"]), _vec(q["x"], p.d, "check.probes.x")) for q in sec.get("probes", [])]
    gen = check_generator(p, V, int(sec["n_points"]), seed, probes)
    points = sec.get("points") or [{"t": 0.0, "x": 0.0, "s": p.T}]
    sm = []
    ok = not gen.violation
    for i, q in enumerate(points):
        for key in ("t", "x", "s"):
            if key not in q:
                raise ConfigError(f"check.points[{i}].{key}: missing")
        r = supermartingale_test(p, V, float(q["t"]), _vec(q["x"], p.d, f"check.points[{i}].x"), float(q["s"]),
                                 int(sec["M"]), int(sec["n"]), BrownianDriver(seed, i), kappa=sec.get("kappa"),
                                 threads=_threads(cfg, args), backend=cfg["solver"].get("backend"))
        ok = ok and r.passed
        sm.append({"t": q["t"], "x": q["x"], "s": q["s"], "mean": r.mean, "se": r.se, "V0": r.v0,
                   "allowance": r.allowance, "margin": r.margin, "passed": r.passed, "exploded": r.exploded})
    _emit({"passed": ok, "rho": V.rho, "generator": {
        "max_value": gen.max_value, "max_point": gen.max_point, "violation": gen.violation,
        "worst_point": gen.worst_point, "n_points": gen.n_points}, "supermartingale": sm})
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_verify_contraction(cfg, args):
    p = _problem(cfg)
    V = _lyapunov(cfg, p)
    if args.lambda_sweep:
        lams = [float(a) for a in args.lambda_sweep.split(",")]
    else:
        lams = cfg["contraction"].get("lambdas") or [2.0 * p.L, 4.0 * p.L, 20.0 * p.L]
    mc = _mc(cfg, args, cfg["contraction"].get("n_paths"))
    rows = contraction_sweep(p, V, lams, mc, _grid(cfg, p), threads=_threads(cfg, args),
                             backend=cfg["solver"].get("backend"))
    lines = ["lambda,measured,bound"]
    ok = True
    for lam, ratio, se in rows:
        bound = p.L / lam
        ok = ok and ratio <= bound + 5.0 * se
        lines.append(f"{lam:.17g},{ratio:.17g},{bound:.17g}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(os.path.join(_out_dir(cfg, args), "contraction.csv"), "w") as fh:
            fh.write(text)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_couple_test(cfg, args):
    p1 = _problem(cfg)
    sec = cfg["couple"]
    p2 = _problem(cfg, "couple.other", {**cfg["problem"], **sec["other"]}) if sec.get("other") else p1
    seed = int(_seed(cfg, args))
    x0 = _vec(sec.get("x0", 0.0), p1.d, "couple.x0")
    M, n, t0 = int(sec["M"]), int(sec["n"]), float(sec["t0"])
    threads, backend = _threads(cfg, args), cfg["solver"].get("backend")
    rep = coupling_locality(p1, p2, float(sec["radius"]), t0, x0, M, n, BrownianDriver(seed), threads, backend)
    out = {"coupling": {"exact": rep.exact, "max_diff_inside": rep.max_diff_inside,
                        "first_divergence": None if rep.first_divergence is None else
                        {"path": rep.first_divergence[0], "step": rep.first_divergence[1]},
                        "paths_left_region": rep.paths_left_region, "n": n, "M": M}}
    ok = rep.exact
    if "freeze_x0" in sec:
        fz = freeze_at_rest(p1, t0, _vec(sec["freeze_x0"], p1.d, "couple.freeze_x0"), M, n,
                            BrownianDriver(seed, 1), threads, backend)
        out["freeze"] = {"exact": fz.exact, "max_deviation": fz.max_deviation, "moved_paths": fz.moved_paths}
        ok = ok and fz.exact
    if args.dump_paths:
        b = simulate(p1, t0, x0, M, min(n, 10), BrownianDriver(seed), record=True, threads=threads, backend=backend)
        b.to_csv(args.dump_paths)
    out["passed"] = ok
    _emit(out)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


COMMANDS = {
    "solve": cmd_solve,
    "estimate": cmd_estimate,
    "check-lyapunov": cmd_check_lyapunov,
    "verify-contraction": cmd_verify_contraction,
    "couple-test": cmd_couple_test,
}


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; argparse's default 2 would read as "max_iter reached"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _parser():
    ap = _Parser(prog="sfpe", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override solver.seed")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("--threads", type=int, help="worker threads (default $SFPE_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub.add_parser("solve", parents=[common], help="Picard iteration on a grid")
    est = sub.add_parser("estimate", parents=[common], help="pointwise nested estimate")
    est.add_argument("--t", type=float)
    est.add_argument("--x", help="comma separated coordinates")
    est.add_argument("--depth", type=int)
    est.add_argument("--widths", help="'N_g,N_f' for every level or 'N_g,N_f;N_g,N_f;...'")
    sub.add_parser("check-lyapunov", parents=[common], help="generator and supermartingale checks")
    vc = sub.add_parser("verify-contraction", parents=[common], help="measured contraction against L/lambda")
    vc.add_argument("--lambda-sweep", help="comma separated lambda values")
    ct = sub.add_parser("couple-test", parents=[common], help="exact freeze and coupling checks")
    ct.add_argument("--dump-paths", metavar="CSV", help="write up to 10 simulated paths for inspection")
    sub.add_parser("version", help="print version and kernel backend")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "version":
        print(f"sfpe {__version__} (backend: {_backend.name_of(_backend.get())}; "
              f"available: {', '.join(_backend.available())})")
        return EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load(args.config)
        return COMMANDS[args.command](cfg, args)
    except _EXPECTED as exc:
        print(f"sfpe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
