"""Run configuration files (TOML) with a versioned, checked schema."""
from __future__ import annotations

import copy
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key."""


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _str(v):
    return isinstance(v, str)


def _bool(v):
    return isinstance(v, bool)


def _nums(v):
    return isinstance(v, list) and all(_num(a) for a in v)


def _num_or_nums(v):
    return _num(v) or _nums(v)


def _int_or_ints(v):
    return _int(v) or (isinstance(v, list) and all(_int(a) for a in v))


def _strs(v):
    return _str(v) or (isinstance(v, list) and all(_str(a) or (isinstance(a, list) and all(_str(b) for b in a)) for a in v))


def _domain(v):
    return _str(v) or isinstance(v, dict)


def _lam(v):
    return _num(v) or v == "auto"


def _widths(v):
    return isinstance(v, list) and (
        (len(v) == 2 and all(_int(a) for a in v))
        or all(isinstance(a, list) and len(a) == 2 and all(_int(b) for b in a) for a in v))


def _points(v):
    return isinstance(v, list) and all(isinstance(a, dict) for a in v)


# key -> (check, description)
_PROBLEM = {
    "family": (_str, "string"), "d": (_int, "integer"), "m": (_int, "integer"),
    "T": (_num, "number"), "drift": (_strs, "expression list"), "diffusion": (_strs, "expression list"),
    "f": (_str, "expression"), "g": (_str, "expression"), "L": (_num, "number"),
    "domain": (_domain, "'full-space' or a table"), "theta": (_num, "number"),
    "scale": (_num, "number"), "sigma": (_num, "number"), "rate": (_num, "number"), "r": (_num, "number"),
    "vol": (_num, "number"), "radius": (_num, "number"), "coef_lipschitz": (_num, "number"),
    "name": (_str, "string"),
}

SCHEMA = {
    "problem": _PROBLEM,
    "lyapunov": {
        "p": (_num, "number"), "c": (_num, "number"), "expression": (_str, "expression"),
        "rho": (_num, "number"),
    },
    "solver": {
        "seed": (_int, "integer"), "n_paths": (_int, "integer"), "M": (_int, "integer"),
        "quadrature": (_str, "'left' or 'trapezoid'"), "lambda": (_lam, "number or 'auto'"),
        "tol": (_num, "number"), "max_iter": (_int, "integer"), "K": (_int, "integer"),
        "knots": (_int_or_ints, "integer or list"), "lo": (_num_or_nums, "number or list"),
        "hi": (_num_or_nums, "number or list"), "residual": (_bool, "boolean"),
        "residual_paths": (_int, "integer"), "threads": (_int, "integer"),
        "backend": (_str, "'auto', 'cython' or 'python'"),
    },
    "estimate": {
        "t": (_num, "number"), "x": (_num_or_nums, "number or list"), "depth": (_int, "integer"),
        "widths": (_widths, "[N_g, N_f] or a list of pairs"), "M": (_int, "integer"),
        "time_nodes": (_str, "'gauss' or 'uniform'"), "max_work": (_int, "integer"),
    },
    "check": {
        "n_points": (_int, "integer"), "n": (_int, "integer"), "M": (_int, "integer"),
        "kappa": (_num, "number"), "points": (_points, "list of {t, x, s} tables"),
        "probes": (_points, "list of {t, x} tables"),
    },
    "contraction": {
        "lambdas": (_nums, "list of numbers"), "n_paths": (_int, "integer"),
    },
    "couple": {
        "other": (lambda v: isinstance(v, dict), "table of problem keys"),
        "radius": (_num, "number"), "t0": (_num, "number"), "x0": (_num_or_nums, "number or list"),
        "M": (_int, "integer"), "n": (_int, "integer"), "freeze_x0": (_num_or_nums, "number or list"),
    },
    "output": {
        "dir": (_str, "path"), "csv": (_str, "file name"), "json": (_str, "file name"),
        "verbosity": (_int, "integer"), "paths_csv": (_str, "file name"),
    },
}

DEFAULTS = {
    "solver": {"n_paths": 10000, "M": 50, "quadrature": "left", "lambda": "auto", "tol": 1e-3,
               "max_iter": 30, "K": 10, "knots": 41, "residual": True},
    "estimate": {"t": 0.0, "depth": 1, "widths": [1000, 2], "M": 50, "time_nodes": "gauss",
                 "max_work": 10**9},
    "check": {"n_points": 10000, "n": 100000, "M": 100},
    "contraction": {},
    "couple": {"radius": 2.0, "t0": 0.0, "M": 1000, "n": 1000},
    "output": {"dir": ".", "csv": "solution.csv", "json": "report.json", "verbosity": 1},
}


def loads(text: str) -> dict:
    """Parse and validate configuration text."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"syntax: {exc}") from exc
    return validate(raw)


def load(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config: {path} is not UTF-8") from exc
    return loads(text)


def validate(raw: dict) -> dict:
    """Check keys and types; return a copy with defaults filled in."""
    cfg = copy.deepcopy(raw)
    if "schema_version" not in cfg:
        raise ConfigError("schema_version: missing (expected 1)")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported value {cfg['schema_version']!r} (expected 1)")
    for sec, body in cfg.items():
        if sec == "schema_version":
            continue
        if sec not in SCHEMA:
            raise ConfigError(f"{sec}: unknown section")
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: expected a table")
        _check_table(sec, body, SCHEMA[sec])
    if "problem" not in cfg:
        raise ConfigError("problem: missing section")
    other = cfg.get("couple", {}).get("other")
    if other is not None:
        _check_table("couple.other", other, _PROBLEM)
    for sec, defaults in DEFAULTS.items():
        body = cfg.setdefault(sec, {})
        for k, v in defaults.items():
            body.setdefault(k, copy.deepcopy(v))
    return cfg


def _check_table(name, body, schema):
    for key, val in body.items():
        if key not in schema:
            raise ConfigError(f"{name}.{key}: unknown key")
        check, what = schema[key]
        if not check(val):
            raise ConfigError(f"{name}.{key}: expected {what}, got {val!r}")


def require(cfg: dict, section: str, key: str):
    """Value of a mandatory key, or a :class:`ConfigError` naming it."""
    body = cfg.get(section) or {}
    if key not in body:
        raise ConfigError(f"{section}.{key}: missing")
    return body[key]
