"""Problem instances: dynamics, nonlinearity, terminal condition and domain."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional

import numpy as np

from . import expr, rng
from .expr import Node, ProgramSet, evaluate, parse

FAMILIES = ("brownian", "ou", "gbm", "double-well", "ou-truncated")


class ProblemError(ValueError):
    """Invalid or inconsistent problem definition."""


@dataclass(frozen=True)
class Domain:
    """State space: all of R^d or an open axis-aligned box."""

    kind: str = "full-space"
    lo: tuple = ()
    hi: tuple = ()

    def __post_init__(self):
        if self.kind not in ("full-space", "axis-box"):
            raise ProblemError(f"unknown domain kind {self.kind!r}")
        object.__setattr__(self, "lo", tuple(float(a) for a in self.lo))
        object.__setattr__(self, "hi", tuple(float(b) for b in self.hi))
        if self.kind == "full-space":
            if self.lo or self.hi:
                raise ProblemError("a full-space domain takes no bounds")
        else:
            if len(self.lo) != len(self.hi) or not self.lo:
                raise ProblemError("axis-box needs lo and hi of equal, nonzero length")
            if any(not a < b for a, b in zip(self.lo, self.hi)):
                raise ProblemError("axis-box needs lo_i < hi_i for every coordinate")

    @classmethod
    def box(cls, lo, hi):
        return cls("axis-box", tuple(lo), tuple(hi))

    @property
    def is_box(self):
        return self.kind == "axis-box"

    def bounds(self):
        """``(lo, hi)`` arrays for a box, ``None`` for full space."""
        if not self.is_box:
            return None
        return np.array(self.lo), np.array(self.hi)

    def contains(self, x):
        """Membership of the open domain; vectorized over leading axes of ``x``."""
        x = np.asarray(x, dtype=float)
        if not self.is_box:
            return np.isfinite(x).all(axis=-1)
        return ((x > np.array(self.lo)) & (x < np.array(self.hi))).all(axis=-1)


@dataclass(frozen=True)
class TruncationSet:
    """``{x in O : |x| <= r and the open 1/r-ball around x lies in O}``."""

    r: float
    parent: Domain = field(default_factory=Domain)

    def __post_init__(self):
        if not self.r > 0:
            raise ProblemError("truncation radius must be positive")


def membership(ts: TruncationSet, x) -> bool:
    """Exact two-condition membership test for a truncation set."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if not float(np.sqrt(np.dot(x, x))) <= ts.r:
        return False
    dom = ts.parent
    if not dom.is_box:
        return True
    if len(dom.lo) != x.size:
        raise ProblemError("point and domain dimensions differ")
    # the open ball of radius 1/r fits in the open box iff every face is at
    # least 1/r away
    rad = 1.0 / ts.r
    return all(xi - a >= rad and b - xi >= rad for xi, a, b in zip(x, dom.lo, dom.hi))


@dataclass(frozen=True)
class ProblemSpec:
    """One stochastic fixed point problem.

    ``diffusion`` is a ``d x m`` tuple of tuples.  ``growth_c`` is the
    analytic constant ``c`` with ``max(<x, mu>, |sigma|_F^2) <= c (1 + |x|^2)``
    when the problem comes from a builtin family that has one.
    """

    d: int
    m: int
    T: float
    drift: tuple
    diffusion: tuple
    f: Node
    g: Node
    L: float
    domain: Domain = field(default_factory=Domain)
    name: str = "custom"
    growth_c: Optional[float] = None
    coef_lipschitz: Optional[float] = None

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ProblemError("d: d and m must be at least 1")
        if not self.T > 0:
            raise ProblemError("T: must be positive")
        if not self.L > 0:
            raise ProblemError("L: must be positive")
        if len(self.drift) != self.d:
            raise ProblemError(f"drift: needs {self.d} components, got {len(self.drift)}")
        if len(self.diffusion) != self.d or any(len(row) != self.m for row in self.diffusion):
            raise ProblemError(f"diffusion: must be {self.d} x {self.m}")
        if self.domain.is_box and len(self.domain.lo) != self.d:
            raise ProblemError("domain: box dimension differs from d")
        _check_roles(self)

    @property
    def time_dependent(self):
        """True if drift or diffusion reference ``t``."""
        nodes = list(self.drift) + [e for row in self.diffusion for e in row]
        return any(expr.depends_on(n, "t") for n in nodes)

    @property
    def f_uses_v(self):
        return expr.depends_on(self.f, "v")

    @property
    def f_is_zero(self):
        folded = expr.fold(self.f)
        return folded.kind == "const" and folded.value == 0.0

    @cached_property
    def programs(self):
        """Compiled ``(drift, diffusion, f, g)`` program sets."""
        diff = [e for row in self.diffusion for e in row]
        return (ProgramSet(self.drift), ProgramSet(diff), ProgramSet([self.f]), ProgramSet([self.g]))

    def mu(self, t, x):
        """Drift at points ``x`` of shape ``(k, d)``; returns ``(k, d)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([_bcast(evaluate(n, t, x), x) for n in self.drift], axis=-1)

    def sigma(self, t, x):
        """Diffusion matrices at points ``x``; returns ``(k, d, m)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rows = [np.stack([_bcast(evaluate(e, t, x), x) for e in row], axis=-1) for row in self.diffusion]
        return np.stack(rows, axis=-2)

    def describe(self):
        return {
            "name": self.name,
            "d": self.d,
            "m": self.m,
            "T": self.T,
            "L": self.L,
            "drift": [expr.pretty(n) for n in self.drift],
            "diffusion": [[expr.pretty(e) for e in row] for row in self.diffusion],
            "f": expr.pretty(self.f),
            "g": expr.pretty(self.g),
            "domain": {"kind": self.domain.kind, "lo": list(self.domain.lo), "hi": list(self.domain.hi)},
            "time_dependent": self.time_dependent,
        }


def _bcast(v, x):
    return np.broadcast_to(np.asarray(v, dtype=float), x.shape[:-1])


def _check_roles(p):
    allowed = {
        "drift": expr.allowed_variables("drift", p.d),
        "diffusion": expr.allowed_variables("diffusion", p.d),
        "nonlinearity": expr.allowed_variables("nonlinearity", p.d),
        "terminal": expr.allowed_variables("terminal", p.d),
    }
    groups = [("drift", n) for n in p.drift] + [("diffusion", e) for row in p.diffusion for e in row]
    groups += [("nonlinearity", p.f), ("terminal", p.g)]
    for role, node in groups:
        bad = {v for v in expr.variables(node) if v != "norm2"} - allowed[role]
        if bad:
            raise ProblemError(f"{role}: uses {sorted(bad)} which is not allowed")


# ------------------------------------------------------------------ families

def _num(v):
    return repr(float(v))


def _family(name, d, params):
    """Expression strings and analytic constants for a builtin family."""
    s = float(params.get("scale", params.get("sigma", 1.0)))
    xs = [f"x{i + 1}" for i in range(d)]
    eye = [[_num(s) if i == j else "0" for j in range(d)] for i in range(d)]
    if name == "brownian":
        return ["0"] * d, eye, s * s * d, 0.0
    if name == "ou":
        theta = float(params.get("theta", 1.0))
        drift = [f"-{x}" if theta == 1.0 else f"-{_num(theta)}*{x}" for x in xs]
        c = max(s * s * d, -theta if theta < 0 else 0.0)
        return drift, eye, c, abs(theta)
    if name == "gbm":
        r = float(params.get("rate", params.get("r", 0.05)))
        vol = float(params.get("vol", 0.2))
        drift = [f"{_num(r)}*{x}" for x in xs]
        diff = [[f"{_num(vol)}*{xs[i]}" if i == j else "0" for j in range(d)] for i in range(d)]
        c = max(r, vol * vol)
        return drift, diff, (c if c > 0 else None), abs(r) + abs(vol)
    if name == "double-well":
        drift = [f"{x}*(1-norm2)" for x in xs]
        return drift, eye, max(0.25, s * s * d), None
    if name == "ou-truncated":
        theta = float(params.get("theta", 1.0))
        radius = float(params.get("radius", 5.0))
        base = f"max(0, 1 - norm2/{_num(radius * radius)})"
        # explicit product: cheaper than pow in the compiled evaluator
        cut = f"({base}*{base}*{base})"
        drift = [f"-{_num(theta)}*{x}*{cut}" for x in xs]
        diff = [[f"{_num(s)}*{cut}" if i == j else "0" for j in range(d)] for i in range(d)]
        # |grad psi| <= 6 max_q q(1-q^2)^2 / radius and |psi I + x grad psi^T| <= 1.28
        grad = 96.0 / (25.0 * math.sqrt(5.0)) / radius
        lip = 1.28 * abs(theta) + abs(s) * math.sqrt(d) * grad
        c = max(s * s * d, -theta if theta < 0 else 0.0)
        return drift, diff, c, lip
    raise ProblemError(f"family: unknown family {name!r}; choose one of {', '.join(FAMILIES)}")


def family_expressions(name, d=1, **params):
    """Drift and diffusion strings of a builtin family (for documentation and tests)."""
    drift, diff, _, _ = _family(name, d, params)
    return drift, diff


def _as_matrix(diff, d, m):
    if isinstance(diff, str):
        diff = [diff]
    diff = list(diff)
    if diff and all(isinstance(r, str) for r in diff):
        if len(diff) != d * m:
            raise ProblemError(f"diffusion: needs {d}x{m} = {d * m} entries, got {len(diff)}")
        return [diff[i * m:(i + 1) * m] for i in range(d)]
    if len(diff) != d or any(len(r) != m for r in diff):
        raise ProblemError(f"diffusion: must be a {d}x{m} matrix")
    return [list(r) for r in diff]


def _parse(text, role, d, key):
    try:
        return parse(str(text), role, d)
    except expr.ExprError as exc:
        raise ProblemError(f"{key}: {exc}") from exc


def build(config: Mapping) -> ProblemSpec:
    """Validated :class:`ProblemSpec` from a problem configuration mapping.

    Keys: ``family`` (with its parameters) or ``drift``/``diffusion``
    expression lists; ``d``, ``m``, ``T``, ``f``, ``g``, ``L`` and optional
    ``domain`` (``{kind, lo, hi}``).
    """
    cfg = dict(config)
    if "L" not in cfg:
        raise ProblemError("L: missing (Lipschitz constant of f in v)")
    family = cfg.get("family")
    c = None
    coef_l = cfg.get("coef_lipschitz")
    if family is not None:
        d = int(cfg.get("d", 1))
        params = {k: v for k, v in cfg.items() if k not in ("family", "d", "m")}
        drift_s, diff_s, c, fam_l = _family(str(family), d, params)
        m = d
        if "m" in cfg and int(cfg["m"]) != d:
            raise ProblemError(f"m: family {family!r} has m = d = {d}")
        if coef_l is None:
            coef_l = fam_l
        if "drift" in cfg or "diffusion" in cfg:
            raise ProblemError("family: give either a family or drift/diffusion expressions, not both")
    else:
        for key in ("drift", "diffusion"):
            if key not in cfg:
                raise ProblemError(f"{key}: missing (or give a builtin family)")
        drift_s = cfg["drift"]
        if isinstance(drift_s, str):
            drift_s = [drift_s]
        d = int(cfg.get("d", len(drift_s)))
        if len(drift_s) != d:
            raise ProblemError(f"drift: {len(drift_s)} components but d = {d}")
        m = int(cfg.get("m", d))
        diff_s = _as_matrix(cfg["diffusion"], d, m)
    for key in ("f", "g"):
        if key not in cfg:
            raise ProblemError(f"{key}: missing")
    drift = tuple(_parse(s, "drift", d, f"drift[{i}]") for i, s in enumerate(drift_s))
    diffusion = tuple(
        tuple(_parse(s, "diffusion", d, f"diffusion[{i}][{j}]") for j, s in enumerate(row))
        for i, row in enumerate(diff_s)
    )
    dom_cfg = cfg.get("domain", "full-space")
    try:
        if isinstance(dom_cfg, str):
            domain = Domain(dom_cfg)
        else:
            dom_cfg = dict(dom_cfg)
            domain = Domain(dom_cfg.get("kind", "axis-box"), tuple(dom_cfg.get("lo", ())),
                            tuple(dom_cfg.get("hi", ())))
    except ProblemError as exc:
        raise ProblemError(f"domain: {exc}") from exc
    return ProblemSpec(
        d=d, m=m, T=float(cfg.get("T", 1.0)), drift=drift, diffusion=diffusion,
        f=_parse(cfg["f"], "nonlinearity", d, "f"), g=_parse(cfg["g"], "terminal", d, "g"),
        L=float(cfg["L"]), domain=domain, name=str(family or cfg.get("name", "custom")),
        growth_c=None if c is None else float(c),
        coef_lipschitz=None if coef_l is None else float(coef_l),
    )


# ------------------------------------------------------------------- audits

@dataclass(frozen=True)
class LipschitzReport:
    max_ratio: float
    declared: float
    violation: bool
    worst: dict
    n_samples: int


def audit_lipschitz(p: ProblemSpec, n_samples: int, seed: int) -> LipschitzReport:
    """Largest observed ``|f(t,x,v) - f(t,x,w)| / |v - w|`` over random samples.

    Samples mix far pairs (``v, w`` at scale 10) with close pairs (gap
    ``1e-3``) so both the global slope and the local derivative are probed.
    A violation is flagged when the maximum exceeds ``L`` by more than 1e-9
    relative.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    gen = np.random.default_rng(rng.stream_key(seed, 0xA0D1))
    t = gen.uniform(0.0, p.T, n_samples)
    scales = np.array([1.0, 4.0, 16.0])[gen.integers(0, 3, n_samples)]
    x = gen.standard_normal((n_samples, p.d)) * scales[:, None]
    if p.domain.is_box:
        lo, hi = p.domain.bounds()
        x = lo + (hi - lo) * gen.uniform(0.0, 1.0, (n_samples, p.d))
    v = gen.standard_normal(n_samples) * 10.0
    close = gen.uniform(size=n_samples) < 0.5
    w = np.where(close, v + 1e-3 * np.sign(gen.standard_normal(n_samples) + 1e-300), gen.standard_normal(n_samples) * 10.0)
    same = v == w
    w = np.where(same, v + 1.0, w)
    fv = np.empty(n_samples)
    fw = np.empty(n_samples)
    for i in range(n_samples):
        try:
            fv[i] = evaluate(p.f, t[i], x[i], v[i])
            fw[i] = evaluate(p.f, t[i], x[i], w[i])
        except expr.EvalDomainError as exc:
            raise expr.EvalDomainError(
                str(exc), where=f"sample t={t[i]!r}, x={x[i].tolist()}, v={v[i]!r}, w={w[i]!r}"
            ) from exc
    ratio = np.abs(fv - fw) / np.abs(v - w)
    k = int(np.argmax(ratio))
    mx = float(ratio[k])
    return LipschitzReport(
        max_ratio=mx, declared=p.L, violation=mx > p.L * (1.0 + 1e-9),
        worst={"t": float(t[k]), "x": x[k].tolist(), "v": float(v[k]), "w": float(w[k])},
        n_samples=n_samples,
    )


def coefficient_lipschitz(p: ProblemSpec, n_pairs: int, seed: int, radius: float = 8.0) -> float:
    """Empirical ``sup (|mu(x)-mu(y)| + |sigma(x)-sigma(y)|_F) / |x-y|``.

    Pairs are drawn uniformly in the ball of the given radius, half of them
    at distance at most 1e-2 so that local slopes are resolved.
    """
    gen = np.random.default_rng(rng.stream_key(seed, 0xC0EF))
    t = gen.uniform(0.0, p.T, n_pairs)
    x = gen.uniform(-radius, radius, (n_pairs, p.d))
    step = np.where(gen.uniform(size=n_pairs) < 0.5, 1e-2, 2.0 * radius)
    y = x + gen.uniform(-1.0, 1.0, (n_pairs, p.d)) * step[:, None]
    best = 0.0
    for tt in np.unique(np.round(t, 6))[:64]:
        idx = slice(None)
        mu_x, mu_y = p.mu(tt, x[idx]), p.mu(tt, y[idx])
        s_x, s_y = p.sigma(tt, x[idx]), p.sigma(tt, y[idx])
        num = np.linalg.norm(mu_x - mu_y, axis=-1) + np.sqrt(((s_x - s_y) ** 2).sum(axis=(-1, -2)))
        den = np.linalg.norm(x - y, axis=-1)
        ok = den > 0
        if ok.any():
            best = max(best, float(np.max(num[ok] / den[ok])))
        if not p.time_dependent:
            break
    return best


def growth_constant(p: ProblemSpec, n_samples: int, seed: int, scales=(1.0, 4.0, 16.0)) -> float:
    """Sampled ``max(<x, mu>, |sigma|_F^2) / (1 + |x|^2)`` (coercivity audit)."""
    gen = np.random.default_rng(rng.stream_key(seed, 0xC0C0))
    best = -math.inf
    for s in scales:
        x = gen.standard_normal((n_samples, p.d)) * s
        t = float(gen.uniform(0.0, p.T))
        mu = p.mu(t, x)
        sig = p.sigma(t, x)
        den = 1.0 + (x * x).sum(axis=1)
        val = np.maximum((x * mu).sum(axis=1), (sig * sig).sum(axis=(1, 2))) / den
        best = max(best, float(val.max()))
    return best
