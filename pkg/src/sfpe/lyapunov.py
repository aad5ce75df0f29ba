"""Lyapunov functions: construction, generator evaluation and checks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import expr, rng
from .expr import EPS_CBRT, Node, evaluate, parse
from .problem import ProblemSpec
from .sde import BrownianDriver, simulate

SCALES = (1.0, 4.0, 16.0)


class LyapunovError(ValueError):
    """V is not positive at an evaluated point."""


@dataclass(frozen=True)
class LyapunovSpec:
    """A positive weight ``V(t, x)``.

    For ``form == "elliptic"`` the expression depends on ``x`` only and the
    space-time function is ``exp(-rho t) V(x)``.  ``p`` is set for the
    polynomial family ``(1 + |x|^2)^(p/2)``, whose derivatives are analytic.
    """

    V: Node
    form: str = "elliptic"
    rho: float = 0.0
    p: Optional[float] = None
    c: Optional[float] = None

    def __post_init__(self):
        if self.form not in ("elliptic", "space-time"):
            raise ValueError(f"unknown Lyapunov form {self.form!r}")
        if self.form == "space-time" and self.rho != 0.0:
            raise ValueError("rho only applies to elliptic-form functions")
        if self.form == "elliptic" and expr.depends_on(self.V, "t"):
            raise ValueError("an elliptic-form V must not depend on t")

    @property
    def analytic(self):
        return self.p is not None

    def _check(self, vals, x):
        vals = np.asarray(vals, dtype=float)
        bad = ~(vals > 0)
        if np.any(bad):
            xs = np.asarray(x, dtype=float).reshape(-1, np.shape(x)[-1])
            i = int(np.argmax(bad.reshape(-1)))
            raise LyapunovError(f"V is not positive at x={xs[i].tolist()} (value {float(vals.reshape(-1)[i])!r})")
        return vals

    def spatial(self, x, t=None):
        """``V(x)`` (elliptic) or ``V(t, x)`` (space-time) without the tilt."""
        x = np.asarray(x, dtype=float)
        if self.p is not None:
            vals = (1.0 + (x * x).sum(axis=-1)) ** (0.5 * self.p)
        else:
            vals = evaluate(self.V, t, x)
        return self._check(vals, x)

    def value(self, t, x):
        """Effective space-time value; vectorized over points ``x`` of shape ``(..., d)``."""
        vals = self.spatial(x, t)
        if self.form == "elliptic":
            return np.exp(-self.rho * np.asarray(t, dtype=float)) * vals
        return vals

    def grad(self, x, t=None):
        """Spatial gradient of the untilted function, shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        if self.p is not None:
            q = 1.0 + (x * x).sum(axis=-1, keepdims=True)
            return self.p * q ** (0.5 * self.p) * x / q
        return expr.grad_fd(self.V, t, x)

    def hess(self, x, t=None):
        """Spatial Hessian of the untilted function, shape ``(..., d, d)``."""
        x = np.asarray(x, dtype=float)
        if self.p is not None:
            q = 1.0 + (x * x).sum(axis=-1)
            v = q ** (0.5 * self.p)
            outer = x[..., :, None] * x[..., None, :]
            eye = np.eye(x.shape[-1])
            return (self.p * v)[..., None, None] * (
                (self.p - 2.0) * outer / (q * q)[..., None, None] + eye / q[..., None, None])
        return expr.hess_fd(self.V, t, x)

    def dt(self, t, x):
        """Time derivative of the untilted space-time function (0 for elliptic)."""
        if self.form == "elliptic":
            return np.zeros(np.shape(x)[:-1])
        t = np.asarray(t, dtype=float)
        h = np.maximum(1.0, np.abs(t)) * EPS_CBRT
        return (evaluate(self.V, t + h, x) - evaluate(self.V, t - h, x)) / (2.0 * h)


def polynomial_lyapunov(p: float, c: float, d: int = 1) -> LyapunovSpec:
    """``V(x) = (1 + |x|^2)^(p/2)`` with ``rho = (p c / 2) max(p + 1, 3)``."""
    if not (p > 0 and c > 0):
        raise ValueError("polynomial Lyapunov function needs p > 0 and c > 0")
    node = parse(f"(1 + norm2)^({float(p)!r}/2)", "lyapunov-elliptic", d)
    rho = 0.5 * p * c * max(p + 1.0, 3.0)
    return LyapunovSpec(node, "elliptic", rho, float(p), float(c))


def from_expression(text: str, d: int, rho: Optional[float] = None) -> LyapunovSpec:
    """User-supplied V: elliptic form when ``rho`` is given, space-time otherwise."""
    if rho is None:
        return LyapunovSpec(parse(text, "lyapunov", d), "space-time")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return LyapunovSpec(parse(text, "lyapunov-elliptic", d), "elliptic", float(rho))


def _tr_term(p, t, x, H):
    sig = p.sigma(t, x)
    a = np.einsum("kim,kjm->kij", sig, sig)
    return 0.5 * np.einsum("kij,kij->k", a, H)


def elliptic_generator(p: ProblemSpec, V: LyapunovSpec, t, x):
    """``1/2 Tr(sigma sigma^T Hess V) + <mu, grad V>`` of the untilted function."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    V.spatial(x, t)
    return _tr_term(p, t, x, V.hess(x, t)) + (p.mu(t, x) * V.grad(x, t)).sum(axis=-1)


def generator_value(p: ProblemSpec, V: LyapunovSpec, t, x):
    """Left-hand side of the generator inequality at ``(t, x)``.

    Elliptic form: ``exp(-rho t) (-rho V + 1/2 Tr(sigma sigma^T Hess V) +
    <mu, grad V>)``.  Space-time form: ``dV/dt + 1/2 Tr(...) + <mu, grad V>``
    with finite-difference derivatives.  Accepts a single point ``(d,)`` or
    a batch ``(k, d)`` (then ``t`` may be an array of length ``k``).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    t = np.asarray(t, dtype=float)
    if t.ndim and t.shape != xs.shape[:1]:
        raise ValueError("t must be a scalar or have one entry per point")
    ell = elliptic_generator(p, V, t, xs)
    if V.form == "elliptic":
        out = np.exp(-V.rho * t) * (ell - V.rho * V.spatial(xs))
    else:
        out = V.dt(t, xs) + ell
    return float(out[0]) if single else out


@dataclass(frozen=True)
class GeneratorReport:
    max_value: float
    max_point: tuple
    violation: bool
    worst_point: Optional[tuple]
    worst_excess: float
    n_points: int


def sample_points(p: ProblemSpec, n_points: int, seed: int, scales=SCALES):
    """Times uniform on ``[0, T]`` and points from centered Gaussians at ``scales``.

    Points are assigned to scales round-robin; for a box domain they are
    drawn uniformly inside the box instead.
    """
    gen = np.random.default_rng(rng.stream_key(seed, 0x1A9))
    t = gen.uniform(0.0, p.T, n_points)
    if p.domain.is_box:
        lo, hi = p.domain.bounds()
        x = lo + (hi - lo) * gen.uniform(1e-9, 1.0, (n_points, p.d))
    else:
        s = np.asarray(scales, dtype=float)[np.arange(n_points) % len(scales)]
        x = gen.standard_normal((n_points, p.d)) * s[:, None]
    return t, x


def check_generator(p: ProblemSpec, V: LyapunovSpec, n_points: int, seed: int, probes=(),
                    rel_tol: float = 1e-7) -> GeneratorReport:
    """Sample the generator and flag points where it exceeds ``rel_tol (1 + |V|)``.

    ``probes`` are extra ``(t, x)`` pairs checked in addition to the sample.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    t, x = sample_points(p, n_points, seed)
    if len(probes):
        pt = np.array([float(a) for a, _ in probes])
        px = np.array([np.asarray(b, dtype=float).reshape(p.d) for _, b in probes])
        t, x = np.concatenate([t, pt]), np.concatenate([x, px])
    g = generator_value(p, V, t, x)
    vals = V.value(t, x)
    excess = g - rel_tol * (1.0 + np.abs(vals))
    k = int(np.argmax(g))
    w = int(np.argmax(excess))
    bad = bool(excess[w] > 0)
    return GeneratorReport(
        max_value=float(g[k]), max_point=(float(t[k]), x[k].tolist()), violation=bad,
        worst_point=(float(t[w]), x[w].tolist()) if bad else None,
        worst_excess=float(excess[w]), n_points=int(t.size),
    )


@dataclass(frozen=True)
class SupermartingaleReport:
    mean: float
    se: float
    v0: float
    allowance: float
    passed: bool
    exploded: int
    n: int
    M: int

    @property
    def margin(self):
        """Threshold minus sample mean; negative on failure."""
        return self.v0 + 3.0 * self.se + self.allowance - self.mean


def supermartingale_test(p: ProblemSpec, V: LyapunovSpec, t, x, s, M, n, drv: BrownianDriver,
                         kappa=None, threads=None, backend=None) -> SupermartingaleReport:
    """Monte-Carlo check of ``E[V(s, X_s)] <= V(t, x)``.

    Passes iff the sample mean is at most ``V(t,x) + 3 SE + kappa dt`` with
    ``kappa`` defaulting to ``V(t, x)``.  Any escaped path fails the test.
    """
    if not 0.0 <= t <= s <= p.T:
        raise ValueError("need 0 <= t <= s <= T")
    x = np.asarray(x, dtype=float).reshape(p.d)
    v0 = float(V.value(t, x[None])[0])
    kappa = v0 if kappa is None else float(kappa)
    dt = (s - t) / M
    if s == t:
        return SupermartingaleReport(v0, 0.0, v0, 0.0, True, 0, n, M)
    b = simulate(p, t, x, M, n, drv, record=False, threads=threads, backend=backend, until=s)
    vals = V.value(s, b.final)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    exploded = int(b.escaped.sum())
    allowance = kappa * dt
    ok = exploded == 0 and mean <= v0 + 3.0 * se + allowance
    return SupermartingaleReport(mean, se, v0, allowance, ok, exploded, n, M)
