"""Euler-Maruyama simulation with counter-based noise, coupling and freezing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _backend, rng
from .expr import ERR_MESSAGES, EvalDomainError
from .problem import ProblemSpec, coefficient_lipschitz

ESCAPE_GUARD = 1e12


class PathExplosion(RuntimeError):
    """A simulated path crossed the escape guard."""


@dataclass(frozen=True)
class BrownianDriver:
    """Seeded source of Brownian increments.

    The increment of path ``i`` at step ``k`` depends only on
    ``(seed, stream, i, k)``, so batches can be split, reordered or run on any
    number of threads without changing a single draw.  ``m``, ``M`` and
    ``dt`` are optional; when set, :func:`simulate` checks them against the
    request.
    """

    seed: int
    stream: int = 0
    m: int = 0
    M: int = 0
    dt: float = 0.0

    @property
    def key(self):
        return rng.stream_key(self.seed, self.stream)

    def substream(self, index):
        """Driver for an independent child stream."""
        return BrownianDriver(self.seed, rng.child_stream(self.stream, index), self.m, self.M, self.dt)

    def increments(self, paths, steps, m=None, dt=None):
        """Brownian increments, shape ``(len(paths), len(steps), m)``."""
        m = int(m or self.m)
        dt = float(dt or self.dt)
        if m < 1 or not dt > 0:
            raise ValueError("increments need m >= 1 and dt > 0")
        steps = np.asarray(steps, dtype=np.int64).reshape(-1)
        idx = (steps[:, None] * m + np.arange(m)[None, :]).reshape(-1)
        z = rng.normals(self.key, paths, idx)
        return math.sqrt(dt) * z.reshape(len(z), steps.size, m)


@dataclass
class PathBatch:
    """Simulated trajectories on a uniform grid.

    Attributes
    ----------
    t : ndarray, shape (M+1,)
    states : ndarray, shape (n, M+1, d), or None when only endpoints were kept
    final : ndarray, shape (n, d)
    frozen : ndarray of int
        First grid index from which the path is held constant, -1 if never.
    exited, escaped : ndarray of bool
    """

    t: np.ndarray
    states: Optional[np.ndarray]
    final: np.ndarray
    frozen: np.ndarray
    exited: np.ndarray
    escaped: np.ndarray

    @property
    def n(self):
        return self.final.shape[0]

    @property
    def M(self):
        return self.t.size - 1

    def to_csv(self, path=None, max_paths=None):
        """Long-format dump ``path,step,t,x1..xd`` (needs recorded states)."""
        if self.states is None:
            raise ValueError("batch was simulated without recording states")
        n = self.n if max_paths is None else min(self.n, max_paths)
        d = self.final.shape[1]
        lines = ["path,step,t," + ",".join(f"x{i + 1}" for i in range(d))]
        for i in range(n):
            for k in range(self.M + 1):
                xs = ",".join("%.17g" % v for v in self.states[i, k])
                lines.append(f"{i},{k},{self.t[k]:.17g},{xs}")
        text = "\n".join(lines) + "\n"
        if path is None:
            return text
        with open(path, "w") as fh:
            fh.write(text)
        return None


def _box(p):
    b = p.domain.bounds()
    return None if b is None else (np.ascontiguousarray(b[0]), np.ascontiguousarray(b[1]))


def _raise_eval(err, what):
    code, path, step = err
    msg = ERR_MESSAGES.get(code, f"evaluation error {code}")
    raise EvalDomainError(f"{msg} in {what}", where=f"path {path}, step {step}")


def _run(p, t0, dt, M, x0, n, key, step_offset, record, threads, backend):
    kern = _backend.get(backend)
    drift, diff, _, _ = p.programs
    x0 = np.ascontiguousarray(np.asarray(x0, dtype=float).reshape(p.d))
    states, final, frozen, exited, escaped, err = kern.simulate_paths(
        drift, diff, p.d, p.m, float(t0), float(dt), int(M), int(n), key, 0, int(step_offset),
        x0, _box(p), ESCAPE_GUARD, bool(record), _backend.resolve_threads(threads))
    if err is not None:
        _raise_eval(err, "drift/diffusion")
    t = t0 + dt * np.arange(M + 1)
    return PathBatch(t, states, final, frozen, exited.astype(bool), escaped.astype(bool))


def _check_start(p, t0, x0):
    if not 0.0 <= t0 <= p.T:
        raise ValueError(f"start time {t0} outside [0, {p.T}]")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != p.d:
        raise ValueError(f"start point needs {p.d} coordinates")
    if not p.domain.contains(x0):
        raise ValueError(f"start point {x0.tolist()} is not in the domain")
    return x0


def _check_driver(drv, p, M, dt):
    if drv.m and drv.m != p.m:
        raise ValueError(f"driver has m={drv.m}, problem has m={p.m}")
    if drv.M and drv.M != M:
        raise ValueError(f"driver has M={drv.M}, request has M={M}")
    if drv.dt and not math.isclose(drv.dt, dt, rel_tol=1e-12):
        raise ValueError(f"driver has dt={drv.dt}, request has dt={dt}")


def simulate(p: ProblemSpec, t0: float, x0, M: int, n: int, drv: BrownianDriver,
             record: bool = True, threads=None, backend=None, until=None) -> PathBatch:
    """Euler-Maruyama paths from ``(t0, x0)`` to ``T`` with ``M`` uniform steps.

    ``until`` stops the grid at an earlier end time ``s`` (step ``(s-t0)/M``).

    A path is frozen the first time it leaves the domain (clipped onto the
    boundary, ``exited`` set) or a coordinate leaves ``[-1e12, 1e12]``
    (previous state kept, ``escaped`` set).

    Raises
    ------
    EvalDomainError
        If a coefficient cannot be evaluated at a visited state; the message
        names the path and step.
    """
    x0 = _check_start(p, t0, x0)
    if M < 1 or n < 1:
        raise ValueError("M and n must be at least 1")
    end = p.T if until is None else float(until)
    if not t0 <= end <= p.T:
        raise ValueError(f"end time {end} outside [{t0}, {p.T}]")
    dt = (end - t0) / M
    _check_driver(drv, p, M, dt)
    return _run(p, t0, dt, M, x0, n, drv.key, 0, record, threads, backend)


def simulate_coupled(p1: ProblemSpec, p2: ProblemSpec, t0, x0, M, n, drv: BrownianDriver,
                     record=True, threads=None, backend=None):
    """Two batches driven by the same increments per (path, step)."""
    if (p1.d, p1.m, p1.T, p1.domain) != (p2.d, p2.m, p2.T, p2.domain):
        raise ValueError("coupled problems must share d, m, T and domain")
    a = simulate(p1, t0, x0, M, n, drv, record, threads, backend)
    b = simulate(p2, t0, x0, M, n, drv, record, threads, backend)
    return a, b


# ------------------------------------------------------------ stability

@dataclass(frozen=True)
class StabilityResult:
    gap: float
    se: float
    bound: float
    L_coef: float
    n: int
    M: int

    @property
    def holds(self):
        return self.gap <= self.bound


def stability_bound(p: ProblemSpec, t, x, t2, x2, L_coef, n_sup=1001):
    """Analytic mean-square bound for two solutions started at ``(t,x)`` and ``(t2,x2)``.

    ``9 [|x-x2| + |t-t2|^(1/2)]^2 [1 + sqrt(T) S_mu + S_sigma]^2 exp(6 L^2 T (T+1))``
    where ``S_mu``, ``S_sigma`` are the sups over ``r in [0,T]`` of
    ``|mu(r,x2)|`` and ``|sigma(r,x2)|_F`` (sampled on ``n_sup`` times when the
    coefficients depend on ``t``).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    rs = np.linspace(0.0, p.T, n_sup) if p.time_dependent else np.array([0.0])
    smu = max(float(np.linalg.norm(p.mu(r, x2[None])[0])) for r in rs)
    ssig = max(float(np.sqrt((p.sigma(r, x2[None])[0] ** 2).sum())) for r in rs)
    T = p.T
    lead = 9.0 * (float(np.linalg.norm(x - x2)) + math.sqrt(abs(t - t2))) ** 2
    return lead * (1.0 + math.sqrt(T) * smu + ssig) ** 2 * math.exp(6.0 * L_coef ** 2 * T * (T + 1.0))


def stability_gap(p: ProblemSpec, start, start2, s, M, n, drv: BrownianDriver, L_coef=None,
                  threads=None, backend=None, lip_pairs=20000) -> StabilityResult:
    """Monte-Carlo ``E|X^{t,x}_s - X^{t',x'}_s|^2`` next to its analytic bound.

    The first process runs ``M`` steps of size ``(s - t)/M`` from ``t``; the
    second starts ``k0 = (t' - t)/dt`` steps later on the same grid and
    reuses the increments of steps ``k0..M-1``.  ``t' - t`` must therefore be
    a multiple of ``dt``.  When ``L_coef`` is None it is measured
    empirically with :func:`coefficient_lipschitz`.
    """
    t, x = float(start[0]), np.asarray(start[1], dtype=float).reshape(-1)
    t2, x2 = float(start2[0]), np.asarray(start2[1], dtype=float).reshape(-1)
    if not t <= t2 <= s <= p.T:
        raise ValueError("need t <= t' <= s <= T")
    _check_start(p, t, x)
    _check_start(p, t2, x2)
    dt = (s - t) / M
    k0 = int(round((t2 - t) / dt))
    if not math.isclose(k0 * dt, t2 - t, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("t' - t must be a whole number of Euler steps")
    if L_coef is None:
        L_coef = coefficient_lipschitz(p, lip_pairs, drv.seed)
    key = drv.key
    a = _run(p, t, dt, M, x, n, key, 0, False, threads, backend)
    b = _run(p, t + k0 * dt, dt, M - k0, x2, n, key, k0, False, threads, backend)
    if a.escaped.any() or b.escaped.any():
        raise PathExplosion("a path crossed the escape guard")
    sq = ((a.final - b.final) ** 2).sum(axis=1)
    se = float(sq.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return StabilityResult(float(sq.mean()), se, stability_bound(p, t, x, t2, x2, L_coef), float(L_coef), n, M)


# ------------------------------------------------------- locality checks

@dataclass(frozen=True)
class FreezeReport:
    max_deviation: float
    moved_paths: int
    n: int
    M: int

    @property
    def exact(self):
        return self.max_deviation == 0.0 and self.moved_paths == 0


def freeze_at_rest(p: ProblemSpec, t0, x0, M, n, drv: BrownianDriver, threads=None, backend=None):
    """Simulate from a point where the coefficients vanish; report any motion.

    Comparison is exact: a single ulp of movement counts.
    """
    b = simulate(p, t0, x0, M, n, drv, record=True, threads=threads, backend=backend)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    dev = np.abs(b.states - x0).max(axis=(1, 2))
    return FreezeReport(float(dev.max()), int((dev != 0).sum()), n, M)


@dataclass(frozen=True)
class CouplingReport:
    """Outcome of a shared-increment locality check.

    ``max_diff_inside`` is the largest state difference observed while both
    paths were still inside the region (inclusive of the first index at
    which one of them left it).  ``first_divergence`` is ``(path, step)`` of
    the earliest such nonzero difference, or None.
    """

    max_diff_inside: float
    first_divergence: Optional[tuple]
    paths_left_region: int
    n: int
    M: int

    @property
    def exact(self):
        return self.max_diff_inside == 0.0


def coupling_locality(p1: ProblemSpec, p2: ProblemSpec, radius, t0, x0, M, n, drv: BrownianDriver,
                      threads=None, backend=None) -> CouplingReport:
    """Check that coupled paths coincide while both stay in ``{|x| <= radius}``."""
    a, b = simulate_coupled(p1, p2, t0, x0, M, n, drv, True, threads, backend)
    inside = ((a.states ** 2).sum(axis=2) <= radius * radius) & ((b.states ** 2).sum(axis=2) <= radius * radius)
    # grid indices up to and including the first one outside the region
    outside_before = np.cumsum(~inside, axis=1) - (~inside)
    window = outside_before == 0
    diff = np.abs(a.states - b.states).max(axis=2)
    diff = np.where(window, diff, 0.0)
    bad = np.argwhere(diff != 0)
    first = None
    if bad.size:
        k = int(bad[:, 1].min())
        i = int(bad[bad[:, 1] == k][0, 0])
        first = (i, k)
    return CouplingReport(float(diff.max()), first, int((~inside).any(axis=1).sum()), n, M)
