"""Monte-Carlo Picard iteration in exponentially weighted norms."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _backend, rng
from .expr import ERR_MESSAGES, EvalDomainError
from .grid import GridFunction, GridSpec
from .lyapunov import LyapunovSpec
from .problem import ProblemSpec
from .sde import ESCAPE_GUARD, PathExplosion, _box, _run

__all__ = [
    "GridFunction", "GridSpec", "McConfig", "SolveReport", "IterationRecord", "SolverDivergence",
    "WorkCapExceeded", "weighted_norm", "apply_phi", "contraction_ratio", "picard_solve",
    "nested_estimate", "decay_diagnostic", "default_grid", "contraction_sweep", "tilted_direction",
]

log = logging.getLogger(__name__)

# stream salt for residual estimates, kept apart from the iteration streams
RESIDUAL_STREAM = 0x5E51D0A1


class SolverDivergence(RuntimeError):
    """Picard deltas grew for three consecutive iterations."""


class WorkCapExceeded(RuntimeError):
    """A nested estimate would simulate more steps than allowed."""


@dataclass(frozen=True)
class McConfig:
    """Monte-Carlo budget of one application of the Picard map.

    ``stream`` selects the family of node streams; two configs that differ
    only in ``stream`` give statistically independent estimates.
    """

    n_paths: int = 10_000
    M: int = 50
    seed: int = 0
    quadrature: str = "left"
    stream: int = 0

    def __post_init__(self):
        if self.n_paths < 1 or self.M < 1:
            raise ValueError("n_paths and M must be at least 1")
        if self.quadrature not in ("left", "trapezoid"):
            raise ValueError("quadrature must be 'left' or 'trapezoid'")

    def fresh(self, salt=RESIDUAL_STREAM):
        """Same budget on an independent stream family."""
        return replace(self, stream=rng.child_stream(self.stream, salt))


def default_grid(p: ProblemSpec, K: int = 10, n: int = 41, width: float = 6.0) -> GridSpec:
    """Box of ``width`` noise standard deviations (``|sigma_i.(0,0)| sqrt(T)``) per axis."""
    if p.d > 3:
        raise ValueError("grid solver supports d <= 3; use nested_estimate")
    sig = p.sigma(0.0, np.zeros((1, p.d)))[0]
    scale = np.sqrt((sig * sig).sum(axis=1))
    scale = np.where(scale > 0, scale, 1.0)
    half = width * scale * math.sqrt(p.T)
    return GridSpec(p.T, K, tuple(-half), tuple(half), (n,) * p.d)


# ------------------------------------------------------------------ norms

def _weights(spec: GridSpec, V: LyapunovSpec):
    t = np.repeat(spec.times, spec.n_space)
    x = np.tile(spec.space_points(), (spec.K + 1, 1))
    return t, V.value(t, x)


def _weighted(vals, t, vv, lam, T):
    a = np.abs(np.asarray(vals, dtype=float))
    if abs(lam * T) > 30.0:
        with np.errstate(divide="ignore"):
            r = np.where(a > 0, np.exp(lam * t + np.log(a) - np.log(vv)), 0.0)
    else:
        r = np.exp(lam * t) * a / vv
    return r


def weighted_norm(v: GridFunction, V: LyapunovSpec, lam: float) -> float:
    """``max_k,j exp(lam tau_k) |v(tau_k, x_j)| / V(tau_k, x_j)`` over grid nodes."""
    t, vv = _weights(v.spec, V)
    return float(_weighted(v.flat(), t, vv, lam, v.spec.T).max())


# ------------------------------------------------------------------ Picard map

def _f_mode(p):
    if p.f_is_zero:
        return 0
    return 2 if p.f_uses_v else 1


def _node_keys(seed, stream, spec):
    """One key per interior node, derived from ``(seed, stream, k, j)``."""
    sk = rng.child_streams(np.uint64(stream), np.arange(spec.K))
    sub = rng.child_streams(sk[:, None], np.arange(spec.n_space)[None, :])
    return np.ascontiguousarray(rng.stream_keys(seed, sub).reshape(-1))


_KEY_CACHE = {}


def _keys_for(mc, spec):
    ck = (mc.seed, mc.stream, spec)
    keys = _KEY_CACHE.get(ck)
    if keys is None:
        if len(_KEY_CACHE) > 16:
            _KEY_CACHE.clear()
        keys = _KEY_CACHE[ck] = _node_keys(mc.seed, mc.stream, spec)
    return keys


def _phi_raw(p, spec, values, mc, diffs=False, threads=None, backend=None):
    """Interior-node means and variances for the candidate rows of ``values``."""
    if spec.d != p.d:
        raise ValueError("grid and problem dimensions differ")
    kern = _backend.get(backend)
    drift, diff, fps, gps = p.programs
    nsp = spec.n_space
    node_t = np.repeat(spec.times[:-1], nsp)
    node_x = np.ascontiguousarray(np.tile(spec.space_points(), (spec.K, 1)))
    vals = np.ascontiguousarray(np.asarray(values, dtype=float).reshape(-1, (spec.K + 1) * nsp))
    mean, var, err = kern.phi_nodes(
        drift, diff, fps, gps, p.d, p.m, _f_mode(p), mc.quadrature == "trapezoid", p.T, mc.M,
        mc.n_paths, node_t, node_x, _keys_for(mc, spec), vals, spec.K,
        np.array(spec.lo), spec.steps, np.array(spec.n, dtype=np.int64), _box(p), ESCAPE_GUARD,
        diffs, _backend.resolve_threads(threads))
    bad = np.nonzero(err[:, 0])[0]
    if bad.size:
        q = int(bad[0])
        code, path, step = (int(c) for c in err[q])
        where = f"node t={node_t[q]!r}, x={node_x[q].tolist()}, path {path}, step {step}"
        if code == 100:
            raise PathExplosion(f"path crossed the escape guard ({where})")
        raise EvalDomainError(ERR_MESSAGES.get(code, f"evaluation error {code}"), where=where)
    if not np.isfinite(mean).all():
        raise FloatingPointError("nonfinite Monte-Carlo estimate")
    return mean, var


def _terminal(p, spec):
    from .expr import evaluate
    return np.broadcast_to(np.asarray(evaluate(p.g, p.T, spec.space_points()), dtype=float), (spec.n_space,))


def _assemble(spec, interior, terminal):
    full = np.empty((spec.K + 1) * spec.n_space)
    full[:-spec.n_space] = interior
    full[-spec.n_space:] = terminal
    return full.reshape((spec.K + 1,) + spec.n)


def apply_phi(p: ProblemSpec, v: GridFunction, mc: McConfig, threads=None, backend=None,
              return_se=False):
    """Picard map on the grid.

    For each node ``(tau_k, x_j)`` with ``tau_k < T``: ``n_paths`` Euler paths
    to ``T`` with ``M`` steps, averaging ``g(X_T) + sum_i w_i f(t_i, X_i,
    v(t_i, X_i))``.  The level ``tau_K = T`` is ``g`` itself.  Node streams
    depend on ``(seed, stream, k, j)`` only.

    With ``return_se`` the standard errors are returned as a second
    :class:`GridFunction` (zero on the terminal level).
    """
    spec = v.spec
    mean, var = _phi_raw(p, spec, v.flat()[None, :], mc, threads=threads, backend=backend)
    u = GridFunction(spec, _assemble(spec, mean[0], _terminal(p, spec)))
    if not return_se:
        return u
    se = _assemble(spec, np.sqrt(var[0] / mc.n_paths), np.zeros(spec.n_space))
    return u, GridFunction(spec, se)


def contraction_ratio(p: ProblemSpec, v: GridFunction, w: GridFunction, V: LyapunovSpec, lam: float,
                      mc: McConfig, threads=None, backend=None, return_se=False):
    """``|Phi(v) - Phi(w)|_lam / |v - w|_lam`` with common random numbers.

    Both images use the same paths, so the difference isolates the
    nonlinearity.  With ``return_se`` also returns the standard error of the
    ratio, taken at the node where the numerator attains its maximum.
    """
    if v.spec != w.spec:
        raise ValueError("v and w live on different grids")
    spec = v.spec
    den = weighted_norm(v - w, V, lam)
    if den == 0.0:
        raise ZeroDivisionError("v and w coincide on the grid")
    values = np.stack([v.flat(), w.flat()])
    mean, var = _phi_raw(p, spec, values, mc, diffs=True, threads=threads, backend=backend)
    t, vv = _weights(spec, V)
    ni = mean.shape[1]
    r = _weighted(mean[2], t[:ni], vv[:ni], lam, spec.T)
    q = int(np.argmax(r))
    ratio = float(r[q]) / den
    if not return_se:
        return ratio
    se = float(_weighted(math.sqrt(var[2, q] / mc.n_paths), t[q], vv[q], lam, spec.T)) / den
    return ratio, se


def tilted_direction(spec: GridSpec, V: LyapunovSpec, lam: float) -> GridFunction:
    """``exp(-lam t) V(t, x)`` on the grid, the extremal direction for the lam-norm."""
    return GridFunction.from_function(spec, lambda t, x: np.exp(-lam * t) * V.value(t, x))


def contraction_sweep(p: ProblemSpec, V: LyapunovSpec, lams, mc: McConfig, spec: GridSpec,
                      directions=None, threads=None, backend=None):
    """Contraction ratios for several ``lam`` from one batch of paths per node.

    For each ``lam`` the pair is ``(v, 0)`` with ``v`` from ``directions``
    (default :func:`tilted_direction`).  Returns a list of
    ``(lam, ratio, se)``.
    """
    lams = [float(a) for a in lams]
    if directions is None:
        directions = [tilted_direction(spec, V, a) for a in lams]
    if len(directions) != len(lams):
        raise ValueError("need one direction per lambda")
    k = len(lams)
    values = np.stack([np.zeros((spec.K + 1) * spec.n_space)] + [v.flat() for v in directions])
    mean, var = _phi_raw(p, spec, values, mc, diffs=True, threads=threads, backend=backend)
    t, vv = _weights(spec, V)
    ni = mean.shape[1]
    out = []
    for i, lam in enumerate(lams):
        den = weighted_norm(directions[i], V, lam)
        if den == 0.0:
            raise ZeroDivisionError("direction vanishes on the grid")
        row = k + 1 + i
        r = _weighted(mean[row], t[:ni], vv[:ni], lam, spec.T)
        q = int(np.argmax(r))
        se = float(_weighted(math.sqrt(var[row, q] / mc.n_paths), t[q], vv[q], lam, spec.T)) / den
        out.append((lam, float(r[q]) / den, se))
    return out


# ------------------------------------------------------------------ iteration

@dataclass
class IterationRecord:
    iteration: int
    delta: float
    ratio: Optional[float]
    wall: float
    shortcut: bool = False


@dataclass
class SolveReport:
    """Outcome of :func:`picard_solve`."""

    iterations: list
    residual: Optional[float]
    residual_se: Optional[float]
    lam: float
    converged: bool
    u: GridFunction
    tol: float
    wall: float = 0.0
    backend: str = ""
    threads: int = 1

    @property
    def deltas(self):
        return [r.delta for r in self.iterations]

    @property
    def ratios(self):
        return [r.ratio for r in self.iterations if r.ratio is not None]

    def to_dict(self, timing=True):
        """JSON-ready summary (the grid values go to CSV separately).

        ``timing=False`` drops wall-clock fields so repeated runs serialize
        identically.
        """
        its = [asdict(r) for r in self.iterations]
        if not timing:
            for r in its:
                r.pop("wall")
        out = {
            "converged": self.converged,
            "lambda": self.lam,
            "tol": self.tol,
            "n_iterations": len(self.iterations),
            "iterations": its,
            "residual": self.residual,
            "residual_se": self.residual_se,
            "grid": {"T": self.u.spec.T, "K": self.u.spec.K, "lo": list(self.u.spec.lo),
                     "hi": list(self.u.spec.hi), "n": list(self.u.spec.n)},
            "backend": self.backend,
        }
        if timing:
            out["wall"] = self.wall
            out["threads"] = self.threads
        return out


def picard_solve(p: ProblemSpec, V: LyapunovSpec, grid: Optional[GridSpec], mc: McConfig,
                 lam="auto", tol: float = 1e-3, max_iter: int = 30, residual: bool = True,
                 residual_paths: Optional[int] = None, threads=None, backend=None,
                 callback=None) -> SolveReport:
    """Fixed-point iteration ``u_{k+1} = Phi(u_k)`` from ``u_0 = 0``.

    All iterations reuse the same node streams, so successive deltas measure
    the map rather than the noise.  When ``f`` ignores ``v`` the map is
    constant and the second iterate is the first one, reported with
    ``shortcut=True``.  The final residual ``|u - Phi(u)|_lam`` uses a fresh
    stream family with ``residual_paths`` paths per node (default
    ``mc.n_paths``).

    Raises
    ------
    SolverDivergence
        After three consecutive growing deltas.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    lam = 2.0 * p.L if lam in ("auto", None) else float(lam)
    grid = grid or default_grid(p)
    threads = _backend.resolve_threads(threads)
    kern = _backend.get(backend)
    t_start = time.perf_counter()
    u = GridFunction.zeros(grid)
    records = []
    converged = False
    growing = 0
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        shortcut = it >= 2 and not p.f_uses_v
        if shortcut:
            un = u
        else:
            un, u_se = apply_phi(p, u, mc, threads=threads, backend=backend, return_se=True)
        delta = weighted_norm(un - u, V, lam)
        prev = records[-1].delta if records else None
        ratio = None if prev is None else (delta / prev if prev > 0 else 0.0)
        rec = IterationRecord(it, delta, ratio, time.perf_counter() - t0, shortcut)
        records.append(rec)
        log.info("iteration %d: delta %.6g ratio %s", it, delta, "-" if ratio is None else f"{ratio:.4g}")
        if callback is not None:
            callback(rec)
        u = un
        if prev is not None and delta > prev:
            growing += 1
            if growing >= 3:
                raise SolverDivergence(
                    f"delta grew for 3 consecutive iterations (last {delta:.6g} at iteration {it}); "
                    f"lambda={lam} may be below the Lipschitz constant of f")
        else:
            growing = 0
        if delta <= tol:
            converged = True
            break
    res = res_se = None
    if residual:
        # u and the fresh estimate are independent, so both noises enter the SE
        rmc = replace(mc.fresh(), n_paths=residual_paths or mc.n_paths)
        phi_u, se = apply_phi(p, u, rmc, threads=threads, backend=backend, return_se=True)
        diff = phi_u - u
        t, vv = _weights(grid, V)
        r = _weighted(diff.flat(), t, vv, lam, grid.T)
        q = int(np.argmax(r))
        res = float(r[q])
        s_diff = math.hypot(se.flat()[q], u_se.flat()[q])
        res_se = float(_weighted(s_diff, t[q], vv[q], lam, grid.T))
    return SolveReport(records, res, res_se, lam, converged, u, tol, time.perf_counter() - t_start,
                       _backend.name_of(kern), threads)


# ------------------------------------------------------------------ nested

@dataclass(frozen=True)
class NestedResult:
    estimate: float
    work: int
    widths: tuple
    iterate: int


def _widths(widths, levels):
    if len(widths) == 2 and all(np.ndim(w) == 0 for w in widths):
        out = [tuple(int(w) for w in widths)] * levels
    else:
        out = [tuple(int(a) for a in w) for w in widths]
        if len(out) != levels:
            raise ValueError(f"need {levels} (N_g, N_f) pairs, got {len(out)}")
    for ng, nf in out:
        if ng < 1 or nf < 1:
            raise ValueError("widths must be positive")
    return out


def _predicted_work(widths, M, f_zero):
    w = 0
    for ng, nf in reversed(widths):
        w = ng * M + (0 if f_zero else nf * (M + w))
    return w


def nested_estimate(p: ProblemSpec, t: float, x, depth: int, widths, seed: int, M: int = 50,
                    time_nodes: str = "gauss", max_work: int = 10**9, stream: int = 0,
                    backend=None) -> NestedResult:
    """Pointwise nested Monte-Carlo estimate of a Picard iterate.

    ``depth = 0`` returns 0 (the starting iterate).  ``depth = n >= 1`` returns
    ``U_{n+1}`` where ``U_0 = 0`` and

    ``U_k(t,x) = mean_i g(X^i_T) + (T-t) sum_j w_j f(S_j, X^j_{S_j}, U_{k-1}(S_j, X^j_{S_j}))``

    so depth 1 is plain Monte-Carlo of ``g(X_T)`` when ``f = 0``.  Every
    recursive call draws from its own child stream.  ``time_nodes="gauss"``
    uses ``N_f`` Gauss-Legendre times on ``[t, T]`` (deterministic, exact for
    polynomial integrands of degree below ``2 N_f``); ``"uniform"`` draws
    ``S_j`` uniformly with weights ``1/N_f``.

    ``widths`` is one ``(N_g, N_f)`` pair for every level or a list with one
    pair per level, outermost first.  ``work`` counts simulated Euler steps.

    Raises
    ------
    WorkCapExceeded
        If the predicted step count exceeds ``max_work``; nothing is simulated.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    x = np.asarray(x, dtype=float).reshape(p.d)
    if not 0.0 <= t <= p.T:
        raise ValueError(f"t outside [0, {p.T}]")
    if depth == 0:
        return NestedResult(0.0, 0, (), 0)
    if time_nodes not in ("gauss", "uniform"):
        raise ValueError("time_nodes must be 'gauss' or 'uniform'")
    levels = depth + 1
    ws = _widths(widths, levels)
    f_zero = p.f_is_zero
    need = _predicted_work(ws, M, f_zero)
    if need > max_work:
        raise WorkCapExceeded(f"nested estimate needs {need} simulated steps, above the cap of {max_work}")
    counter = [0]
    est = _nested(p, float(t), x, ws, 0, seed, stream, M, time_nodes, f_zero, counter, backend)
    return NestedResult(float(est), counter[0], tuple(ws), levels)


def _endpoint(p, t, x, s, n, seed, stream, M, backend):
    if s <= t:
        return np.tile(x, (n, 1))
    b = _run(p, t, (s - t) / M, M, x, n, rng.stream_key(seed, stream), 0, False, 1, backend)
    if b.escaped.any():
        raise PathExplosion("a nested path crossed the escape guard")
    return b.final


def _nested(p, t, x, ws, level, seed, stream, M, nodes, f_zero, counter, backend):
    from .expr import evaluate
    ng, nf = ws[level]
    xs = _endpoint(p, t, x, p.T, ng, seed, rng.child_stream(stream, 0), M, backend)
    counter[0] += ng * M
    est = float(np.mean(evaluate(p.g, p.T, xs) * np.ones(ng)))
    if f_zero or t >= p.T:
        return est
    if nodes == "gauss":
        xi, wi = np.polynomial.legendre.leggauss(nf)
        s_nodes = t + (p.T - t) * 0.5 * (xi + 1.0)
        weights = 0.5 * wi
    else:
        s_nodes = t + (p.T - t) * rng.uniforms(rng.stream_key(seed, rng.child_stream(stream, 1)), [0], np.arange(nf))[0]
        weights = np.full(nf, 1.0 / nf)
    acc = 0.0
    for j in range(nf):
        s = float(s_nodes[j])
        xj = _endpoint(p, t, x, s, 1, seed, rng.child_stream(stream, 2 + 2 * j), M, backend)[0]
        counter[0] += M
        if level + 1 < len(ws):
            vj = _nested(p, s, xj, ws, level + 1, seed, rng.child_stream(stream, 3 + 2 * j), M,
                         nodes, f_zero, counter, backend)
        else:
            vj = 0.0
        acc += weights[j] * float(np.asarray(evaluate(p.f, s, xj[None], vj)).reshape(-1)[0])
    return est + (p.T - t) * acc


# ------------------------------------------------------------------ diagnostics

def decay_diagnostic(u: GridFunction, V: LyapunovSpec, shells: Sequence[float]):
    """Per shell ``(r_prev, r]`` of ``|x|``: max over grid nodes of ``|u| / V``.

    The first shell is ``[0, r_0]``.  Shells without nodes report ``nan``.
    Returns a list of ``(r, value)`` pairs.
    """
    shells = [float(r) for r in shells]
    if any(b <= a for a, b in zip(shells, shells[1:])):
        raise ValueError("shells must be increasing")
    t, x = u.nodes()
    ratio = np.abs(u.flat()) / V.value(t, x)
    radius = np.sqrt((x * x).sum(axis=1))
    out = []
    prev = -math.inf
    for r in shells:
        sel = (radius > prev) & (radius <= r)
        out.append((r, float(ratio[sel].max()) if sel.any() else math.nan))
        prev = r
    return out
