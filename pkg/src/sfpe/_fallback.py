"""Pure numpy implementations of the hot loops.

Same signatures and per-path arithmetic as the compiled kernels in
``sfpe._kernels``; used when the extension is unavailable or when
``SFPE_BACKEND=python``.  Paths are processed as whole arrays instead of
blocks, which does not change any per-path result.  Transcendental functions
go through numpy rather than the C library, so the two backends agree to a
few ulps rather than bitwise once ``exp``/``log``/``sin``/``cos``/``pow``
appear in an expression.
"""
import math

import numpy as np

from . import rng
from .expr import ERR_DIV, ERR_LOG, ERR_POW, ERR_SQRT, EvalDomainError, evaluate

ERR_ESCAPED = 100
BLOCK = 64

# node-chunk size for phi_nodes, in path lanes
_LANES = 1 << 17


def _err_code(exc):
    msg = str(exc)
    if msg.startswith("log"):
        return ERR_LOG
    if msg.startswith("sqrt"):
        return ERR_SQRT
    if msg.startswith("pow"):
        return ERR_POW
    return ERR_DIV


class _LaneError(Exception):
    def __init__(self, code, lane):
        super().__init__(code, lane)
        self.code = code
        self.lane = lane


def _eval(node, t, x, v=None):
    """Evaluate on rows of ``x`` (shape (k, d)); map domain errors to the first bad row."""
    if node.kind == "const":
        return np.full(x.shape[0], node.value)
    try:
        with np.errstate(all="ignore"):
            out = evaluate(node, t, x, v)
    except EvalDomainError as exc:
        code = _err_code(exc)
        for r in range(x.shape[0]):
            try:
                evaluate(node, t, x[r], None if v is None else np.asarray(v)[r])
            except EvalDomainError:
                raise _LaneError(code, r) from None
        raise _LaneError(code, 0) from None
    return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],))


def _em(drift, diff, d, m, t, dt, sdt, x, z):
    xn = np.empty_like(x)
    for i in range(d):
        acc = x[:, i] + _eval(drift[i], t, x) * dt
        for j in range(m):
            acc = acc + _eval(diff[i * m + j], t, x) * (sdt * z[:, j])
        xn[:, i] = acc
    return xn


def _settle(xn, box, guard):
    """Status per row: 0 moved, 1 left the box, 2 escaped."""
    status = np.where((np.abs(xn) <= guard).all(axis=1), 0, 2)
    if box is not None:
        lo, hi = box
        out = ((xn <= lo) | (xn >= hi)).any(axis=1)
        status = np.where((status == 0) & out, 1, status)
    return status


def simulate_paths(drift_ps, diff_ps, d, m, t0, dt, M, n, key, path_offset, step_offset,
                   x0, box, guard, record, threads=1):
    """Euler-Maruyama paths from one start point.

    Returns ``(states, final, frozen, exited, escaped, err)``.  ``states`` is
    ``(n, M+1, d)`` or ``None``; ``frozen`` holds the grid index from which a
    path is frozen (-1 if never); ``err`` is ``None`` or
    ``(code, path, step)``.
    """
    drift, diff = drift_ps.nodes, diff_ps.nodes
    x0 = np.asarray(x0, dtype=float)
    if box is not None:
        box = (np.asarray(box[0], float), np.asarray(box[1], float))
    x = np.tile(x0, (n, 1))
    states = np.empty((n, M + 1, d)) if record else None
    if record:
        states[:, 0] = x
    frozen = np.full(n, -1, dtype=np.int64)
    exited = np.zeros(n, dtype=np.int8)
    escaped = np.zeros(n, dtype=np.int8)
    pk = rng.path_keys(key, np.arange(path_offset, path_offset + n, dtype=np.uint64))
    active = np.ones(n, dtype=bool)
    sdt = math.sqrt(dt)
    err = None
    for k in range(M):
        ids = np.nonzero(active)[0]
        if ids.size == 0:
            if record:
                states[:, k + 1:] = x[:, None, :]
            break
        base = (step_offset + k) * m
        z = np.stack([rng.normals_from_keys(pk[ids], base + j) for j in range(m)], axis=1)
        try:
            xn = _em(drift, diff, d, m, t0 + k * dt, dt, sdt, x[ids], z)
        except _LaneError as exc:
            err = (exc.code, int(ids[exc.lane]), k)
            break
        status = _settle(xn, box, guard)
        moved = status == 0
        x[ids[moved]] = xn[moved]
        out = status == 1
        if out.any():
            x[ids[out]] = np.clip(xn[out], box[0], box[1])
            exited[ids[out]] = 1
        esc = status == 2
        escaped[ids[esc]] = 1
        stop = ids[~moved]
        frozen[stop] = k + 1
        active[stop] = False
        if record:
            states[:, k + 1] = x
    return states, x, frozen, exited, escaped, err


def locate(q, lo, h, n):
    """Knot index and fraction per query; same rules as the compiled kernel."""
    q = np.asarray(q, dtype=float)
    nmax = float(n - 1)
    with np.errstate(invalid="ignore"):
        pos = (q - lo) / h
        pc = np.where(pos > 0.0, pos, 0.0)
        pc = np.where(pc < nmax, pc, nmax)
        fi = np.floor(pc)
        f = pc - fi
        f = np.where(f < 1e-12, 0.0, f)
        up = f > 1.0 - 1e-12
        fi = np.where(up, fi + 1.0, fi)
        f = np.where(up, 0.0, f)
        top = fi >= nmax
        fi = np.where(top, nmax - 1.0, fi)
        f = np.where(top, 1.0, f)
        neg = ~(pos > 0.0)
    fi = np.where(neg, 0.0, fi)
    f = np.where(neg, 0.0, f)
    return fi.astype(np.int64), f


def _locate_scalar(q, lo, h, n):
    pos = (q - lo) / h
    if not pos > 0.0:
        return 0, 0.0
    if pos >= n - 1:
        return n - 2, 1.0
    i = math.floor(pos)
    f = pos - i
    if f < 1e-12:
        f = 0.0
    elif f > 1.0 - 1e-12:
        i += 1
        f = 0.0
        if i >= n - 1:
            return n - 2, 1.0
    return i, f


def interpolate(values, s, x, K, tau, glo, gh, nknots):
    """Linear-in-time, multilinear-in-space interpolation at one time ``s``.

    ``values`` has shape ``(nv, (K+1) * prod(nknots))`` (C order, time first);
    ``x`` is ``(k, d)``.  Returns ``(nv, k)``.
    """
    d = x.shape[1]
    stride = np.empty(d + 1, dtype=np.int64)
    acc = 1
    for a in range(d, 0, -1):
        stride[a] = acc
        acc *= int(nknots[a - 1])
    stride[0] = acc
    ti, tf = _locate_scalar(s, 0.0, tau, K + 1)
    idx, fr = [], []
    for a in range(d):
        i, f = locate(x[:, a], glo[a], gh[a], nknots[a])
        idx.append(i)
        fr.append(f)
    out = np.zeros((values.shape[0], x.shape[0]))
    for c in range(1 << (d + 1)):
        ct = c & 1
        w = np.full(x.shape[0], 1.0 * (tf if ct else 1.0 - tf))
        off = np.full(x.shape[0], (ti + ct) * stride[0], dtype=np.int64)
        for a in range(d):
            if (c >> (a + 1)) & 1:
                w = w * fr[a]
                off = off + (idx[a] + 1) * stride[a + 1]
            else:
                w = w * (1.0 - fr[a])
                off = off + idx[a] * stride[a + 1]
        out = out + w * values[:, off]
    return out


def phi_nodes(drift_ps, diff_ps, f_ps, g_ps, d, m, f_mode, trap, T, M, n, node_t, node_x,
              node_keys, values, K, glo, gh, nknots, box, guard, diffs=False, threads=1):
    """Estimate ``g(X_T) + sum_i w_i f(t_i, X_i, v_r(t_i, X_i))`` per node.

    One batch of ``n`` paths per node, shared by all ``nv`` candidate
    functions in ``values`` (common random numbers).  ``f_mode`` is 0 when f
    is identically zero, 1 when f ignores v and 2 otherwise.  With ``diffs``
    the output gains ``nv - 1`` extra rows for the paired differences
    against function 0.

    Returns ``(mean, var, err)`` with shapes ``(nout, nodes)``,
    ``(nout, nodes)`` and ``(nodes, 3)``.
    """
    drift, diff = drift_ps.nodes, diff_ps.nodes
    fnode, gnode = f_ps.nodes[0], g_ps.nodes[0]
    node_t = np.asarray(node_t, dtype=float)
    node_x = np.asarray(node_x, dtype=float).reshape(len(node_t), d)
    node_keys = np.asarray(node_keys, dtype=np.uint64)
    values = np.asarray(values, dtype=float)
    nv = values.shape[0]
    nout = 2 * nv - 1 if diffs else nv
    if box is not None:
        box = (np.asarray(box[0], float), np.asarray(box[1], float))
    tau = T / K
    nn = len(node_t)
    mean = np.zeros((nout, nn))
    var = np.zeros((nout, nn))
    errs = np.zeros((nn, 3), dtype=np.int64)
    paths = np.arange(n, dtype=np.uint64)
    chunk = max(1, _LANES // max(n, 1))
    for t0 in np.unique(node_t):
        ids = np.nonzero(node_t == t0)[0]
        for c0 in range(0, ids.size, chunk):
            sel = ids[c0:c0 + chunk]
            res = _phi_chunk(drift, diff, fnode, gnode, d, m, f_mode, trap, float(t0), T, M, n,
                             node_x[sel], node_keys[sel], paths, values, K, tau, glo, gh,
                             nknots, box, guard)
            if isinstance(res, tuple) and res[0] == "err":
                _, node, code, path, step = res
                errs[sel[node]] = (code, path, step)
                continue
            contrib = res
            if diffs:
                contrib = np.concatenate([contrib, contrib[1:] - contrib[:1]], axis=0)
            mean[:, sel] = contrib.mean(axis=2)
            if n > 1:
                var[:, sel] = contrib.var(axis=2, ddof=1)
    return mean, var, errs


def _phi_chunk(drift, diff, fnode, gnode, d, m, f_mode, trap, t0, T, M, n, xs, keys, paths,
               values, K, tau, glo, gh, nknots, box, guard):
    q = xs.shape[0]
    nv = values.shape[0]
    dt = (T - t0) / M
    sdt = math.sqrt(dt)
    pk = np.stack([rng.path_keys(int(kk), paths) for kk in keys]).reshape(-1)
    x = np.repeat(xs, n, axis=0)
    active = np.ones(q * n, dtype=bool)
    acc = np.zeros((nv, q * n))

    def fail(exc_code, lane, step):
        return ("err", lane // n, exc_code, lane % n, step)

    for k in range(M + 1):
        t = t0 + k * dt if k < M else T
        if f_mode and (k < M or trap):
            wk = 0.5 if trap and (k == 0 or k == M) else 1.0
            try:
                if f_mode == 2:
                    vv = interpolate(values, t, x, K, tau, glo, gh, nknots)
                    for r in range(nv):
                        acc[r] = acc[r] + wk * _eval(fnode, t, x, vv[r])
                else:
                    fv = _eval(fnode, t, x)
                    acc = acc + wk * fv
            except _LaneError as exc:
                return fail(exc.code, exc.lane, k)
        if k == M:
            break
        ids = np.nonzero(active)[0]
        if ids.size == 0:
            continue
        z = np.stack([rng.normals_from_keys(pk[ids], k * m + j) for j in range(m)], axis=1)
        try:
            xn = _em(drift, diff, d, m, t, dt, sdt, x[ids], z)
        except _LaneError as exc:
            return fail(exc.code, int(ids[exc.lane]), k)
        status = _settle(xn, box, guard)
        if (status == 2).any():
            lane = int(ids[np.argmax(status == 2)])
            return fail(ERR_ESCAPED, lane, k + 1)
        moved = status == 0
        x[ids[moved]] = xn[moved]
        out = status == 1
        if out.any():
            x[ids[out]] = np.clip(xn[out], box[0], box[1])
            active[ids[out]] = False
    try:
        gx = _eval(gnode, T, x)
    except _LaneError as exc:
        return fail(exc.code, exc.lane, M)
    return (gx + dt * acc).reshape(nv, q, n)


def normals(key, paths, indices):
    return rng.normals(key, paths, indices)
