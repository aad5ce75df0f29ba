# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: expression VM, counter-based normals, Euler-Maruyama
paths and the per-node Picard map estimator.

The numerical work lives in ``_core.h`` (block-vectorized C); this module
marshals arrays and spreads work over OpenMP threads.  Semantics mirror
``sfpe._fallback`` lane for lane.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdlib cimport malloc, free
from libc.stdint cimport uint64_t, int32_t, int64_t, int8_t

from sfpe import rng as _rng

cnp.import_array()


cdef extern from "_core.h" nogil:
    enum:
        SFPE_BLK
        SFPE_MAX_STACK
        SFPE_MAX_DIM
        ERR_ESCAPE

    ctypedef struct sfpe_prog:
        const int32_t *code
        int ncode
        const double *consts
        int is_const
        double cval

    ctypedef struct sfpe_grid:
        const double *vals
        int64_t size
        int nv
        int d
        int K
        double tau
        const double *lo
        const double *h
        const int64_t *nk
        int64_t stride[17]

    ctypedef struct sfpe_err:
        int code
        int64_t path
        int64_t step

    void sfpe_set_tables(const double *zx, const double *zr, const double *zf)
    uint64_t sfpe_path_key(uint64_t key, uint64_t path)
    double sfpe_normal(uint64_t pk, uint64_t index)
    int sfpe_vm_block(const sfpe_prog *p, double t, const double *x, int d, const double *v,
                      double *out, int nb, const int *active, int64_t *err_lane)
    int sfpe_sim_block(const sfpe_prog *pd, const sfpe_prog *ps, int d, int m, double t0,
                       double dt, int M, uint64_t key, int64_t path_offset, int64_t step_offset,
                       const double *x0, int has_box, const double *lo, const double *hi,
                       double guard, int64_t p0, int nb, double *states, double *final,
                       int64_t *frozen, int8_t *exited, int8_t *escaped, sfpe_err *err)
    int sfpe_phi_node(const sfpe_prog *pd, const sfpe_prog *ps, const sfpe_prog *pf,
                      const sfpe_prog *pg, int d, int m, int f_mode, int trap, double t0,
                      double T, int M, int64_t n, uint64_t key, const sfpe_grid *g,
                      int has_box, const double *lo, const double *hi, double guard,
                      const double *x0, int diffs, double *mean, double *m2, sfpe_err *err)


cdef double[::1] _zx = np.ascontiguousarray(_rng.ZIG_X, dtype=np.float64)
cdef double[::1] _zr = np.ascontiguousarray(_rng.ZIG_RATIO, dtype=np.float64)
cdef double[::1] _zf = np.ascontiguousarray(_rng.ZIG_F, dtype=np.float64)
sfpe_set_tables(&_zx[0], &_zr[0], &_zf[0])

BLOCK = SFPE_BLK
MAX_STACK_DEPTH = SFPE_MAX_STACK
MAX_DIMENSION = SFPE_MAX_DIM
ERR_ESCAPED = ERR_ESCAPE


cdef sfpe_prog* build_progs(object ps) except NULL:
    cdef int n = len(ps)
    cdef sfpe_prog* out
    cdef const int32_t[::1] code = ps.code if ps.code.size else np.zeros(2, np.int32)
    cdef const double[::1] consts = ps.consts if ps.consts.size else np.zeros(1)
    cdef const int64_t[::1] offs = ps.offsets
    cdef const int64_t[::1] coffs = ps.const_offsets
    cdef int i
    if ps.max_stack > SFPE_MAX_STACK:
        raise ValueError("expression too deeply nested for the compiled evaluator")
    out = <sfpe_prog*>malloc(max(n, 1) * sizeof(sfpe_prog))
    for i in range(n):
        out[i].code = &code[0] + 2 * offs[i]
        out[i].ncode = <int>(offs[i + 1] - offs[i])
        out[i].consts = &consts[0] + coffs[i]
        out[i].is_const = ps.is_const[i]
        out[i].cval = ps.const_value[i]
    return out


def _box_arrays(box, d):
    if box is None:
        return 0, np.zeros(d), np.zeros(d)
    return 1, np.ascontiguousarray(box[0], dtype=float), np.ascontiguousarray(box[1], dtype=float)


def simulate_paths(object drift_ps, object diff_ps, int d, int m, double t0, double dt,
                   int M, int64_t n, uint64_t key, int64_t path_offset, int64_t step_offset,
                   const double[::1] x0, object box, double guard, bint record, int threads=1):
    """Euler-Maruyama paths; see ``sfpe._fallback.simulate_paths``."""
    if d > SFPE_MAX_DIM or m > SFPE_MAX_DIM:
        raise ValueError(f"compiled kernel supports d, m <= {SFPE_MAX_DIM}")
    shape = (int(n), M + 1, d) if record else (1, 1, 1)
    states_arr = np.empty(shape)
    final_arr = np.empty((n, d))
    frozen_arr = np.full(n, -1, dtype=np.int64)
    exited_arr = np.zeros(n, dtype=np.int8)
    escaped_arr = np.zeros(n, dtype=np.int8)
    cdef double[:, :, ::1] states = states_arr
    cdef double[:, ::1] final = final_arr
    cdef int64_t[::1] frozen = frozen_arr
    cdef int8_t[::1] exited = exited_arr
    cdef int8_t[::1] escaped = escaped_arr
    hb, lo_arr, hi_arr = _box_arrays(box, d)
    cdef int has_box = hb
    cdef double[::1] lo = lo_arr
    cdef double[::1] hi = hi_arr
    cdef int64_t nblk = (n + SFPE_BLK - 1) // SFPE_BLK
    errs_arr = np.zeros((max(nblk, 1), 3), dtype=np.int64)
    cdef int64_t[:, ::1] errs = errs_arr
    cdef sfpe_prog* pd = build_progs(drift_ps)
    cdef sfpe_prog* ps
    try:
        ps = build_progs(diff_ps)
    except BaseException:
        free(pd)
        raise
    cdef int64_t q, p0
    cdef int nb
    cdef int rec = record
    cdef double* sp = &states[0, 0, 0]
    cdef sfpe_err* earr = <sfpe_err*>malloc(max(nblk, 1) * sizeof(sfpe_err))
    try:
        for q in prange(nblk, nogil=True, num_threads=threads, schedule="dynamic"):
            p0 = q * SFPE_BLK
            nb = <int>(n - p0) if n - p0 < SFPE_BLK else SFPE_BLK
            if sfpe_sim_block(pd, ps, d, m, t0, dt, M, key, path_offset, step_offset,
                              &x0[0], has_box, &lo[0], &hi[0], guard, p0, nb,
                              sp if rec else NULL, &final[0, 0], &frozen[0], &exited[0],
                              &escaped[0], &earr[q]):
                errs[q, 0] = earr[q].code
                errs[q, 1] = earr[q].path
                errs[q, 2] = earr[q].step
    finally:
        free(pd)
        free(ps)
        free(earr)
    bad = np.nonzero(errs_arr[:, 0])[0]
    err = tuple(int(v) for v in errs_arr[bad[0]]) if bad.size else None
    return (states_arr if record else None), final_arr, frozen_arr, exited_arr, escaped_arr, err


def phi_nodes(object drift_ps, object diff_ps, object f_ps, object g_ps, int d, int m,
              int f_mode, bint trap, double T, int M, int64_t n,
              const double[::1] node_t, const double[:, ::1] node_x,
              const uint64_t[::1] node_keys, const double[:, ::1] values, int K,
              const double[::1] glo, const double[::1] gh, const int64_t[::1] nknots, object box, double guard, bint diffs=False, int threads=1):
    """Picard map estimates for many nodes and several candidate functions at once.

    See ``sfpe._fallback.phi_nodes``.
    """
    if d > SFPE_MAX_DIM - 1 or m > SFPE_MAX_DIM:
        raise ValueError(f"compiled kernel supports d, m < {SFPE_MAX_DIM}")
    cdef int64_t nn = node_t.shape[0]
    cdef int nv = values.shape[0]
    cdef sfpe_grid grid
    cdef int a
    cdef int64_t s = 1
    for a in range(d, 0, -1):
        grid.stride[a] = s
        s *= nknots[a - 1]
    grid.stride[0] = s
    grid.vals = &values[0, 0]
    grid.size = values.shape[1]
    grid.nv = nv
    grid.d = d
    grid.K = K
    grid.tau = T / K
    grid.lo = &glo[0]
    grid.h = &gh[0]
    grid.nk = &nknots[0]
    cdef int nout = 2 * nv - 1 if diffs else nv
    mean_arr = np.zeros((nn, nout))
    m2_arr = np.zeros((nn, nout))
    err_arr = np.zeros((max(nn, 1), 3), dtype=np.int64)
    cdef double[:, ::1] mean = mean_arr
    cdef double[:, ::1] m2 = m2_arr
    cdef int64_t[:, ::1] errs = err_arr
    hb, lo_arr, hi_arr = _box_arrays(box, d)
    cdef int has_box = hb
    cdef double[::1] lo = lo_arr
    cdef double[::1] hi = hi_arr
    cdef sfpe_prog* progs[4]
    cdef int i
    for i in range(4):
        progs[i] = NULL
    try:
        progs[0] = build_progs(drift_ps)
        progs[1] = build_progs(diff_ps)
        progs[2] = build_progs(f_ps)
        progs[3] = build_progs(g_ps)
    except BaseException:
        for i in range(4):
            free(progs[i])
        raise
    cdef int64_t q
    cdef sfpe_err* earr = <sfpe_err*>malloc(max(nn, 1) * sizeof(sfpe_err))
    try:
        if nn > 0:
            for q in prange(nn, nogil=True, num_threads=threads, schedule="dynamic"):
                if sfpe_phi_node(progs[0], progs[1], progs[2], progs[3], d, m, f_mode, trap,
                                 node_t[q], T, M, n, node_keys[q], &grid, has_box, &lo[0],
                                 &hi[0], guard, &node_x[q, 0], diffs, &mean[q, 0],
                                 &m2[q, 0], &earr[q]):
                    errs[q, 0] = earr[q].code
                    errs[q, 1] = earr[q].path
                    errs[q, 2] = earr[q].step
    finally:
        free(earr)
        for i in range(4):
            free(progs[i])
    var = m2_arr / max(n - 1, 1)
    return mean_arr.T.copy(), var.T.copy(), err_arr[:nn]


def eval_block(object ps, int index, double t, x, v=None):
    """Run one compiled program on up to ``BLOCK`` points.

    ``x`` has shape ``(nb, d)``.  Returns ``(values, error_code, lane)``.
    """
    xa = np.asarray(x, dtype=float)
    cdef int nb = xa.shape[0]
    cdef int d = xa.shape[1]
    if nb > SFPE_BLK or d > SFPE_MAX_DIM:
        raise ValueError("block too large")
    xs_arr = np.zeros((SFPE_MAX_DIM, SFPE_BLK))
    xs_arr[:d, :nb] = xa.T
    vs_arr = np.zeros(SFPE_BLK)
    if v is not None:
        vs_arr[:nb] = np.broadcast_to(np.asarray(v, dtype=float), (nb,))
    cdef double[:, ::1] xs = xs_arr
    cdef double[::1] vs = vs_arr
    out_arr = np.zeros(SFPE_BLK)
    cdef double[::1] out = out_arr
    cdef int active[SFPE_BLK]
    cdef int b, err
    cdef int64_t lane = -1
    for b in range(SFPE_BLK):
        active[b] = 1
    cdef sfpe_prog* p = build_progs(ps)
    try:
        err = sfpe_vm_block(&p[index], t, &xs[0, 0], d, &vs[0], &out[0], nb, active, &lane)
    finally:
        free(p)
    return out_arr[:nb].copy(), err, lane


def normals(uint64_t key, const uint64_t[::1] paths, const uint64_t[::1] indices):
    """Same numbers as ``sfpe.rng.normals``."""
    out_arr = np.empty((paths.shape[0], indices.shape[0]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t a, b
    cdef uint64_t pk
    for a in range(paths.shape[0]):
        pk = sfpe_path_key(key, paths[a])
        for b in range(indices.shape[0]):
            out[a, b] = sfpe_normal(pk, indices[b])
    return out_arr
