/* Block-vectorized simulation core for sfpe._kernels.
 *
 * Paths advance in blocks of SFPE_BLK lanes with structure-of-arrays state
 * (coordinate i of lane b lives at x[i*SFPE_BLK + b]).  Per-lane arithmetic
 * is identical to the scalar reference in sfpe/_fallback.py; blocking only
 * changes the order in which independent lanes are visited.
 */
#ifndef SFPE_CORE_H
#define SFPE_CORE_H

#include <math.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>

#define SFPE_BLK 64
#define SFPE_MAX_STACK 32
#define SFPE_MAX_DIM 16

#define OP_CONST 0
#define OP_T 1
#define OP_X 2
#define OP_V 3
#define OP_NORM2 4
#define OP_NEG 5
#define OP_ADD 6
#define OP_SUB 7
#define OP_MUL 8
#define OP_DIV 9
#define OP_POW 10
#define OP_EXP 11
#define OP_LOG 12
#define OP_SQRT 13
#define OP_ABS 14
#define OP_SIN 15
#define OP_COS 16
#define OP_MIN 17
#define OP_MAX 18

#define ERR_LOG 1
#define ERR_SQRT 2
#define ERR_DIV 3
#define ERR_POW 4
#define ERR_ESCAPE 100

#define SFPE_GOLDEN 0x9E3779B97F4A7C15ULL
#define SFPE_PATH_GAMMA 0xD1B54A32D192ED03ULL
#define SFPE_RETRY_SALT 0xA0761D6478BD642FULL
#define SFPE_RETRY_SHIFT 20
#define SFPE_ZIG_LAYERS 1024
#define SFPE_ZIG_MASK (SFPE_ZIG_LAYERS - 1)
#define SFPE_ZIG_R 4.0388498461095045
#define SFPE_INV253 (1.0 / 9007199254740992.0)

typedef struct {
    const int32_t *code;
    int ncode;
    const double *consts;
    int is_const;
    double cval;
} sfpe_prog;

typedef struct {
    const double *vals;
    int64_t size;
    int nv;
    int d;
    int K;
    double tau;
    const double *lo;
    const double *h;
    const int64_t *nk;
    int64_t stride[SFPE_MAX_DIM + 1];
} sfpe_grid;

typedef struct {
    int code;
    int64_t path;
    int64_t step;
} sfpe_err;

static double SFPE_ZX[SFPE_ZIG_LAYERS + 1];
static double SFPE_ZR[SFPE_ZIG_LAYERS];
static double SFPE_ZF[SFPE_ZIG_LAYERS + 1];

static void sfpe_set_tables(const double *zx, const double *zr, const double *zf)
{
    memcpy(SFPE_ZX, zx, sizeof(SFPE_ZX));
    memcpy(SFPE_ZR, zr, sizeof(SFPE_ZR));
    memcpy(SFPE_ZF, zf, sizeof(SFPE_ZF));
}

static inline uint64_t sfpe_mix64(uint64_t z)
{
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

static inline uint64_t sfpe_path_key(uint64_t key, uint64_t path)
{
    return sfpe_mix64(key + (path + 1) * SFPE_PATH_GAMMA);
}

static inline double sfpe_uniform(uint64_t h)
{
    return ((double)(h >> 11) + 0.5) * SFPE_INV253;
}

static inline uint64_t sfpe_retry_bits(uint64_t pk, uint64_t index, uint64_t k)
{
    uint64_t rk = sfpe_mix64(pk ^ SFPE_RETRY_SALT);
    return sfpe_mix64(rk + (((index << SFPE_RETRY_SHIFT) + k + 1) * SFPE_GOLDEN));
}

static double sfpe_slow_normal(uint64_t pk, uint64_t index, uint64_t h)
{
    uint64_t k = 0;
    for (;;) {
        int i = (int)(h & SFPE_ZIG_MASK);
        double u = 2.0 * ((double)(h >> 11) * SFPE_INV253) - 1.0;
        if (fabs(u) < SFPE_ZR[i])
            return u * SFPE_ZX[i];
        if (i == 0) {
            for (;;) {
                double a = log(sfpe_uniform(sfpe_retry_bits(pk, index, k))) / SFPE_ZIG_R;
                double b = log(sfpe_uniform(sfpe_retry_bits(pk, index, k + 1)));
                k += 2;
                if (-2.0 * b >= a * a)
                    return u < 0.0 ? a - SFPE_ZIG_R : SFPE_ZIG_R - a;
            }
        }
        double xx = u * SFPE_ZX[i];
        double w = sfpe_uniform(sfpe_retry_bits(pk, index, k));
        k += 1;
        if (SFPE_ZF[i] + w * (SFPE_ZF[i + 1] - SFPE_ZF[i]) < exp(-0.5 * xx * xx))
            return xx;
        h = sfpe_retry_bits(pk, index, k);
        k += 1;
    }
}

static inline double sfpe_normal(uint64_t pk, uint64_t index)
{
    uint64_t h = sfpe_mix64(pk + (index + 1) * SFPE_GOLDEN);
    int i = (int)(h & SFPE_ZIG_MASK);
    double u = 2.0 * ((double)(h >> 11) * SFPE_INV253) - 1.0;
    if (fabs(u) < SFPE_ZR[i])
        return u * SFPE_ZX[i];
    return sfpe_slow_normal(pk, index, h);
}

/* Normals for draw `index` of nb lanes. */
static void sfpe_normals_block(const uint64_t *restrict pk, uint64_t index,
                               double *restrict out, int nb)
{
    uint64_t hs[SFPE_BLK];
    int slow[SFPE_BLK];
    const uint64_t inc = (index + 1) * SFPE_GOLDEN;
    int b, any = 0;
    for (b = 0; b < nb; b++) {
        uint64_t z = pk[b] + inc;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        z = z ^ (z >> 31);
        hs[b] = z;
    }
    for (b = 0; b < nb; b++) {
        int i = (int)(hs[b] & SFPE_ZIG_MASK);
        double u = 2.0 * ((double)(hs[b] >> 11) * SFPE_INV253) - 1.0;
        out[b] = u * SFPE_ZX[i];
        slow[b] = !(fabs(u) < SFPE_ZR[i]);
        any |= slow[b];
    }
    if (any) {
        for (b = 0; b < nb; b++)
            if (slow[b])
                out[b] = sfpe_slow_normal(pk[b], index, hs[b]);
    }
}

/* Evaluate program p on nb lanes; error checks only on lanes with active[b]. */
static int sfpe_vm_block(const sfpe_prog *p, double t, const double *restrict x, int d,
                         const double *restrict v, double *restrict out, int nb,
                         const int *restrict active, int64_t *err_lane)
{
    double st[SFPE_MAX_STACK][SFPE_BLK];
    int sp = -1, k, b, i;
    if (p->is_const) {
        const double c = p->cval;
        for (b = 0; b < nb; b++)
            out[b] = c;
        return 0;
    }
    for (k = 0; k < p->ncode; k++) {
        const int op = p->code[2 * k];
        const int arg = p->code[2 * k + 1];
        double *restrict top;
        const double *restrict nxt;
        switch (op) {
        case OP_CONST: {
            const double c = p->consts[arg];
            sp++;
            top = st[sp];
            for (b = 0; b < nb; b++)
                top[b] = c;
            break;
        }
        case OP_T:
            sp++;
            top = st[sp];
            for (b = 0; b < nb; b++)
                top[b] = t;
            break;
        case OP_X:
            sp++;
            memcpy(st[sp], x + (size_t)arg * SFPE_BLK, nb * sizeof(double));
            break;
        case OP_V:
            sp++;
            memcpy(st[sp], v, nb * sizeof(double));
            break;
        case OP_NORM2:
            sp++;
            top = st[sp];
            for (b = 0; b < nb; b++)
                top[b] = x[b] * x[b];
            for (i = 1; i < d; i++) {
                const double *restrict xi = x + (size_t)i * SFPE_BLK;
                for (b = 0; b < nb; b++)
                    top[b] = top[b] + xi[b] * xi[b];
            }
            break;
        case OP_NEG:
            top = st[sp];
            for (b = 0; b < nb; b++)
                top[b] = -top[b];
            break;
        case OP_ADD:
            sp--;
            top = st[sp];
            nxt = st[sp + 1];
            for (b = 0; b < nb; b++)
                top[b] = top[b] + nxt[b];
            break;
        case OP_SUB:
            sp--;
            top = st[sp];
            nxt = st[sp + 1];
            for (b = 0; b < nb; b++)
                top[b] = top[b] - nxt[b];
            break;
        case OP_MUL:
            sp--;
            top = st[sp];
            nxt = st[sp + 1];
            for (b = 0; b < nb; b++)
                top[b] = top[b] * nxt[b];
            break;
        case OP_DIV:
            sp--;
            top = st[sp];
            nxt = st[sp + 1];
            for (b = 0; b < nb; b++)
                if (nxt[b] == 0.0 && active[b]) {
                    *err_lane = b;
                    return ERR_DIV;
                }
            for (b = 0; b < nb; b++)
                top[b] = top[b] / nxt[b];
            break;
        case OP_POW:
            sp--;
            top = st[sp];
            nxt = st[sp + 1];
            for (b = 0; b < nb; b++) {
                const double a = top[b], e = nxt[b];
                const double r = pow(a, e);
                if (active[b]) {
                    if (isnan(r) && !(isnan(a) || isnan(e))) {
                        *err_lane = b;
                        return ERR_POW;
                    }
                    if (a == 0.0 && e < 0.0) {
                        *err_lane = b;
                        return ERR_DIV;
                    }
                }
                top[b] = r;
            }
            break;
        case OP_EXP:
            top = st[sp];
            for (b = 0; b < nb; b++)
                top[b] = exp(top[b]);
            break;
        case OP_LOG:
            top = st[sp];
            for (b = 0; b < nb; b++)
                if (!(top[b] > 0.0) && active[b] && !isnan(top[b])) {
                    *err_lane = b;
                    return ERR_LOG;
                }
            for (b = 0; b < nb; b++)
                top[b] = log(top[b]);
            break;
        case OP_SQRT:
            top = st[sp];
            for (b = 0; b < nb; b++)
                if (top[b] < 0.0 && active[b]) {
                    *err_lane = b;
                    return ERR_SQRT;
                }
            for (b = 0; b < nb; b++)
                top[b] = sqrt(top[b]);
            break;
        case OP_ABS:
            top = st[sp];
            for (b = 0; b < nb; b++)
                top[b] = fabs(top[b]);
            break;
        case OP_SIN:
            top = st[sp];
            for (b = 0; b < nb; b++)
                top[b] = sin(top[b]);
            break;
        case OP_COS:
            top = st[sp];
            for (b = 0; b < nb; b++)
                top[b] = cos(top[b]);
            break;
        case OP_MIN:
            sp--;
            top = st[sp];
            nxt = st[sp + 1];
            for (b = 0; b < nb; b++) {
                const double a = top[b], e = nxt[b];
                top[b] = (isnan(a) || isnan(e)) ? NAN : (a <= e ? a : e);
            }
            break;
        case OP_MAX:
            sp--;
            top = st[sp];
            nxt = st[sp + 1];
            for (b = 0; b < nb; b++) {
                const double a = top[b], e = nxt[b];
                top[b] = (isnan(a) || isnan(e)) ? NAN : (a >= e ? a : e);
            }
            break;
        }
    }
    memcpy(out, st[0], nb * sizeof(double));
    return 0;
}

/* One Euler-Maruyama step for a block:
 *   xn_i = x_i + mu_i*dt + sum_j sigma_ij * (sqrt(dt) * z_j)   (left to right)
 * Constant coefficients skip the VM; the arithmetic is the same.
 */
static int sfpe_em_block(const sfpe_prog *drift, const sfpe_prog *diff, int d, int m,
                         double t, double dt, double sdt, const double *restrict x,
                         double *restrict xn, const double *restrict z, int nb,
                         const int *restrict active, int64_t *lane)
{
    double buf[SFPE_BLK];
    int i, j, b, err;
    for (i = 0; i < d; i++) {
        double *restrict xi = xn + (size_t)i * SFPE_BLK;
        const double *restrict x0 = x + (size_t)i * SFPE_BLK;
        if (drift[i].is_const) {
            const double c = drift[i].cval;
            for (b = 0; b < nb; b++)
                xi[b] = x0[b] + c * dt;
        } else {
            err = sfpe_vm_block(&drift[i], t, x, d, NULL, buf, nb, active, lane);
            if (err)
                return err;
            for (b = 0; b < nb; b++)
                xi[b] = x0[b] + buf[b] * dt;
        }
        for (j = 0; j < m; j++) {
            const double *restrict zj = z + (size_t)j * SFPE_BLK;
            const sfpe_prog *p = &diff[i * m + j];
            if (p->is_const) {
                const double c = p->cval;
                for (b = 0; b < nb; b++)
                    xi[b] = xi[b] + c * (sdt * zj[b]);
            } else {
                err = sfpe_vm_block(p, t, x, d, NULL, buf, nb, active, lane);
                if (err)
                    return err;
                for (b = 0; b < nb; b++)
                    xi[b] = xi[b] + buf[b] * (sdt * zj[b]);
            }
        }
    }
    return 0;
}

/* Accept proposals for the active lanes.  status[b] receives 0 = moved,
 * 1 = left the box (clipped to its closure), 2 = escaped the guard (previous
 * state kept).  Returns nonzero if any active lane got a nonzero status. */
static int sfpe_settle_block(double *restrict x, const double *restrict xn, int nb, int d,
                             int has_box, const double *lo, const double *hi, double guard,
                             const int *restrict active, int *restrict status)
{
    int i, b, any = 0;
    for (b = 0; b < nb; b++)
        status[b] = 0;
    for (i = 0; i < d; i++) {
        const double *restrict y = xn + (size_t)i * SFPE_BLK;
        const double l = lo[i], h = hi[i];
        if (has_box) {
            for (b = 0; b < nb; b++)
                status[b] |= ((fabs(y[b]) <= guard) ? 0 : 2) | ((y[b] <= l) | (y[b] >= h));
        } else {
            for (b = 0; b < nb; b++)
                status[b] |= (fabs(y[b]) <= guard) ? 0 : 2;
        }
    }
    for (b = 0; b < nb; b++) {
        status[b] = status[b] & -active[b];
        any |= status[b];
    }
    if (!any) {
        for (i = 0; i < d; i++) {
            double *restrict xi = x + (size_t)i * SFPE_BLK;
            const double *restrict y = xn + (size_t)i * SFPE_BLK;
            for (b = 0; b < nb; b++)
                xi[b] = active[b] ? y[b] : xi[b];
        }
        return 0;
    }
    for (b = 0; b < nb; b++) {
        if (!active[b])
            continue;
        if (status[b] & 2) {
            status[b] = 2;
            continue;
        }
        for (i = 0; i < d; i++) {
            double y = xn[(size_t)i * SFPE_BLK + b];
            if (status[b])
                y = y < lo[i] ? lo[i] : (y > hi[i] ? hi[i] : y);
            x[(size_t)i * SFPE_BLK + b] = y;
        }
    }
    return 1;
}

/* Simulate lanes [p0, p0+nb) of a batch.  states (optional) is n x (M+1) x d. */
static int sfpe_sim_block(const sfpe_prog *pd, const sfpe_prog *ps, int d, int m,
                          double t0, double dt, int M, uint64_t key, int64_t path_offset,
                          int64_t step_offset, const double *x0, int has_box,
                          const double *lo, const double *hi, double guard, int64_t p0,
                          int nb, double *states, double *final, int64_t *frozen,
                          int8_t *exited, int8_t *escaped, sfpe_err *err)
{
    double x[SFPE_MAX_DIM * SFPE_BLK], xn[SFPE_MAX_DIM * SFPE_BLK], z[SFPE_MAX_DIM * SFPE_BLK];
    uint64_t pk[SFPE_BLK];
    int active[SFPE_BLK], status[SFPE_BLK];
    const double sdt = sqrt(dt);
    int b, i, j, k, nactive = nb;
    int64_t lane = 0;
    for (b = 0; b < nb; b++) {
        pk[b] = sfpe_path_key(key, (uint64_t)(path_offset + p0 + b));
        active[b] = 1;
        for (i = 0; i < d; i++) {
            x[i * SFPE_BLK + b] = x0[i];
            if (states)
                states[(p0 + b) * (int64_t)(M + 1) * d + i] = x0[i];
        }
    }
    for (k = 0; k < M && nactive > 0; k++) {
        const uint64_t base = (uint64_t)(step_offset + k) * (uint64_t)m;
        for (j = 0; j < m; j++)
            sfpe_normals_block(pk, base + j, z + (size_t)j * SFPE_BLK, nb);
        int e = sfpe_em_block(pd, ps, d, m, t0 + k * dt, dt, sdt, x, xn, z, nb, active, &lane);
        if (e) {
            err->code = e;
            err->path = p0 + lane;
            err->step = k;
            return e;
        }
        if (sfpe_settle_block(x, xn, nb, d, has_box, lo, hi, guard, active, status)) {
            for (b = 0; b < nb; b++) {
                if (!status[b])
                    continue;
                active[b] = 0;
                nactive--;
                frozen[p0 + b] = k + 1;
                if (status[b] == 1)
                    exited[p0 + b] = 1;
                else
                    escaped[p0 + b] = 1;
            }
        }
        if (states) {
            for (b = 0; b < nb; b++)
                for (i = 0; i < d; i++)
                    states[((p0 + b) * (int64_t)(M + 1) + k + 1) * d + i] = x[i * SFPE_BLK + b];
        }
    }
    if (states) {
        for (; k < M; k++)
            for (b = 0; b < nb; b++)
                for (i = 0; i < d; i++)
                    states[((p0 + b) * (int64_t)(M + 1) + k + 1) * d + i] = x[i * SFPE_BLK + b];
    }
    for (b = 0; b < nb; b++)
        for (i = 0; i < d; i++)
            final[(p0 + b) * d + i] = x[i * SFPE_BLK + b];
    return 0;
}

static inline void sfpe_locate(double q, double lo, double h, int64_t n, int64_t *idx, double *frac)
{
    double pos = (q - lo) / h;
    if (!(pos > 0.0)) {
        *idx = 0;
        *frac = 0.0;
        return;
    }
    if (pos >= (double)(n - 1)) {
        *idx = n - 2;
        *frac = 1.0;
        return;
    }
    int64_t i = (int64_t)floor(pos);
    double f = pos - (double)i;
    if (f < 1e-12) {
        f = 0.0;
    } else if (f > 1.0 - 1e-12) {
        i += 1;
        f = 0.0;
        if (i >= n - 1) {
            i = n - 2;
            f = 1.0;
        }
    }
    *idx = i;
    *frac = f;
}

/* Interpolate all nv functions at time s and the nb lane positions in x.
 * out[r*SFPE_BLK + b] receives function r at lane b.  Corners are visited in
 * the same order (bit a of the corner index selects the upper knot on axis
 * a, axis 0 being time) as the reference implementation. */
static void sfpe_interp_block(const sfpe_grid *g, double s, const double *restrict x, int nb,
                              double *restrict out)
{
    int64_t idx[SFPE_MAX_DIM][SFPE_BLK];
    double fr[SFPE_MAX_DIM][SFPE_BLK];
    int64_t off[SFPE_BLK];
    double w[SFPE_BLK];
    int64_t ti;
    double tf;
    int a, b, c, r;
    const int d = g->d;
    sfpe_locate(s, 0.0, g->tau, g->K + 1, &ti, &tf);
    for (a = 0; a < d; a++) {
        /* branch-free form of sfpe_locate */
        const double lo = g->lo[a], h = g->h[a];
        const double nmax = (double)(g->nk[a] - 1);
        const double *restrict q = x + a * SFPE_BLK;
        for (b = 0; b < nb; b++) {
            const double pos = (q[b] - lo) / h;
            double pc = pos > 0.0 ? pos : 0.0;
            pc = pc < nmax ? pc : nmax;
            double fi = floor(pc);
            double f = pc - fi;
            f = f < 1e-12 ? 0.0 : f;
            const int up = f > 1.0 - 1e-12;
            fi = up ? fi + 1.0 : fi;
            f = up ? 0.0 : f;
            const int top = fi >= nmax;
            fi = top ? nmax - 1.0 : fi;
            f = top ? 1.0 : f;
            const int neg = !(pos > 0.0);
            fi = neg ? 0.0 : fi;
            f = neg ? 0.0 : f;
            idx[a][b] = (int64_t)fi;
            fr[a][b] = f;
        }
    }
    for (r = 0; r < g->nv * SFPE_BLK; r++)
        out[r] = 0.0;
    const int ncorner = 1 << (d + 1);
    for (c = 0; c < ncorner; c++) {
        const int ct = c & 1;
        const double wt = ct ? tf : 1.0 - tf;
        const int64_t base = (ti + ct) * g->stride[0];
        for (b = 0; b < nb; b++) {
            w[b] = 1.0 * wt;
            off[b] = base;
        }
        for (a = 0; a < d; a++) {
            const int bit = (c >> (a + 1)) & 1;
            const int64_t st = g->stride[a + 1];
            const double *restrict fa = fr[a];
            const int64_t *restrict ia = idx[a];
            if (bit) {
                for (b = 0; b < nb; b++) {
                    w[b] = w[b] * fa[b];
                    off[b] += (ia[b] + 1) * st;
                }
            } else {
                for (b = 0; b < nb; b++) {
                    w[b] = w[b] * (1.0 - fa[b]);
                    off[b] += ia[b] * st;
                }
            }
        }
        for (r = 0; r < g->nv; r++) {
            const double *restrict vals = g->vals + r * g->size;
            double *restrict o = out + r * SFPE_BLK;
            for (b = 0; b < nb; b++)
                o[b] = o[b] + w[b] * vals[off[b]];
        }
    }
}

/* Estimate [Phi(v_r)](t0, x0) for the nv grid functions in g sharing one set
 * of paths.  f_mode: 0 = f is identically zero, 1 = f ignores v, 2 = f uses v.
 * mean/m2 receive Welford accumulators over paths taken in index order; with
 * diffs set, slots nv .. 2nv-2 also accumulate the paired differences
 * c_r - c_0 (r >= 1). */
static int sfpe_phi_node(const sfpe_prog *pd, const sfpe_prog *ps, const sfpe_prog *pf,
                         const sfpe_prog *pg, int d, int m, int f_mode, int trap, double t0,
                         double T, int M, int64_t n, uint64_t key, const sfpe_grid *g,
                         int has_box, const double *lo, const double *hi, double guard,
                         const double *x0, int diffs, double *mean, double *m2, sfpe_err *err)
{
    const int nv = g->nv;
    const int nout = diffs ? 2 * nv - 1 : nv;
    const double dt = (T - t0) / M;
    const double sdt = sqrt(dt);
    double x[SFPE_MAX_DIM * SFPE_BLK], xn[SFPE_MAX_DIM * SFPE_BLK], z[SFPE_MAX_DIM * SFPE_BLK];
    double fv[SFPE_BLK], gx[SFPE_BLK];
    uint64_t pk[SFPE_BLK];
    int active[SFPE_BLK], all[SFPE_BLK], status[SFPE_BLK];
    double *acc = (double *)malloc((size_t)nv * SFPE_BLK * sizeof(double));
    double *vv = (double *)malloc((size_t)nv * SFPE_BLK * sizeof(double));
    int64_t p0, lane = 0, cnt = 0;
    int b, i, j, k, r, e = 0;
    for (r = 0; r < nout; r++) {
        mean[r] = 0.0;
        m2[r] = 0.0;
    }
    for (b = 0; b < SFPE_BLK; b++)
        all[b] = 1;
    for (p0 = 0; p0 < n; p0 += SFPE_BLK) {
        const int nb = (int)((n - p0) < SFPE_BLK ? (n - p0) : SFPE_BLK);
        for (b = 0; b < nb; b++) {
            pk[b] = sfpe_path_key(key, (uint64_t)(p0 + b));
            active[b] = 1;
            for (i = 0; i < d; i++)
                x[i * SFPE_BLK + b] = x0[i];
        }
        for (r = 0; r < nv * SFPE_BLK; r++)
            acc[r] = 0.0;
        for (k = 0; k <= M; k++) {
            const double t = k < M ? t0 + k * dt : T;
            if (f_mode && (k < M || trap)) {
                const double wk = (trap && (k == 0 || k == M)) ? 0.5 : 1.0;
                if (f_mode == 2) {
                    sfpe_interp_block(g, t, x, nb, vv);
                    for (r = 0; r < nv; r++) {
                        e = sfpe_vm_block(pf, t, x, d, vv + r * SFPE_BLK, fv, nb, all, &lane);
                        if (e)
                            goto fail;
                        double *restrict ar = acc + r * SFPE_BLK;
                        for (b = 0; b < nb; b++)
                            ar[b] = ar[b] + wk * fv[b];
                    }
                } else {
                    e = sfpe_vm_block(pf, t, x, d, NULL, fv, nb, all, &lane);
                    if (e)
                        goto fail;
                    for (r = 0; r < nv; r++) {
                        double *restrict ar = acc + r * SFPE_BLK;
                        for (b = 0; b < nb; b++)
                            ar[b] = ar[b] + wk * fv[b];
                    }
                }
            }
            if (k == M)
                break;
            const uint64_t base = (uint64_t)k * (uint64_t)m;
            for (j = 0; j < m; j++)
                sfpe_normals_block(pk, base + j, z + (size_t)j * SFPE_BLK, nb);
            e = sfpe_em_block(pd, ps, d, m, t, dt, sdt, x, xn, z, nb, active, &lane);
            if (e)
                goto fail;
            if (sfpe_settle_block(x, xn, nb, d, has_box, lo, hi, guard, active, status)) {
                for (b = 0; b < nb; b++) {
                    if (status[b] == 2) {
                        e = ERR_ESCAPE;
                        lane = b;
                        k = k + 1;
                        goto fail;
                    }
                    if (status[b] == 1)
                        active[b] = 0;
                }
            }
        }
        k = M;
        e = sfpe_vm_block(pg, T, x, d, NULL, gx, nb, all, &lane);
        if (e)
            goto fail;
        for (b = 0; b < nb; b++) {
            const double c0 = gx[b] + dt * acc[b];
            cnt++;
            for (r = 0; r < nout; r++) {
                double c;
                if (r < nv)
                    c = gx[b] + dt * acc[r * SFPE_BLK + b];
                else
                    c = (gx[b] + dt * acc[(r - nv + 1) * SFPE_BLK + b]) - c0;
                const double delta = c - mean[r];
                mean[r] = mean[r] + delta / (double)cnt;
                m2[r] = m2[r] + delta * (c - mean[r]);
            }
        }
    }
    free(acc);
    free(vv);
    return 0;
fail:
    err->code = e;
    err->path = p0 + lane;
    err->step = k;
    free(acc);
    free(vv);
    return e;
}

#endif
