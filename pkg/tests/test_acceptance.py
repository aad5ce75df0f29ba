"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are
collected in the "acceptance criteria" section of the terminal summary.
"""
import math
import os
import sys

import numpy as np
import pytest

from sfpe import build, oracle
from sfpe.grid import GridFunction, GridSpec
from sfpe.lyapunov import check_generator, from_expression, polynomial_lyapunov, supermartingale_test
from sfpe.sde import BrownianDriver, coupling_locality, freeze_at_rest, stability_gap
from sfpe.solver import (McConfig, contraction_ratio, contraction_sweep, nested_estimate, picard_solve,
                         weighted_norm)

pytestmark = pytest.mark.slow

LAPTOP_CORES = 4
HEAT_SEED = 20240601
CORES = os.cpu_count() or 1
# the criterion 1 run uses up to LAPTOP_CORES threads; criterion 8 repeats it with the other count
THREADS_A = min(LAPTOP_CORES, CORES)
THREADS_B = 4 if THREADS_A == 1 else 1


def heat_problem(d):
    return build({"family": "brownian", "d": d, "T": 1.0, "f": "0", "g": "norm2", "L": 1.0})


def heat_grid(d):
    return GridSpec(1.0, 10, (-4.0,) * d, (4.0,) * d, (41,) * d)


_HEAT = {}


def heat_run(d, threads):
    key = (d, threads)
    if key not in _HEAT:
        p = heat_problem(d)
        rep = picard_solve(p, polynomial_lyapunov(2.0, p.growth_c, d), heat_grid(d),
                           McConfig(20000, 50, HEAT_SEED), tol=1e-3, max_iter=10, residual=False,
                           threads=threads)
        _HEAT[key] = rep
    return _HEAT[key]


# ---------------------------------------------------------------- 1

@pytest.mark.parametrize("d", [1, 2])
def test_c1_heat_oracle(d, criterion):
    rep = heat_run(d, THREADS_A)
    t, x = rep.u.nodes()
    scaled = np.abs(rep.u.flat() - oracle.heat_quadratic(t, x, d, 1.0)) / (1.0 + (x * x).sum(axis=1))
    err = float(scaled.max())
    # node-level work splits evenly over threads, so the wall time scales with the core count
    projected = rep.wall * THREADS_A / LAPTOP_CORES
    ok = rep.converged and err <= 0.05 and projected <= 120.0
    criterion(1, ok, f"d={d}: max |u-u*|/(1+|x|^2) = {err:.4f} (<= 0.05); wall {rep.wall:.1f}s on "
                     f"{THREADS_A} thread(s) of {CORES} core(s), {projected:.1f}s at {LAPTOP_CORES} cores (<= 120s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_c2_linear_duhamel(criterion):
    p = build({"family": "brownian", "d": 1, "T": 1.0, "f": "v", "g": "norm2", "L": 1.0})
    rep = picard_solve(p, polynomial_lyapunov(2.0, 1.0, 1), heat_grid(1), McConfig(20000, 50, 7),
                       lam=2.0, tol=1e-3, max_iter=30, residual=False)
    u00 = rep.u(0.0, np.array([0.0]))
    err = abs(u00 - math.e)
    n_it = len(rep.iterations)
    ok = rep.converged and err <= 0.08 and n_it <= 14
    criterion(2, ok, f"u(0,0) = {u00:.5f}, |u-e| = {err:.4f} (<= 0.08); converged in {n_it} iterations (<= 14); "
                     f"deltas {', '.join(f'{v:.3g}' for v in rep.deltas)}")
    assert ok


# ---------------------------------------------------------------- 3

CONTRACTION_SEEDS = (101, 202, 303, 404, 505)


def test_c3_contraction(criterion):
    p = build({"family": "brownian", "d": 1, "T": 1.0, "f": "v", "g": "norm2", "L": 1.0})
    V = polynomial_lyapunov(2.0, 1.0, 1)
    spec = GridSpec(1.0, 50, (-4.0,), (4.0,), (21,))
    rows = []
    for seed in CONTRACTION_SEEDS:
        (_, r2, _), (_, r20, _) = contraction_sweep(
            p, V, [2.0, 20.0], McConfig(10000, 50, seed, quadrature="trapezoid"), spec)
        rows.append((r2, r20))
    worst2 = max(r[0] for r in rows)
    worst20 = max(r[1] for r in rows)
    # deterministic dynamics: no Monte-Carlo slack at all
    q = build({"d": 1, "T": 1.0, "drift": ["0"], "diffusion": ["0"], "f": "v", "g": "1", "L": 1.0})
    one = from_expression("1", 1, rho=0.0)
    dspec = GridSpec(1.0, 10, (-1.0,), (1.0,), (3,))
    v = GridFunction.from_function(dspec, lambda t, x: np.exp(-2.0 * t) * np.ones(len(x)))
    rdet = contraction_ratio(q, v, GridFunction.zeros(dspec), one, 2.0, McConfig(1, 50))
    ok = worst2 <= 0.55 and worst20 <= 0.06 and rdet <= 0.5
    criterion(3, ok, f"5 seeds, lambda=2L max ratio {worst2:.4f} (<= 0.55), lambda=20L max {worst20:.4f} "
                     f"(<= 0.06); deterministic {rdet:.4f} (<= 0.5)")
    assert ok


# ---------------------------------------------------------------- 4

def test_c4_lyapunov_chain(criterion):
    import time
    start = time.perf_counter()
    failures = []
    count = 0
    for family in ("brownian", "ou"):
        p = build({"family": family, "d": 2, "T": 1.0, "f": "0", "g": "0", "L": 1.0})
        for pw in (0.5, 1.0, 2.0, 4.0):
            V = polynomial_lyapunov(pw, 1.0, 2)
            gen = check_generator(p, V, 10000, seed=41)
            if gen.violation:
                failures.append(f"{family} p={pw}: generator at {gen.worst_point}")
            for i, (t, x, s) in enumerate([(0.0, [0.0, 0.0], 1.0), (0.0, [2.0, 2.0], 1.0), (0.5, [0.0, 0.0], 1.0)]):
                r = supermartingale_test(p, V, t, x, s, 100, 100000, BrownianDriver(43, i))
                count += 1
                if not r.passed:
                    failures.append(f"{family} p={pw} (t,x,s)=({t},{x},{s}): margin {r.margin:.3g}")
    wall = time.perf_counter() - start
    ok = not failures and wall <= 180.0
    criterion(4, ok, f"8 generator checks x 1e4 points, {count} supermartingale tests x 1e5 paths; "
                     f"{len(failures)} failure(s); {wall:.1f}s (<= 180s)" + (f"; {failures}" if failures else ""))
    assert ok


# ---------------------------------------------------------------- 5

def test_c5_exact_locality(criterion):
    common = {"d": 1, "T": 1.0, "f": "0", "g": "0", "L": 1.0}
    p1 = build({**common, "drift": ["-x1 + max(0, norm2 - 4)"], "diffusion": ["1"]})
    p2 = build({**common, "drift": ["-x1"], "diffusion": ["1"]})
    cp = coupling_locality(p1, p2, 2.0, 0.0, [0.0], 1000, 1000, BrownianDriver(11))
    pf = build({**common, "drift": ["x1 * max(0, 1 - norm2)"], "diffusion": ["max(0, 1 - norm2)"]})
    fz = freeze_at_rest(pf, 0.0, [3.0], 1000, 1000, BrownianDriver(5))
    ok = cp.exact and fz.exact
    criterion(5, ok, f"coupling max diff inside |x|<=2: {cp.max_diff_inside!r} ({cp.paths_left_region} paths left); "
                     f"freeze max deviation {fz.max_deviation!r}; 1e3 paths x 1e3 steps")
    assert ok


# ---------------------------------------------------------------- 6

def test_c6_stability_bound(criterion):
    p = build({"family": "ou-truncated", "d": 2, "T": 1.0, "f": "0", "g": "0", "L": 1.0, "radius": 5.0})
    parts = []
    ok = True
    for start2 in [(0.0, [0.1, 0.0]), (0.05, [0.0, 0.0])]:
        for s in (0.5, 1.0):
            r = stability_gap(p, (0.0, [0.0, 0.0]), start2, s, 1000, 100000, BrownianDriver(61))
            ok = ok and r.holds
            parts.append(f"(t',x')={start2} s={s}: {r.gap:.3g} <= {r.bound:.3g}")
    criterion(6, ok, f"empirical coefficient Lipschitz {r.L_coef:.4f}; " + "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 7

def test_c7_nested_exact(criterion):
    p = build({"d": 1, "T": 1.0, "drift": ["0"], "diffusion": ["0"], "f": "v", "g": "1", "L": 1.0})
    ests = [nested_estimate(p, 0.0, [0.0], 4, (1, 2), seed=s).estimate for s in (0, 1, 7, 2 ** 40)]
    exact = 65.0 / 24.0
    same = len({e.hex() for e in ests}) == 1
    ok = same and abs(ests[0] - exact) <= 2 * sys.float_info.epsilon * exact
    criterion(7, ok, f"depth 4 -> {ests[0]!r} (65/24 = {exact!r}); identical across 4 seeds: {same}")
    assert ok


# ---------------------------------------------------------------- 8

@pytest.mark.parametrize("d", [1, 2])
def test_c8_determinism(d, criterion):
    a = heat_run(d, THREADS_A).u.to_csv()
    b = heat_run(d, THREADS_B).u.to_csv()
    ok = a.encode() == b.encode()
    criterion(8, ok, f"d={d}: solution CSV ({len(a)} bytes) identical for threads {THREADS_A} and {THREADS_B}: {ok}")
    assert ok


# ---------------------------------------------------------------- 9

def test_c9_norm_family(criterion):
    gen = np.random.default_rng(9)
    bad = 0
    for _ in range(1000):
        d = int(gen.integers(1, 3))
        K = int(gen.integers(1, 8))
        n = tuple(int(k) for k in gen.integers(2, 6, d))
        T = float(gen.uniform(0.1, 3.0))
        spec = GridSpec(T, K, (-3.0,) * d, (3.0,) * d, n)
        vals = gen.standard_normal((K + 1,) + n) * 10.0 ** gen.uniform(-3, 3)
        u = GridFunction(spec, vals)
        V = polynomial_lyapunov(float(gen.choice([0.5, 1.0, 2.0, 4.0])), 1.0, d)
        nu, lam = sorted(gen.uniform(0.0, 5.0, 2))
        a, b = weighted_norm(u, V, nu), weighted_norm(u, V, lam)
        if not (a <= b * (1 + 1e-12) and b <= math.exp((lam - nu) * T) * a * (1 + 1e-12)):
            bad += 1
    ok = bad == 0
    criterion(9, ok, f"1000 random grid functions, 0 <= nu <= lambda <= 5: {bad} violation(s)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
