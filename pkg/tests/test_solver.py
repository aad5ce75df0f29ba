import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfpe import build, oracle
from sfpe.expr import EvalDomainError
from sfpe.grid import GridFunction, GridSpec
from sfpe.lyapunov import from_expression, polynomial_lyapunov
from sfpe.sde import PathExplosion
from sfpe.solver import (McConfig, SolverDivergence, WorkCapExceeded, apply_phi, contraction_ratio,
                         contraction_sweep, decay_diagnostic, default_grid, nested_estimate,
                         picard_solve, tilted_direction, weighted_norm)

SMALL = GridSpec(1.0, 5, (-3.0,), (3.0,), (13,))


def problem(f="v", g="norm2", family="brownian", d=1, L=1.0, **kw):
    return build({"family": family, "d": d, "T": 1.0, "f": f, "g": g, "L": L, **kw})


def V2(d=1):
    return polynomial_lyapunov(2.0, 1.0, d)


# --------------------------------------------------------------- norms

def test_weighted_norm_value():
    V = from_expression("1 + norm2", 1, rho=0.0)
    spec = GridSpec(1.0, 2, (-1.0,), (1.0,), (3,))
    vals = np.zeros((3, 3))
    vals[1, 2] = 4.0      # t = 0.5, x = 1
    u = GridFunction(spec, vals)
    assert weighted_norm(u, V, 2.0) == pytest.approx(math.exp(1.0) * 4.0 / 2.0, rel=1e-15)


def test_weighted_norm_large_lambda_uses_log_form():
    V = from_expression("1", 1, rho=0.0)
    spec = GridSpec(1.0, 1, (-1.0,), (1.0,), (2,))
    u = GridFunction(spec, np.array([[0.0, 0.0], [1e-300, 0.0]]))
    assert weighted_norm(u, V, 700.0) == pytest.approx(math.exp(700.0 + math.log(1e-300)), rel=1e-12)


_grids = st.builds(
    lambda K, n, T: GridSpec(T, K, (-2.0,), (2.0,), (n,)),
    st.integers(1, 6), st.integers(2, 7), st.floats(0.1, 3.0))


@given(_grids, st.data(), st.floats(0, 5), st.floats(0, 5))
def test_norm_family_inequalities(spec, data, a, b):
    nu, lam = min(a, b), max(a, b)
    vals = data.draw(st.lists(st.floats(-1e6, 1e6), min_size=(spec.K + 1) * spec.n[0],
                              max_size=(spec.K + 1) * spec.n[0]))
    u = GridFunction(spec, np.array(vals).reshape(spec.K + 1, spec.n[0]))
    V = V2()
    n_nu, n_lam = weighted_norm(u, V, nu), weighted_norm(u, V, lam)
    assert n_nu <= n_lam * (1 + 1e-12)
    assert n_lam <= math.exp((lam - nu) * spec.T) * n_nu * (1 + 1e-12)


# --------------------------------------------------------------- Phi

def test_first_iterate_is_feynman_kac():
    p = problem(f="0")
    u = apply_phi(p, GridFunction.zeros(SMALL), McConfig(20000, 20, seed=1))
    t, x = u.nodes()
    exact = oracle.heat_quadratic(t, x, 1, 1.0)
    assert np.all(np.abs(u.flat() - exact) <= 0.05 * (1 + (x * x).sum(axis=1)))
    # terminal level is g itself
    np.testing.assert_array_equal(u.values[-1], SMALL.axes[0] ** 2)


@pytest.mark.parametrize("case", [oracle.heat_case(), oracle.linear_case(1.0), oracle.exponential_case([0.5])])
def test_oracle_fixed_point_residual(case):
    p = build(case.config)
    # wide box so that clamping at its surface does not reach the checked nodes
    spec = GridSpec(1.0, 5, (-6.0,), (6.0,), (49,))
    u_star = GridFunction.from_function(spec, case.solution)
    mc = McConfig(20000, 100, seed=3, quadrature="trapezoid")
    img, se = apply_phi(p, u_star, mc, return_se=True)
    err = np.abs(img.flat() - u_star.flat())
    t, x = u_star.nodes()
    inner = np.abs(x[:, 0]) <= 2.0
    # MC noise plus time-quadrature and interpolation error (linear-f case)
    allow = 5 * se.flat() + 0.02 * (1 + np.abs(u_star.flat()))
    assert np.all(err[inner] <= allow[inner]), float((err - allow)[inner].max())


def test_phi_streams_scheduling_independent():
    p = problem()
    v = GridFunction.from_function(SMALL, lambda t, x: x[:, 0])
    a = apply_phi(p, v, McConfig(500, 10, seed=7), threads=1)
    b = apply_phi(p, v, McConfig(500, 10, seed=7), threads=3)
    assert a.values.tobytes() == b.values.tobytes()
    c = apply_phi(p, v, McConfig(500, 10, seed=7, stream=1))
    assert not np.array_equal(a.values, c.values)


def test_phi_reports_domain_error():
    p = problem(f="log(v)", L=1.0)
    with pytest.raises(EvalDomainError, match="node"):
        apply_phi(p, GridFunction.zeros(SMALL), McConfig(10, 5))


def test_phi_raises_on_escape():
    p = build({"d": 1, "T": 1.0, "drift": ["x1 * x1 * x1"], "diffusion": ["1"], "f": "0", "g": "1", "L": 1.0})
    with pytest.raises(PathExplosion):
        apply_phi(p, GridFunction.zeros(SMALL), McConfig(10, 50))


# --------------------------------------------------------------- contraction

@pytest.mark.parametrize("family", ["brownian", "ou", "double-well"])
def test_contraction_at_twice_L(family):
    p = problem(family=family, f="v")
    V = polynomial_lyapunov(2.0, p.growth_c)
    lam = 2.0 * p.L
    v = tilted_direction(SMALL, V, lam)
    w = GridFunction.zeros(SMALL)
    ratio, se = contraction_ratio(p, v, w, V, lam, McConfig(4000, 40, seed=2, quadrature="trapezoid"),
                                  return_se=True)
    assert ratio <= 0.5 + 5 * se


def test_contraction_deterministic_exact():
    p = build({"d": 1, "T": 1.0, "drift": ["0"], "diffusion": ["0"], "f": "v", "g": "1", "L": 1.0})
    V = from_expression("1", 1, rho=0.0)
    spec = GridSpec(1.0, 10, (-1.0,), (1.0,), (3,))
    v = GridFunction.from_function(spec, lambda t, x: np.exp(-2.0 * t) * np.ones(len(x)))
    ratio, se = contraction_ratio(p, v, GridFunction.zeros(spec), V, 2.0, McConfig(1, 10), return_se=True)
    assert se == 0.0 and ratio <= 0.5


def test_sweep_matches_pairwise_ratio():
    p = problem()
    V = V2()
    mc = McConfig(1000, 20, seed=4)
    sweep = contraction_sweep(p, V, [2.0, 6.0], mc, SMALL)
    for lam, r, _ in sweep:
        direct = contraction_ratio(p, tilted_direction(SMALL, V, lam), GridFunction.zeros(SMALL), V, lam, mc)
        assert r == pytest.approx(direct, rel=1e-12)
    assert sweep[1][1] < sweep[0][1]


# --------------------------------------------------------------- Picard

def test_picard_geometric_convergence_and_residual():
    p = problem()
    V = V2()
    mc = McConfig(4000, 40, seed=5)
    rep = picard_solve(p, V, SMALL, mc, tol=1e-3, max_iter=20)
    assert rep.converged and rep.lam == 2.0
    floor = 10 * rep.tol
    for prev, cur in zip(rep.deltas, rep.deltas[1:]):
        if prev > floor:
            assert cur <= 0.6 * prev
    assert rep.residual <= 2 * rep.tol + 3 * rep.residual_se
    # coarse grid (5 time knots, left quadrature): only a loose sanity check here
    u00 = rep.u(0.0, np.array([0.0]))
    assert abs(u00 - math.e) < 0.3


def test_picard_order_independent():
    p = problem()
    mc = McConfig(300, 10, seed=6)
    a = picard_solve(p, V2(), SMALL, mc, max_iter=4, residual=False, threads=1)
    b = picard_solve(p, V2(), SMALL, mc, max_iter=4, residual=False, threads=2)
    assert a.u.values.tobytes() == b.u.values.tobytes()
    assert a.to_dict(timing=False) == b.to_dict(timing=False)


def test_picard_shortcut_when_f_ignores_v():
    p = problem(f="x1")
    rep = picard_solve(p, V2(), SMALL, McConfig(200, 10), residual=False)
    assert rep.converged and len(rep.iterations) == 2
    assert rep.iterations[1].shortcut and rep.iterations[1].delta == 0.0


def test_picard_max_iter_reports_not_converged():
    p = problem()
    rep = picard_solve(p, V2(), SMALL, McConfig(200, 10), tol=1e-12, max_iter=2, residual=False)
    assert not rep.converged and len(rep.iterations) == 2


def test_picard_divergence_detected():
    p = problem(f="10*v", L=10.0)
    with pytest.raises(SolverDivergence):
        picard_solve(p, V2(), SMALL, McConfig(200, 10), lam=1.0, max_iter=30, residual=False)


def test_default_grid_box():
    g = default_grid(problem(family="brownian", d=2, sigma=0.5))
    assert g.lo == (-3.0, -3.0) and g.hi == (3.0, 3.0) and g.n == (41, 41)
    with pytest.raises(ValueError):
        default_grid(problem(d=4))


# --------------------------------------------------------------- nested

def deterministic():
    return build({"d": 1, "T": 1.0, "drift": ["0"], "diffusion": ["0"], "f": "v", "g": "1", "L": 1.0})


@pytest.mark.parametrize("depth", range(0, 6))
def test_nested_matches_picard_polynomial(depth):
    est = nested_estimate(deterministic(), 0.0, [0.0], depth, (1, 3), seed=1)
    want = 0.0 if depth == 0 else oracle.picard_polynomial(0.0, depth + 1)
    assert est.estimate == pytest.approx(want, rel=1e-14, abs=0)


@given(st.integers(0, 2 ** 40))
def test_nested_deterministic_seed_free(seed):
    a = nested_estimate(deterministic(), 0.25, [0.3], 3, (1, 2), seed=seed).estimate
    b = nested_estimate(deterministic(), 0.25, [0.3], 3, (1, 2), seed=0).estimate
    assert a == b


def test_nested_heat_unbiased():
    p = problem(f="0")
    est = nested_estimate(p, 0.0, [1.0], 1, (40000, 1), seed=2, M=10)
    assert abs(est.estimate - 2.0) < 4 * math.sqrt(2.0 / 40000) * 2
    assert est.work == 40000 * 10


def test_nested_uniform_time_nodes():
    # U_2(s) = 2 - s exactly, so the outer level averages 1 + (2 - S_j) - 1 over uniform S_j
    est = nested_estimate(deterministic(), 0.0, [0.0], 2, [(1, 400), (1, 10), (1, 1)], seed=3,
                          time_nodes="uniform")
    assert abs(est.estimate - 2.5) < 4 * math.sqrt(1 / 12 / 400)


def test_nested_work_cap():
    with pytest.raises(WorkCapExceeded, match="cap"):
        nested_estimate(problem(), 0.0, [0.0], 3, (100, 10), seed=1, max_work=10 ** 5)


def test_nested_per_level_widths():
    est = nested_estimate(deterministic(), 0.0, [0.0], 1, [(1, 2), (1, 1)], seed=1)
    assert est.widths == ((1, 2), (1, 1)) and est.estimate == pytest.approx(2.0)
    with pytest.raises(ValueError):
        nested_estimate(deterministic(), 0.0, [0.0], 2, [(1, 2)], seed=1)


# --------------------------------------------------------------- diagnostics

def test_decay_diagnostic_shells():
    V = from_expression("1 + norm2", 1, rho=0.0)
    u = GridFunction.from_function(SMALL, lambda t, x: 1 + (x * x).sum(axis=1))
    out = decay_diagnostic(u, V, [0.5, 1.5, 10.0, 20.0])
    assert [r for r, _ in out] == [0.5, 1.5, 10.0, 20.0]
    assert all(v == pytest.approx(1.0) for _, v in out[:3])
    assert math.isnan(out[3][1])
