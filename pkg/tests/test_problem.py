import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfpe.problem import (FAMILIES, Domain, ProblemError, TruncationSet, audit_lipschitz, build,
                          coefficient_lipschitz, family_expressions, growth_constant, membership)

BASE = {"T": 1.0, "f": "v", "g": "norm2", "L": 1.0}


def test_build_explicit_coefficients():
    p = build({**BASE, "d": 2, "drift": ["-x1", "x2 * t"], "diffusion": [["1", "0"], ["0", "2"]]})
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(p.mu(0.5, x), [[-1.0, 1.0]])
    np.testing.assert_array_equal(p.sigma(0.5, x)[0], [[1.0, 0.0], [0.0, 2.0]])
    assert p.time_dependent and p.f_uses_v and not p.f_is_zero


@pytest.mark.parametrize("cfg,key", [
    ({"T": 1.0, "f": "v", "g": "1", "family": "brownian"}, "L"),
    ({**BASE, "family": "nope"}, "family"),
    ({**BASE}, "drift"),
    ({**BASE, "family": "brownian", "drift": ["0"]}, "family"),
    ({**BASE, "d": 1, "drift": ["0", "0"], "diffusion": ["1"]}, "drift"),
    ({**BASE, "drift": ["0", "0"], "diffusion": ["1"]}, "diffusion"),
    ({**BASE, "family": "brownian", "g": "v"}, "g"),
    ({**BASE, "family": "brownian", "T": -1.0}, "T"),
    ({**BASE, "family": "brownian", "domain": "moon"}, "domain"),
])
def test_build_errors_name_key(cfg, key):
    with pytest.raises(ProblemError) as info:
        build(cfg)
    assert str(info.value).startswith(key)


def test_box_domain():
    p = build({**BASE, "family": "brownian", "d": 2,
               "domain": {"kind": "axis-box", "lo": [-1, -1], "hi": [1, 2]}})
    assert p.domain.is_box
    assert p.domain.contains(np.array([0.0, 1.9]))
    assert not p.domain.contains(np.array([0.0, 2.0]))


def test_truncation_membership():
    full = Domain("full-space")
    assert membership(TruncationSet(2.0, full), np.array([1.0, 1.0]))
    assert not membership(TruncationSet(1.0, full), np.array([1.0, 1.0]))
    box = Domain("axis-box", (0.0,), (1.0,))
    # the ball of radius 1/r around x must fit in the box
    assert membership(TruncationSet(4.0, box), np.array([0.5]))
    assert not membership(TruncationSet(4.0, box), np.array([0.1]))


@given(st.floats(0.1, 20), st.floats(0.1, 20),
       st.lists(st.floats(-30, 30), min_size=3, max_size=3))
def test_truncation_sets_nested(r1, r2, x):
    r1, r2 = min(r1, r2), max(r1, r2)
    full = Domain("full-space")
    x = np.array(x)
    if membership(TruncationSet(r1, full), x):
        assert membership(TruncationSet(r2, full), x)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("f,L", [("v", 1.0), ("-3*v", 3.0), ("sin(v) + x1", 1.0), ("min(v, 1)", 1.0)])
def test_families_pass_lipschitz_audit(family, f, L):
    p = build({"family": family, "d": 2, "T": 1.0, "f": f, "g": "norm2", "L": L})
    rep = audit_lipschitz(p, 2000, seed=5)
    assert not rep.violation, rep


def test_audit_flags_understated_L():
    p = build({**BASE, "family": "brownian", "f": "2*v"})
    rep = audit_lipschitz(p, 500, seed=1)
    assert rep.violation and rep.max_ratio == pytest.approx(2.0)


@pytest.mark.parametrize("family", FAMILIES)
def test_growth_constant_is_an_upper_bound(family):
    p = build({"family": family, "d": 2, "T": 1.0, "f": "0", "g": "1", "L": 1.0})
    assert growth_constant(p, 5000, seed=3) <= p.growth_c * (1 + 1e-12)


@pytest.mark.parametrize("family", ["brownian", "ou", "gbm", "ou-truncated"])
def test_coefficient_lipschitz_below_analytic(family):
    p = build({"family": family, "d": 2, "T": 1.0, "f": "0", "g": "1", "L": 1.0})
    assert coefficient_lipschitz(p, 20000, seed=2) <= p.coef_lipschitz * (1 + 1e-6) + 1e-12


def test_truncated_ou_support():
    p = build({"family": "ou-truncated", "d": 2, "T": 1.0, "f": "0", "g": "1", "L": 1.0, "radius": 5.0})
    far = np.array([[5.0, 0.0], [4.0, 4.0], [10.0, 0.0]])
    assert np.all(p.mu(0.0, far) == 0.0) and np.all(p.sigma(0.0, far) == 0.0)
    assert np.all(p.sigma(0.0, np.array([[0.0, 0.0]]))[0].diagonal() > 0)


def test_family_expressions_shapes():
    drift, diff = family_expressions("ou", d=3, theta=2.0)
    assert len(drift) == 3 and len(diff) == 3 and all(len(r) == 3 for r in diff)
    p = build({"family": "ou", "d": 3, "theta": 2.0, "T": 1.0, "f": "0", "g": "1", "L": 1.0})
    assert p.growth_c > 0 and p.coef_lipschitz == pytest.approx(2.0)
