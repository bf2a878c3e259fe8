from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfbsde.assumptions import (LambdaSearchConfig, check_A2, check_A3, check_B1, check_B2, compute_constants,
                                diff_quotients)
from mfbsde.problem import EXAMPLE3_DEFAULT, preset_example1, preset_example2, preset_example3, zero_spec

# quarter-grid points keep increments far from underflow
finite = st.integers(-20, 20).map(lambda k: k / 4)


def test_coincident_pair_is_zero():
    for spec in (preset_example2(-1.0, 0.5, 0.5, 0.5, 1.0), preset_example3(EXAMPLE3_DEFAULT)):
        q = diff_quotients(spec, 0.3, (0.0, np.zeros(1)), (0.0, np.zeros(1)))
        for v in (q.b3, q.b4, q.f3, q.f4, q.h2q):
            assert np.all(np.asarray(v) == 0)


def test_example1_quotients():
    alpha, lam, theta = 0.7, 0.4, 0.3
    s = preset_example1(alpha, lam, theta, 1.0)
    q = diff_quotients(s, 0.5, (1.0, np.array([1.0])), (0.0, np.array([0.0])))
    assert q.b3 == pytest.approx(0.0) and q.b4[0] == pytest.approx(alpha)
    assert q.f3[0] == pytest.approx(lam) and q.f4[0, 0] == pytest.approx(0.0) and q.h2q[0] == pytest.approx(theta)


@settings(max_examples=60, deadline=None)
@given(finite, finite, finite, finite)
def test_affine_quotients_are_constant_and_symmetric(x1, y1, x2, y2):
    s = preset_example3(EXAMPLE3_DEFAULT)
    th1, th2 = (x1, np.array([y1])), (x2, np.array([y2]))
    a = diff_quotients(s, 0.4, th1, th2)
    b = diff_quotients(s, 0.4, th2, th1)
    ref = diff_quotients(s, 0.4, (1.0, np.array([1.0])), (0.0, np.array([0.0])))
    for name in ("b3", "b4", "f3", "f4", "h2q"):
        va, vb, vr = (np.asarray(getattr(q, name)) for q in (a, b, ref))
        assert np.allclose(va, vb, atol=1e-9)
        # a coordinate with no increment contributes a zero quotient
        mask = {"b3": x1 != x2, "f3": x1 != x2, "h2q": x1 != x2}.get(name, y1 != y2)
        if mask:
            assert np.allclose(va, vr, atol=1e-9)
        assert np.all(np.abs(va) <= s.K * (1 + 1e-9))


def test_quotients_approach_derivatives():
    def b0(t, xb, yb):
        return np.sin(xb) + np.tanh(yb[..., 0])

    s = preset_example1(-1.0, 1.0, 1.0, 1.0).replace(b0=b0, b0_grad=None)
    x, y = 0.3, 0.2
    errs = []
    for h in (1e-2, 5e-3):
        q = diff_quotients(s, 0.0, (x + h, np.array([y + h])), (x, np.array([y])))
        errs.append(abs(q.b3 - math.cos(x)) + abs(q.b4[0] - (1 - math.tanh(y) ** 2)))
    assert errs[1] < 0.6 * errs[0]


def test_diff_quotients_range_and_finiteness():
    s = zero_spec()
    with pytest.raises(ValueError):
        diff_quotients(s, 2.0, (0.0, np.zeros(1)), (1.0, np.zeros(1)))
    bad = s.replace(b0=lambda t, xb, yb: np.full(np.shape(xb), np.nan))
    with pytest.raises(Exception, match="b0"):
        diff_quotients(bad, 0.0, (0.0, np.zeros(1)), (1.0, np.zeros(1)))


def test_constants_arithmetic():
    c = compute_constants(n=1, K=1.0, T=1.0)
    assert c.M == pytest.approx(4 * math.e ** 4, rel=1e-14)
    assert c.delta == pytest.approx(1 / (8 * math.e ** 4 * (48 * math.e ** 8 + 4)), rel=1e-12)
    assert c.eps == pytest.approx(1 / (9 * math.e ** 4), rel=1e-14)
    assert c.m == math.ceil(1.0 / c.delta)
    assert c.lip_interval == pytest.approx(2 * (c.M ** 2 + 1))
    assert c.log_lip_global == pytest.approx(c.m * math.log(c.lip_interval))
    assert math.isinf(c.lip_global)
    for v in (c.M, c.delta, c.eps, c.eps_tilde, c.lip_interval):
        assert v > 0
    lam = compute_constants(n=1, K=1.0, T=1.0, lam=100.0)
    assert lam.M_bar == pytest.approx(max(100.0, 5 * math.e ** 4))
    assert lam.delta_bar == pytest.approx(1 / (2 * lam.M_bar * (3 * lam.M_bar ** 2 + 4)))


def test_constants_small_K():
    c = compute_constants(n=1, K=1e-12, T=1.0)
    assert c.M > 0 and c.m == 1 and math.isfinite(c.lip_global)


def test_A2_patterns():
    r = check_A2(preset_example1(-1.0, 0.5, 0.5, 1.0))
    assert r.passed and r.pattern == ["(i)"]
    assert check_A2(zero_spec()).passed
    flip = zero_spec(T=math.pi).replace(f1=lambda t: np.array([math.sin(t) - 0.5]), h1=np.array([0.0]))
    r = check_A2(flip)
    assert not r.passed and r.witness is not None and "f1" in r.witness.inequality


def test_A3_example1():
    bad = check_A3(preset_example1(1.0, 1.0, 1.0, math.pi / 4))
    assert not bad.passed
    assert "b2+b4" in bad.witness.inequality and bad.witness.value == pytest.approx(1.0)
    assert check_A3(preset_example1(-1.0, 1.0, 1.0, 1.0)).pattern == ["(i)"]
    assert check_A3(preset_example3(EXAMPLE3_DEFAULT)).passed


def test_B1_cases():
    r = check_B1(preset_example3(EXAMPLE3_DEFAULT))
    assert r.passed and r.lam == 0.0
    assert check_B1(zero_spec()).passed and check_B1(zero_spec()).lam == 0.0
    eps = compute_constants(n=1, K=1.0, T=1.0).eps
    s = zero_spec().replace(b2=lambda t: np.array([2 * eps]))
    r = check_B1(s)
    lines = "\n".join(r.lines())
    assert "B1" in lines
    if r.passed:  # case (i) must not be the one that holds
        assert r.pattern != ["(i)"]


def test_B2_example3_and_search_config():
    r = check_B2(preset_example3(EXAMPLE3_DEFAULT), LambdaSearchConfig(grid_points=201))
    assert r.passed and r.lam == 0.0
    with pytest.raises(ValueError):
        check_B2(zero_spec(n=2))


def test_report_line_format():
    line = check_A3(preset_example3(EXAMPLE3_DEFAULT)).lines()[0]
    assert line.startswith("A3 i=1 pattern=(i) status=pass_sampled points=")
