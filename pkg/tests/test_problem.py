from __future__ import annotations

import math

import numpy as np
import pytest

from mfbsde.problem import (EXAMPLE3_DEFAULT, EvaluatorError, LQCoefficients, ValidationGridConfig, eq24_residual,
                            preset_example1, preset_example2, preset_example3, validate_spec, zero_spec)

XB = np.linspace(-2, 2, 7)
YB = np.linspace(-1, 3, 7)[:, None]


def test_example1_coefficients():
    s = preset_example1(-1.0, 1.0, 1.0, 1.0)
    assert s.n == s.d == 1 and s.K == 1.0
    assert s.eval_f1(0.3)[0] == 0.0 and s.h1[0] == 0.0
    assert np.array_equal(s.eval_b0(0.1, XB, YB), -YB[:, 0])
    s0 = preset_example1(0.0, 0.0, 0.0, 1.0)
    assert np.all(s0.eval_b0(0.0, XB, YB) == 0) and s0.eval_f1(0.0)[0] == 1.0 and s0.h1[0] == 1.0


def test_eq24_flag():
    preset_example1(1.0, 1.0, 1.0, math.pi / 4, require_eq24=True)
    assert abs(eq24_residual(1.0, math.pi / 4)) < 1e-15
    with pytest.raises(ValueError):
        preset_example1(1.0, 1.0, 1.0, 1.0, require_eq24=True)
    with pytest.raises(ValueError):
        preset_example1(-1.0, 2.0, 1.0, 1.0)


def test_example2_reduces_to_example1():
    a = preset_example2(-0.7, 0.0, 0.3, 0.6, 1.5)
    b = preset_example1(-0.7, 0.3, 0.6, 1.5)
    for t in np.linspace(0, 1.5, 5):
        assert np.array_equal(a.eval_b0(t, XB, YB), b.eval_b0(t, XB, YB))
        assert np.array_equal(a.eval_f0(t, XB, YB), b.eval_f0(t, XB, YB))
        assert np.array_equal(a.eval_f1(t), b.eval_f1(t))
    assert np.array_equal(a.eval_h2(XB), b.eval_h2(XB))
    c = preset_example2(-1.0, 0.5, 0.5, 0.5, 1.0)
    assert np.allclose(c.eval_b0(0.0, XB, YB), -YB[:, 0] + 0.5 * XB)


def test_example3_substitution():
    s = preset_example3(LQCoefficients(A=0, Abar=0, B=1, Bbar=0, R=1, Rbar=0, Q=1, Qbar=0, G=1, Gbar=0,
                                       sigma=1, T=1))
    assert s.eval_b2(0.2)[0] == -1.0 and s.eval_f1(0.2)[0] == 1.0 and s.h1[0] == 1.0
    assert np.all(s.eval_b0(0.2, XB, YB) == 0) and np.all(s.eval_f0(0.2, XB, YB) == 0)
    z = preset_example3(LQCoefficients(B=0, R=1, T=1))
    assert np.all(z.eval_b2(0.0) == 0) and np.all(z.h1 == 0)
    with pytest.raises(ZeroDivisionError, match="t="):
        preset_example3(LQCoefficients(R=lambda t: t - 0.5))
    with pytest.raises(ZeroDivisionError):
        preset_example3(LQCoefficients(R=1.0, Rbar=-1.0))


@pytest.mark.parametrize("spec", [
    preset_example1(-1.0, 1.0, 1.0, 1.0),
    preset_example2(-1.0, 0.5, 0.5, 0.5, 1.0),
    preset_example3(EXAMPLE3_DEFAULT),
    zero_spec(),
])
def test_presets_validate(spec):
    rep = validate_spec(spec)
    assert rep.status == "pass", rep.lines()
    assert validate_spec(spec.replace(K=2 * spec.K)).status == "pass"


def test_validation_violations():
    s = preset_example1(-1.0, 1.0, 1.0, 1.0)
    bad = validate_spec(s.replace(b1=lambda t: 2.0 * s.K))
    assert bad.status == "fail" and bad.violations and "b1" in bad.violations[0].condition
    edge = s.replace(h2=lambda xb: (s.K * np.asarray(xb, dtype=float))[..., None], h2_prime=None)
    assert validate_spec(edge).status == "pass"
    steep = s.replace(h2=lambda xb: (3 * s.K * np.asarray(xb, dtype=float))[..., None], h2_prime=None)
    assert validate_spec(steep).status == "fail"


def test_nonfinite_evaluator_reports_point():
    s = zero_spec().replace(b1=lambda t: math.inf)
    with pytest.raises(EvaluatorError, match="b1"):
        validate_spec(s, ValidationGridConfig(t_points=3))


def test_spec_invariants():
    with pytest.raises(ValueError):
        zero_spec(T=0.0)
    with pytest.raises(ValueError):
        zero_spec(K=0.0)
