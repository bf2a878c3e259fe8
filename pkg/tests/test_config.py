from __future__ import annotations

import numpy as np
import pytest

from mfbsde.config import ConfigError, build_config, inline_spec, parse_config_text, spec_from_config


def test_parse_text_comments_and_override():
    e = parse_config_text("# header\ngrids.t_steps = 10  # inline\n\ngrids.t_steps = 20\n")
    assert e == {"grids.t_steps": "20"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("no equals sign")


def test_build_config_types_and_validation():
    cfg = build_config({"grids.t_steps": "50", "grids.nu_min": "-3", "sim.seed": "4", "tol.zero": "1e-9"})
    assert cfg.grids.t_steps == 50 and cfg.grids.nu_min == -3.0 and cfg.sim.seed == 4 and cfg.tol.zero == 1e-9
    assert cfg.tol.strict().zero == pytest.approx(1e-10)
    with pytest.raises(ConfigError):
        build_config({"grids.nu_min": "3", "grids.nu_max": "1"})
    with pytest.raises(ConfigError):
        build_config({"grids.t_steps": "0"})
    with pytest.raises(ConfigError, match="unknown key"):
        build_config({"grids.bogus": "1"})


def test_inline_expressions_parse_before_solving():
    with pytest.raises(ConfigError, match="1:3"):
        build_config({"problem.b0": "1+*2"})
    with pytest.raises(ConfigError, match="unknown identifier"):
        build_config({"problem.h2": "t"})  # h2 depends on xbar only


def test_inline_spec_matches_preset():
    from mfbsde.problem import preset_example1

    cfg = build_config({"problem.b0": "alpha*ybar1", "problem.f1": "1 - lam", "problem.f0": "lam*xbar",
                        "problem.h1": "1 - theta", "problem.h2": "theta*xbar",
                        "params.alpha": "-1", "params.lam": "0.5", "params.theta": "0.25"})
    assert cfg.preset is None
    s = spec_from_config(cfg)
    ref = preset_example1(-1.0, 0.5, 0.25, 1.0)
    xb = np.array([0.3, -1.2])
    yb = np.array([[0.7], [2.0]])
    for t in (0.0, 0.4):
        assert np.allclose(s.eval_b0(t, xb, yb), ref.eval_b0(t, xb, yb))
        assert np.allclose(s.eval_f0(t, xb, yb), ref.eval_f0(t, xb, yb))
        assert np.allclose(s.eval_f1(t), ref.eval_f1(t))
    assert np.allclose(s.h1, ref.h1)
    assert np.allclose(s.eval_h2(xb), ref.eval_h2(xb))


def test_inline_vector_problem():
    s = inline_spec({"n": "2", "d": "2", "b2.2": "-1", "f2.1.2": "t", "sigma.2": "x + ybar2"}, {})
    assert s.n == 2 and s.d == 2
    assert np.array_equal(s.eval_b2(0.5), [0.0, -1.0])
    assert np.array_equal(s.eval_f2(0.5), [[0.0, 0.5], [0.0, 0.0]])
    sig = s.eval_sigma(0.0, np.array([1.0]), np.zeros((1, 2)), np.array([0.0]), np.array([[0.0, 2.0]]))
    assert np.array_equal(sig, [[0.0, 3.0]])


def test_example3_parameters_accept_expressions():
    cfg = build_config({"problem.preset": "example3", "params.sigma": "1 + t", "params.T": "0.5"})
    s = spec_from_config(cfg)
    assert s.T == 0.5
    assert s.eval_sigma(0.25, np.array([0.0]), np.zeros((1, 1)), np.array([0.0]), np.zeros((1, 1)))[0, 0] == 1.25
