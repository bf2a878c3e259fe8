from __future__ import annotations

import math

import pytest

from mfbsde.cli import main


def _summary(path):
    return dict(line.split(": ", 1) for line in (path / "summary.txt").read_text().splitlines())


def test_check_example3(tmp_path, capsys):
    assert main(["check", "--out", str(tmp_path)]) == 0
    s = _summary(tmp_path)
    assert s["status"] == "PASS" and s["A2"] == s["A3"] == s["B1"] == "pass_sampled"
    assert "A3 i=1 pattern=(i) status=pass_sampled" in (tmp_path / "report.txt").read_text()


def test_check_flipped_Q_fails(tmp_path):
    assert main(["check", "--out", str(tmp_path), "--set", "params.Q=-1", "--set", "params.Qbar=0"]) == 1
    s = _summary(tmp_path)
    assert s["A2"] == "fail" and s["A3"] == "fail" and s["status"] == "FAIL"


def test_example1_zero(tmp_path):
    assert main(["example", "1", "--alpha", "-1", "--lambda", "1", "--theta", "1", "--T", "1",
                 "--out", str(tmp_path), "--set", "grids.t_steps=50", "--set", "sim.N=200"]) == 0
    s = _summary(tmp_path)
    assert float(s["zero_solution_max_abs"]) <= 1e-8


def test_example1_nonuniqueness(tmp_path):
    assert main(["example", "1", "--alpha", "1", "--lambda", "1", "--theta", "1", "--T", str(math.pi / 4),
                 "--out", str(tmp_path), "--set", "grids.t_steps=100"]) == 0
    s = _summary(tmp_path)
    assert s["outcome"] == "assumptions-fail A3" and "b2+b4" in s["A3_witness"]
    assert s["oracle_status"] in ("non_contraction", "multiple_fixed_points", "divergence")


def test_simulate_and_verify_inline(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("problem.b2 = -0.5\nproblem.f1 = 1\nproblem.b0 = alpha*ybar1\nproblem.f0 = 0.5*xbar\n"
                   "problem.sigma = 0.3\nproblem.h1 = 1\nparams.alpha = -0.5\n"
                   "grids.t_steps = 40\ngrids.nu_steps = 20\nsim.N = 500\nsim.nu0 = 0.2\n")
    out = tmp_path / "o"
    assert main(["verify", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("riccati.csv", "field.csv", "residual_map.csv", "oracle.csv", "paths.csv", "summary.txt"):
        assert (out / name).exists()
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 0
    assert _summary(out)["sim_seed"] == "9"


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["riccati", "--out", str(tmp_path), "--set", "problem.b0=1+*2"]) == 2
    assert "1:3" in capsys.readouterr().err
    assert main(["riccati", "--out", str(tmp_path), "--set", "grids.nu_min=5"]) == 2
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_strict_lowers_tolerances():
    from mfbsde.cli import _parser, build_run_config

    plain = build_run_config(_parser().parse_args(["verify"]))
    strict = build_run_config(_parser().parse_args(["verify", "--strict"]))
    assert strict.tol.cross_check == pytest.approx(plain.tol.cross_check / 10)
    assert strict.tol.decomposition == pytest.approx(plain.tol.decomposition / 10)


def test_riccati_and_field_commands(tmp_path):
    assert main(["field", "--out", str(tmp_path), "--set", "grids.t_steps=20", "--set", "grids.nu_steps=10"]) == 0
    assert (tmp_path / "field.csv").read_text().startswith("t,nu,Phi_1,dPhi_1\n")
