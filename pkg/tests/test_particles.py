from __future__ import annotations

import numpy as np
import pytest

from mfbsde.particles import InitLaw, _uniforms, normals, simulate, stability_experiment


def test_noise_slices_are_consistent():
    full = normals(5, 3, 0, 1000)
    assert np.array_equal(full[137:611], normals(5, 3, 137, 611))
    assert not np.array_equal(full, normals(5, 4, 0, 1000))
    assert not np.array_equal(full, normals(6, 3, 0, 1000))
    u = _uniforms(1, 0, 0, 100_000)
    assert 0 < u.min() and u.max() < 1 and abs(u.mean() - 0.5) < 0.01
    z = normals(2, 0, 0, 100_000)
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02


def test_init_laws():
    assert np.all(InitLaw("point", 0.3).sample(0, 0, 5) == 0.3)
    n = InitLaw("normal", 1.0, 2.0).sample(0, 0, 50_000)
    assert abs(n.mean() - 1.0) < 0.05 and abs(n.std() - 2.0) < 0.05
    u = InitLaw("uniform", 0.0, 1.0)
    assert u.std == pytest.approx(1 / np.sqrt(3))
    assert np.array_equal(u.sample(3, 10, 20), u.sample(3, 0, 20)[10:])
    with pytest.raises(ValueError):
        InitLaw("cauchy")


def test_example1b_stays_zero(ex1b, ex1b_field):
    out = simulate(ex1b, ex1b_field, 0.0, InitLaw(), 500, 50, seed=1)
    assert max(out.max_abs.values()) == 0.0 and out.bsde_rms == 0.0


def test_workers_do_not_change_results(ex3, ex3_field):
    law = InitLaw("normal", 0.5, 0.5)
    a = simulate(ex3, ex3_field, 0.5, law, 999, 50, seed=3, workers=1)
    b = simulate(ex3, ex3_field, 0.5, law, 999, 50, seed=3, workers=4)
    assert np.array_equal(a.ensemble.X, b.ensemble.X) and np.array_equal(a.Y, b.Y)
    assert a.summary_csv() == b.summary_csv()


@pytest.mark.parametrize("mode", ["fbode_mean", "empirical_mean"])
def test_empirical_mean_tracks_fbode(ex3, ex3_field, mode):
    out = simulate(ex3, ex3_field, 0.5, InitLaw("normal", 0.5, 0.5), 4000, 50, seed=11, mode=mode)
    gap = np.abs(out.empirical_mean_X - out.nu_path)
    assert np.all(gap <= out.band(3.0) + 1e-12)
    assert out.Z.shape == (4000, 50, 1, 1)


def test_outputs_and_errors(ex3, ex3_field):
    out = simulate(ex3, ex3_field, 0.0, InitLaw(), 20, 10, seed=0)
    lines = out.paths_csv(particles=3, stride=5).splitlines()
    assert lines[0] == "t,particle,X,Y_1" and len(lines) == 1 + 3 * 3
    assert out.summary_csv().splitlines()[0] == "mean_gap,bsde_rms,terminal_gap"
    with pytest.raises(ValueError):
        simulate(ex3, ex3_field, 0.0, InitLaw("point", 1.0), 20, 10, seed=0)
    with pytest.raises(ValueError):
        simulate(ex3, ex3_field, 0.0, InitLaw(), 20, 10, seed=0, mode="bogus")
    small = simulate(ex3, ex3_field, 0.0, InitLaw(), 20, 10, seed=0, store_paths=False)
    assert small.ensemble.X is None
    with pytest.raises(ValueError):
        small.paths_csv()


def test_stability_record(ex3, ex3_field):
    rec = stability_experiment(ex3, ex3_field, 0.0, 0.5)
    assert rec.passed and 0 < rec.ratio < 100
    with pytest.raises(ValueError):
        stability_experiment(ex3, ex3_field, 0.1, 0.1)
