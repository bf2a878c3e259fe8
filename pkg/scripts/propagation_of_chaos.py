"""Empirical-mean error of the particle system against the FBODE mean as N grows.

    python scripts/propagation_of_chaos.py --N 1000 10000 100000 --seeds 4
"""

from __future__ import annotations

import argparse

import numpy as np

from mfbsde.field import SolverConfig, build_field
from mfbsde.master import MasterField
from mfbsde.particles import InitLaw, simulate
from mfbsde.problem import EXAMPLE3_DEFAULT, preset_example3
from mfbsde.riccati import solve_riccati


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    spec = preset_example3(EXAMPLE3_DEFAULT)
    P = solve_riccati(spec, steps=args.steps)
    fs = build_field(spec, P, np.linspace(0, spec.T, args.steps + 1), np.linspace(-4, 4, 81), SolverConfig())
    mf = MasterField(P, fs)
    law = InitLaw("normal", 0.5, 0.5)
    print("N,mode,mean_gap,mean_gap_sqrtN,bsde_rms")
    for N in args.N:
        for mode in ("fbode_mean", "empirical_mean"):
            gaps, rms = [], []
            for seed in range(args.seeds):
                out = simulate(spec, mf, 0.5, law, N, args.steps, seed, mode, workers=args.workers,
                               store_paths=False)
                gaps.append(out.mean_gap)
                rms.append(out.bsde_rms)
            g = float(np.mean(gaps))
            print(f"{N},{mode},{g:.6e},{g * np.sqrt(N):.4f},{np.mean(rms):.6e}")


if __name__ == "__main__":
    main()
