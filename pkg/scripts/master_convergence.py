"""Master-equation residual under time-grid refinement on the LQ example.

    python scripts/master_convergence.py --levels 20 40 80 160
"""

from __future__ import annotations

import argparse

import numpy as np

from mfbsde.field import SolverConfig, build_field
from mfbsde.master import MasterField, decomposition_gap, residual_map
from mfbsde.problem import EXAMPLE3_DEFAULT, preset_example3
from mfbsde.riccati import solve_riccati


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--levels", type=int, nargs="+", default=[20, 40, 80, 160])
    ap.add_argument("--nu-points", type=int, default=21)
    args = ap.parse_args()

    spec = preset_example3(EXAMPLE3_DEFAULT)
    xs = np.array([-1.0, 0.0, 1.0])
    nus = np.linspace(-1, 1, args.nu_points)
    print("t_steps,dt,max_residual,mean_residual,ratio,decomposition_gap")
    prev = None
    for steps in args.levels:
        P = solve_riccati(spec, steps=steps)
        fs = build_field(spec, P, np.linspace(0, spec.T, steps + 1), nus, SolverConfig())
        mf = MasterField(P, fs)
        rm = residual_map(mf, spec, xs)
        gap = max(decomposition_gap(mf, spec, float(t), xs[:, None], nus[None, 1:-1]) for t in fs.tgrid[1:-1])
        ratio = rm.max / prev if prev else float("nan")
        print(f"{steps},{spec.T / steps:.6g},{rm.max:.6e},{rm.mean:.6e},{ratio:.4f},{gap:.3e}")
        prev = rm.max


if __name__ == "__main__":
    main()
