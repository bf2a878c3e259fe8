"""Example 1 with alpha > 0: monotonicity witness, oracle behaviour and the explicit family of solutions.

    python scripts/example1_nonuniqueness.py --alpha 1
"""

from __future__ import annotations

import argparse
import math

import numpy as np

from mfbsde.assumptions import check_A3
from mfbsde.oracle import OracleDivergence, pair_residual, solve_expectation_system
from mfbsde.problem import eq24_residual, preset_example1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--steps", type=int, nargs="+", default=[100, 200, 400, 800])
    args = ap.parse_args()

    a = args.alpha
    r = math.sqrt(a)
    # smallest T > 0 with alpha sin(r T) = r cos(r T)
    T = math.atan(1.0 / r) / r
    spec = preset_example1(a, 1.0, 1.0, T)
    print(f"alpha={a} T={T:.12g} terminal-condition residual={eq24_residual(a, T):.3e}")
    for line in check_A3(spec).lines():
        print(line)
    try:
        path = solve_expectation_system(spec, 0.0, np.linspace(0, T, 201))
        print(f"oracle status={path.status} fixed_point_gap={path.fixed_point_gap:.6g}")
    except OracleDivergence as err:
        print(f"oracle divergence: {err}")
    print("steps,dt,K,max_step_residual,over_dt")
    for steps in args.steps:
        for K in (0.5, 1.0, 2.0):
            fwd, bwd, term = pair_residual(spec, lambda t: K * math.sin(r * t),
                                           lambda t: K * r * math.cos(r * t) / a, steps)
            res = max(np.max(np.abs(fwd)), np.max(np.abs(bwd)), np.max(np.abs(term)))
            print(f"{steps},{T / steps:.6g},{K},{res:.6e},{res / (T / steps):.4f}")


if __name__ == "__main__":
    main()
