#!/usr/bin/env python3
"""Hypergradient error against inner ascent steps on random quadratic problems.

One CSV row per (seed, steps). The linear solve is truncated to a few rounds
so that the inner-loop error is what the curve shows.
"""

import argparse

from ibau import tensor_core as tc
from ibau.formats import write_csv
from ibau.hypergrad import LinSolveConfig, inner_error_curve
from ibau.objectives import QuadraticBilevel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--cond", type=float, default=5.0)
    ap.add_argument("--solver-rounds", type=int, default=2)
    ap.add_argument("--steps", default="0,1,2,3,5,10,20,50")
    ap.add_argument("--analytic-hvp", action="store_true")
    ap.add_argument("--out", default="error_curve.csv")
    args = ap.parse_args()
    steps = [int(s) for s in args.steps.split(",")]
    rows = []
    for seed in range(args.seeds):
        rng = tc.make_rng(seed)
        o = QuadraticBilevel.random(args.dim, 4, rng, cond=args.cond)
        curve = inner_error_curve(o, rng.standard_normal(4), steps, LinSolveConfig(rounds=args.solver_rounds),
                                     analytic=args.analytic_hvp)
        rows += [[seed, t, e] for t, e in curve]
        print(f"seed {seed}: " + "  ".join(f"t={t}:{e:.2e}" for t, e in curve))
    write_csv(args.out, ["seed", "inner_steps", "hypergrad_error"], rows)


if __name__ == "__main__":
    main()
