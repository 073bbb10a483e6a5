#!/usr/bin/env python3
"""Two-arm power curves: rejection rate of the arm-difference test over a
grid of treatment effects, for the binary and model-based tests.

Example:
    python3 scripts/run_power_curves.py --preset twoarm-fixed-T2 --reps 500
    python3 scripts/run_power_curves.py --preset twoarm-bor-T4 \
        --tau-grid 0:0.5:0.125 --reps 200
"""

import argparse
import sys

from augbin.cli import _parse_tau_grid
from augbin.simharness import preset, run_two_arm_power


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="twoarm-fixed-T2")
    parser.add_argument("--tau-grid", default="0:0.5:0.125",
                        metavar="START:STOP:STEP")
    parser.add_argument("--reps", type=int, default=500)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    sc = preset(args.preset)
    taus = _parse_tau_grid(args.tau_grid)
    print(f"scenario {sc.name}: {len(taus)} tau values x {args.reps} reps",
          file=sys.stderr)
    points = run_two_arm_power(sc, taus=taus, methods=("bin", "maug"),
                               n_reps=args.reps, threads=args.threads)
    print(f"{'tau':>6} {'method':<6} {'power':>7} {'mc_se':>7}")
    for p in points:
        print(f"{p.tau:6.3f} {p.method:<6} {p.power:7.3f} {p.mc_se:7.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
