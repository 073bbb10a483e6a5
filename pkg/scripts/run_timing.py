#!/usr/bin/env python3
"""Wall-time comparison of the two model-based estimators on identical
fitted replicates, per preset.

Example:
    python3 scripts/run_timing.py --presets fixed-T2-a15 bor-T4-a15
"""

import argparse
import sys

from augbin.simharness import preset, timing_probe


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--presets", nargs="*",
                        default=["fixed-T2-a15", "bor-T4-a15"])
    parser.add_argument("--reps", type=int, default=5)
    args = parser.parse_args(argv)

    print(f"{'scenario':<16} {'maug_s':>9} {'eaugbin_s':>10} {'ratio':>7}")
    for name in args.presets:
        times = timing_probe(preset(name), methods=("maug", "eaugbin"),
                             n_reps=args.reps)
        ratio = times["eaugbin"] / times["maug"]
        print(f"{name:<16} {times['maug']:9.4f} {times['eaugbin']:10.4f} "
              f"{ratio:7.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
