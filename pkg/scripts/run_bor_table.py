#!/usr/bin/env python3
"""Single-arm best-observed-response operating characteristics across the
bundled BOR presets (T = 4..7), comparing the model-based estimator with
the binary comparator.

Example:
    python3 scripts/run_bor_table.py --reps 500
    python3 scripts/run_bor_table.py --presets bor-T4-a15 --reps 100
"""

import argparse
import sys

from augbin.simharness import preset, preset_names, run_single_arm


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--presets", nargs="*", default=None,
                        help="preset names (default: all bor-* presets)")
    parser.add_argument("--reps", type=int, default=500)
    parser.add_argument("--true-n", type=int, default=10**6,
                        help="Monte-Carlo draws for the true probability")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    names = args.presets or [n for n in preset_names() if n.startswith("bor-")]
    print(f"{'scenario':<16} {'true':>6} {'method':<6} {'mean':>7} "
          f"{'coverage':>8} {'width':>7} {'reduction%':>10}")
    for name in names:
        sc = preset(name)
        print(f"running {name} ({args.reps} reps)...", file=sys.stderr)
        oc = run_single_arm(sc, methods=("bin", "maug"), n_reps=args.reps,
                            true_n=args.true_n, threads=args.threads)
        for m in oc.methods:
            red = "" if m.width_reduction_pct is None \
                else f"{m.width_reduction_pct:10.2f}"
            print(f"{name:<16} {oc.true_probability:6.3f} {m.method:<6} "
                  f"{m.mean_estimate:7.4f} {m.coverage:8.3f} "
                  f"{m.mean_ci_width:7.4f} {red:>10}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
