"""Command-line front door: analysis, simulation, power, permutation tests.

Every command is a pure function of (inputs, flags, seed): rerunning with
identical arguments produces byte-identical output.  Results go to --out
(or stdout); progress notes go to stderr.  Output CSVs start with a
versioned `# augbin-<command>-v1` comment line.

Exit codes: 0 success, 2 invalid input (with a diagnostic naming the
offending row/field), 3 too many replicate failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys

from .errors import AugbinError, TooManyFailures, ValidationError
from .infer import (
    bin_two_arm_test,
    ci_logit_delta,
    permutation_test,
    wald_difference_test,
    wilson_ci,
)
from .modelfit import assemble
from .mvnquad import DEFAULT_SEED
from .respprob import (
    METHOD_BIN,
    METHOD_EAUGBIN,
    METHOD_MAUG,
    EndpointSpec,
    _classify_kind,
)
from .simharness import (
    ENDPOINT_LABELS,
    ENDPOINT_NAMES,
    load_scenario,
    preset,
    run_single_arm,
    run_two_arm_power,
)
from .trialdata import load_csv

ALL_METHODS = (METHOD_BIN, METHOD_EAUGBIN, METHOD_MAUG)


def _fmt(value) -> str:
    """Deterministic, diff-friendly cell formatting."""
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _csv_text(version: str, header, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {version}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _methods(arg: str, include_bin: bool = False):
    chosen = ALL_METHODS if arg == "all" else (arg,)
    if include_bin and METHOD_BIN not in chosen:
        chosen = (METHOD_BIN,) + chosen
    return chosen


def _endpoint_spec(args) -> EndpointSpec:
    return EndpointSpec(ENDPOINT_NAMES[args.endpoint], args.time)


def _scenario(args):
    if args.preset is not None:
        return preset(args.preset)
    return load_scenario(args.scenario)


def _parse_tau_grid(text: str):
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValidationError(
            f"--tau-grid must be start:stop:step, got {text!r}"
        ) from None
    if step <= 0 or stop < start:
        raise ValidationError("--tau-grid needs step > 0 and stop >= start")
    taus = []
    k = 0
    while (tau := start + k * step) <= stop + 1e-12:
        taus.append(round(tau, 12))
        k += 1
    return taus


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(args) -> str:
    data = load_csv(args.input, T=args.time)
    spec = _endpoint_spec(args)
    kind, conf = _classify_kind(spec)
    methods = _methods(args.method)
    rows = []
    model = None
    if any(m != METHOD_BIN for m in methods):
        model = assemble(data)
    for m in methods:
        if m == METHOD_BIN:
            successes = int(sum(data.classify(kind, conf)))
            lo, hi = wilson_ci(successes, data.n, args.alpha)
            est = successes / data.n
        else:
            r = ci_logit_delta(data, model, spec, m, args.alpha, seed=args.seed)
            est, (lo, hi) = r.mean_probability, r.ci
        rows.append(("mean", m, args.endpoint, spec.T, est, lo, hi, None, None))
    if data.two_arm:
        for m in methods:
            if m == METHOD_BIN:
                t = bin_two_arm_test(data, spec, args.alpha)
            else:
                t = wald_difference_test(
                    data, model, spec, m, args.alpha, seed=args.seed
                )
            rows.append(
                ("difference", m, args.endpoint, spec.T,
                 t.estimate, None, None, t.statistic, t.p_value)
            )
    return _csv_text(
        "augbin-analyze-v1",
        ["row", "method", "endpoint", "T",
         "estimate", "ci_low", "ci_high", "statistic", "p_value"],
        rows,
    )


def cmd_simulate(args) -> str:
    sc = _scenario(args)
    oc = run_single_arm(
        sc,
        methods=_methods(args.method, include_bin=True),
        n_reps=args.reps,
        alpha=args.alpha,
        true_prob=args.true_prob,
        true_n=args.true_n,
        threads=args.threads,
        quad_seed=args.seed,
    )
    rows = [
        (oc.scenario, oc.endpoint, oc.true_probability, oc.true_se,
         oc.n_reps, oc.n_failed, m.method, m.mean_estimate, m.coverage,
         m.mean_ci_width, m.width_reduction_pct)
        for m in oc.methods
    ]
    return _csv_text(
        "augbin-simulate-v1",
        ["scenario", "endpoint", "true_probability", "true_se",
         "n_reps", "n_failed", "method", "mean_estimate", "coverage",
         "mean_ci_width", "width_reduction_pct"],
        rows,
    )


def cmd_power(args) -> str:
    sc = _scenario(args)
    points = run_two_arm_power(
        sc,
        taus=_parse_tau_grid(args.tau_grid),
        methods=_methods(args.method, include_bin=True),
        n_reps=args.reps,
        alpha=args.alpha,
        threads=args.threads,
        quad_seed=args.seed,
    )
    rows = [
        (sc.name, ENDPOINT_LABELS[sc.endpoint], p.method, p.tau, p.psi,
         p.power, p.mc_se, p.n_reps, p.n_failed)
        for p in points
    ]
    return _csv_text(
        "augbin-power-v1",
        ["scenario", "endpoint", "method", "tau", "psi",
         "power", "mc_se", "n_reps", "n_failed"],
        rows,
    )


def cmd_permtest(args) -> str:
    data = load_csv(args.input, T=args.time)
    spec = _endpoint_spec(args)
    res = permutation_test(
        data, spec, method=args.method, n_perm=args.nperm, seed=args.seed
    )
    rows = [("observed", res.observed), ("p_value", res.p_value),
            ("n_failed", res.n_failed)]
    rows += [(f"perm_{i}", s) for i, s in enumerate(res.permuted)]
    return _csv_text("augbin-permtest-v1", ["quantity", "value"], rows)


# ---------------------------------------------------------------------------
# parser


def _alpha(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 0.5:
        raise argparse.ArgumentTypeError("alpha must be in (0, 0.5)")
    return value


def _add_endpoint_flags(p, default_method):
    p.add_argument(
        "--endpoint", choices=sorted(ENDPOINT_NAMES), default="fixed",
        help="response endpoint definition",
    )
    p.add_argument(
        "--time", type=int, default=None, metavar="T",
        help="number of post-baseline visits (default: from the data)",
    )
    p.add_argument(
        "--method", choices=["bin", "eaugbin", "maug", "all"],
        default=default_method, help="estimation method(s)",
    )


def _add_common_flags(p):
    p.add_argument("--alpha", type=_alpha, default=0.05,
                   help="two-sided significance level, in (0, 0.5)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help="seed for quadrature/resampling")
    p.add_argument("--out", default=None, metavar="PATH",
                   help="output file (default: stdout)")


def _add_scenario_flags(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", default=None, help="bundled scenario name")
    src.add_argument("--scenario", default=None, metavar="PATH",
                     help="scenario description file")
    p.add_argument("--reps", type=int, default=500,
                   help="number of simulated replicates")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes (output independent of N)")
    p.add_argument(
        "--method", choices=["bin", "eaugbin", "maug", "all"], default="maug",
        help="model-based method(s); the binary comparator always runs",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="augbin",
        description="Tumour-response estimation from continuous size models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="estimate response rates from a trial CSV")
    p.add_argument("input", help="patient-visit CSV file")
    _add_endpoint_flags(p, default_method="all")
    _add_common_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="single-arm operating characteristics")
    _add_scenario_flags(p)
    p.add_argument("--true-prob", type=float, default=None,
                   help="known endpoint probability (skips Monte Carlo)")
    p.add_argument("--true-n", type=int, default=10**6,
                   help="Monte-Carlo sample size for the true probability")
    _add_common_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("power", help="two-arm rejection rates over a tau grid")
    _add_scenario_flags(p)
    p.add_argument("--tau-grid", default="0:0.5:0.1", metavar="START:STOP:STEP",
                   help="treatment-effect grid, e.g. 0:0.5:0.05")
    _add_common_flags(p)
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("permtest", help="permutation test of the arm difference")
    p.add_argument("input", help="two-arm patient-visit CSV file")
    _add_endpoint_flags(p, default_method="bin")
    p.add_argument("--nperm", type=int, default=999,
                   help="number of label permutations (>= 100)")
    _add_common_flags(p)
    p.set_defaults(func=cmd_permtest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = args.func(args)
    except TooManyFailures as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (AugbinError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
