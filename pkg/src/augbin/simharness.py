"""Scenario presets, data generation, and operating-characteristic studies.

A scenario describes one simulated trial configuration: baseline sizes are
uniform on (0, 1), log size ratios are multivariate normal, and new-lesion
progression is drawn sequentially from a logistic model of the previous
size, truncating the record at the first new lesion.  Best-observed-response
scenarios follow patients only until progression of either kind, so their
records additionally truncate at the first >20% growth visit; fixed-time
scenarios keep assessing until the target visit, so growth stays in the
record and matters only at classification time.  Each convention
reproduces the published operating characteristics of its endpoint.

Two-arm scenarios scale the whole mean vector: visit means are
f_t * (log 0.7 + delta*tau + psi) with delta = +1 (control) / -1
(experimental), so tau = psi = 0 recovers the single-arm setting.

Replicates are seeded by (scenario seed, replicate index), so any subset of
replicates can run anywhere, in any order, with identical results.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np
from scipy.special import expit

from .errors import ParseError, TooManyFailures, ValidationError
from .infer import bin_two_arm_test, ci_logit_delta, wald_difference_test, wilson_ci
from .modelfit import assemble
from .mvnquad import DEFAULT_SEED, chol_pivot
from .respprob import (
    BOR,
    BOR_CONFIRMED,
    FIXED_TIME,
    METHOD_BIN,
    EndpointSpec,
    _classify_kind,
    mean_response,
)
from .trialdata import (
    GROWTH_THRESHOLD,
    RESPONSE_THRESHOLD,
    PatientRecord,
    TrialDataset,
)

LOG07 = math.log(0.7)

ENDPOINT_NAMES = {
    "fixed": FIXED_TIME,
    "bor": BOR,
    "bor-confirmed": BOR_CONFIRMED,
}
ENDPOINT_LABELS = {v: k for k, v in ENDPOINT_NAMES.items()}


@dataclass(frozen=True)
class Scenario:
    """One simulated trial configuration."""

    name: str
    n: int  # per arm
    arms: int
    T: int
    fractions: np.ndarray  # visit means are fractions * (log 0.7 + ...)
    sigma: np.ndarray
    alpha: float
    gamma: float
    endpoint: str  # EndpointSpec kind
    seed: int = DEFAULT_SEED
    tau: float = 0.0
    psi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "fractions", np.asarray(self.fractions, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.n < 2:
            raise ValidationError("scenario needs n >= 2 per arm")
        if self.arms not in (1, 2):
            raise ValidationError("arms must be 1 or 2")
        if self.fractions.shape != (self.T,):
            raise ValidationError("fractions length must equal T")
        if self.sigma.shape != (self.T, self.T):
            raise ValidationError("sigma must be T x T")
        if np.any(np.linalg.eigvalsh(self.sigma) <= 0):
            raise ValidationError("sigma must be positive definite")
        chol_pivot(self.sigma)
        if self.endpoint not in (FIXED_TIME, BOR, BOR_CONFIRMED):
            raise ValidationError(f"unknown endpoint {self.endpoint!r}")

    def mu(self, arm: int | None = None) -> np.ndarray:
        """Visit means for one arm (delta = +1 control, -1 experimental)."""
        shift = 0.0
        if self.arms == 2:
            delta = 1.0 if (arm or 0) == 0 else -1.0
            shift = delta * self.tau + self.psi
        return self.fractions * (LOG07 + shift)

    def endpoint_spec(self) -> EndpointSpec:
        return EndpointSpec(self.endpoint, self.T)


# ---------------------------------------------------------------------------
# scenario files and presets


def _parse_matrix(text: str) -> np.ndarray:
    return np.array([[float(v) for v in row.split()] for row in text.split(";")])


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    try:
        endpoint = fields.get("endpoint", "fixed")
        return Scenario(
            name=fields.get("name", name),
            n=int(fields["n"]),
            arms=int(fields.get("arms", "1")),
            T=int(fields["T"]),
            fractions=np.array([float(v) for v in fields["fractions"].split()]),
            sigma=_parse_matrix(fields["sigma"]),
            alpha=float(fields["alpha"]),
            gamma=float(fields.get("gamma", "0")),
            endpoint=ENDPOINT_NAMES.get(endpoint, endpoint),
            seed=int(fields.get("seed", str(DEFAULT_SEED))),
            tau=float(fields.get("tau", "0")),
            psi=float(fields.get("psi", "0")),
        )
    except KeyError as exc:
        raise ParseError(f"missing scenario field {exc}") from None
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def load_scenario(path) -> Scenario:
    from pathlib import Path

    p = Path(path)
    return parse_scenario(p.read_text(encoding="utf-8"), name=p.stem)


def preset_names():
    root = resources.files("augbin") / "presets"
    return sorted(f.name[:-4] for f in root.iterdir() if f.name.endswith(".txt"))


def preset(name: str) -> Scenario:
    ref = resources.files("augbin") / "presets" / f"{name}.txt"
    if not ref.is_file():
        raise ValidationError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        )
    return parse_scenario(ref.read_text(encoding="utf-8"), name=name)


# ---------------------------------------------------------------------------
# generation


def _latent_draw(scenario: Scenario, n: int, rng, arm: int | None):
    z0 = rng.uniform(0.0, 1.0, n)
    y = rng.multivariate_normal(
        scenario.mu(arm), scenario.sigma, size=n, method="cholesky"
    )
    u = rng.random((n, scenario.T))
    return z0, y, u


def _new_lesion_times(scenario, z0, y, u):
    """First visit with a new lesion (T+1 if none), drawn sequentially."""
    n, T = y.shape
    sizes = z0[:, None] * np.exp(y)
    z_prev = np.column_stack([z0, sizes[:, : T - 1]])
    d = u < expit(scenario.alpha + scenario.gamma * z_prev)
    x = np.where(d.any(axis=1), d.argmax(axis=1) + 1, T + 1)
    return x, sizes


def generate(scenario: Scenario, replicate_index: int) -> TrialDataset:
    """One simulated trial; deterministic given (scenario.seed, index)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([scenario.seed, replicate_index])
    )
    follow_to_progression = scenario.endpoint in (BOR, BOR_CONFIRMED)
    patients = []
    arms = (None,) if scenario.arms == 1 else (0, 1)
    for arm in arms:
        z0, y, u = _latent_draw(scenario, scenario.n, rng, arm)
        x, sizes = _new_lesion_times(scenario, z0, y, u)
        if follow_to_progression:
            grown = y > GROWTH_THRESHOLD
            g = np.where(grown.any(axis=1), grown.argmax(axis=1) + 1, scenario.T + 1)
        else:
            g = np.full(scenario.n, scenario.T + 1)
        for i in range(scenario.n):
            k = int(min(x[i], g[i], scenario.T))
            nl = [0] * k
            if x[i] <= min(g[i], scenario.T):
                nl[-1] = 1
            pid = f"p{i}" if arm is None else f"a{arm}-p{i}"
            patients.append(
                PatientRecord(
                    id=pid,
                    z0=float(z0[i]),
                    sizes=tuple(float(s) for s in sizes[i, :k]),
                    new_lesion=tuple(nl),
                    arm=arm,
                )
            )
    return TrialDataset(tuple(patients), T=scenario.T)


def _classify_latent(scenario: Scenario, y, x):
    """Vectorized endpoint classification of latent draws (same semantics
    as the record-level classifiers in trialdata)."""
    n, T = y.shape
    c, g = RESPONSE_THRESHOLD, GROWTH_THRESHOLD
    if scenario.endpoint == FIXED_TIME:
        return (x > T) & (y[:, T - 1] < c)
    grown = y > g
    growth = np.where(grown.any(axis=1), grown.argmax(axis=1) + 1, T + 1)
    horizon = np.minimum(np.minimum(growth, x - 1), T)
    t_idx = np.arange(1, T + 1)
    hits = (y < c) & (t_idx[None, :] <= horizon[:, None])
    if scenario.endpoint == BOR:
        return hits.any(axis=1)
    return (hits[:, :-1] & hits[:, 1:]).any(axis=1)


def true_probability(
    scenario: Scenario,
    n_patients: int = 10**7,
    chunk: int = 10**6,
    seed: int = 987_654,
    arm: int | None = None,
):
    """Monte-Carlo endpoint probability under the scenario; returns
    (probability, standard error)."""
    rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, seed]))
    if scenario.arms == 2 and arm is None:
        arm = 0
    hits = 0
    done = 0
    while done < n_patients:
        m = min(chunk, n_patients - done)
        z0, y, u = _latent_draw(scenario, m, rng, arm)
        x, _ = _new_lesion_times(scenario, z0, y, u)
        hits += int(_classify_latent(scenario, y, x).sum())
        done += m
    p = hits / done
    se = math.sqrt(max(p * (1 - p), 1e-12) / done)
    return p, se


# ---------------------------------------------------------------------------
# replicate runners


@dataclass(frozen=True)
class MethodSummary:
    method: str
    mean_estimate: float
    coverage: float
    mean_ci_width: float
    width_reduction_pct: float | None


@dataclass(frozen=True)
class OperatingCharacteristics:
    scenario: str
    endpoint: str
    true_probability: float
    true_se: float
    n_reps: int
    n_failed: int
    methods: tuple[MethodSummary, ...]

    def by_method(self, method: str) -> MethodSummary:
        for m in self.methods:
            if m.method == method:
                return m
        raise KeyError(method)


def _single_arm_replicate(scenario, methods, alpha, rep, quad_seed):
    data = generate(scenario, rep)
    spec = scenario.endpoint_spec()
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = None
        if any(m != METHOD_BIN for m in methods):
            model = assemble(data)
        for m in methods:
            if m == METHOD_BIN:
                kind, conf = _classify_kind(spec)
                successes = int(np.sum(data.classify(kind, conf)))
                lo, hi = wilson_ci(successes, data.n, alpha)
                out[m] = (successes / data.n, lo, hi)
            else:
                est = ci_logit_delta(data, model, spec, m, alpha, seed=quad_seed)
                out[m] = (est.mean_probability, est.ci[0], est.ci[1])
    return out


def _run_replicates(worker, args_list, threads):
    results = [None] * len(args_list)
    failures = 0
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(worker, *a) for a in args_list]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except Exception:
                    failures += 1
    else:
        for i, a in enumerate(args_list):
            try:
                results[i] = worker(*a)
            except Exception:
                failures += 1
    return results, failures


def run_single_arm(
    scenario: Scenario,
    methods=("bin", "maug"),
    n_reps: int = 500,
    alpha: float = 0.05,
    true_prob: float | None = None,
    true_n: int = 10**7,
    threads: int = 1,
    quad_seed: int = DEFAULT_SEED,
) -> OperatingCharacteristics:
    """Coverage / width study over simulated replicates of one scenario."""
    if scenario.arms != 1:
        raise ValidationError("run_single_arm needs a one-arm scenario")
    if n_reps < 1:
        raise ValidationError("n_reps must be >= 1")
    if true_prob is None:
        true_prob, true_se = true_probability(scenario, n_patients=true_n)
    else:
        true_se = 0.0
    args = [(scenario, tuple(methods), alpha, rep, quad_seed) for rep in range(n_reps)]
    results, failures = _run_replicates(_single_arm_replicate, args, threads)
    if failures > 0.02 * n_reps:
        raise TooManyFailures(f"{failures}/{n_reps} replicates failed")
    ok = [r for r in results if r is not None]
    summaries = []
    for m in methods:
        est = np.array([r[m][0] for r in ok])
        lo = np.array([r[m][1] for r in ok])
        hi = np.array([r[m][2] for r in ok])
        width = hi - lo
        reduction = None
        if m != METHOD_BIN and METHOD_BIN in methods:
            wb = np.array([r[METHOD_BIN][2] - r[METHOD_BIN][1] for r in ok])
            reduction = float(np.mean(1.0 - width / wb) * 100.0)
        summaries.append(
            MethodSummary(
                method=m,
                mean_estimate=float(est.mean()),
                coverage=float(np.mean((lo <= true_prob) & (true_prob <= hi))),
                mean_ci_width=float(width.mean()),
                width_reduction_pct=reduction,
            )
        )
    return OperatingCharacteristics(
        scenario=scenario.name,
        endpoint=ENDPOINT_LABELS[scenario.endpoint],
        true_probability=true_prob,
        true_se=true_se,
        n_reps=n_reps,
        n_failed=failures,
        methods=tuple(summaries),
    )


@dataclass(frozen=True)
class PowerPoint:
    tau: float
    psi: float
    method: str
    power: float
    mc_se: float
    n_reps: int
    n_failed: int


def _power_replicate(scenario, methods, alpha, rep, quad_seed):
    data = generate(scenario, rep)
    spec = scenario.endpoint_spec()
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = None
        if any(m != METHOD_BIN for m in methods):
            model = assemble(data)
        for m in methods:
            if m == METHOD_BIN:
                res = bin_two_arm_test(data, spec, alpha)
            else:
                res = wald_difference_test(data, model, spec, m, alpha, seed=quad_seed)
            out[m] = bool(res.p_value < alpha)
    return out


def run_two_arm_power(
    scenario: Scenario,
    taus,
    methods=("bin", "maug"),
    n_reps: int = 500,
    alpha: float = 0.05,
    threads: int = 1,
    quad_seed: int = DEFAULT_SEED,
) -> tuple[PowerPoint, ...]:
    """Rejection rate of the two-sided arm-difference test per tau value."""
    if scenario.arms != 2:
        raise ValidationError("run_two_arm_power needs a two-arm scenario")
    points = []
    for tau in taus:
        sc = replace(scenario, tau=float(tau))
        args = [(sc, tuple(methods), alpha, rep, quad_seed) for rep in range(n_reps)]
        results, failures = _run_replicates(_power_replicate, args, threads)
        if failures > 0.02 * n_reps:
            raise TooManyFailures(f"{failures}/{n_reps} replicates failed at tau={tau}")
        ok = [r for r in results if r is not None]
        for m in methods:
            power = float(np.mean([r[m] for r in ok]))
            se = math.sqrt(max(power * (1 - power), 1e-12) / len(ok))
            points.append(
                PowerPoint(float(tau), scenario.psi, m, power, se, n_reps, failures)
            )
    return tuple(points)


def timing_probe(scenario: Scenario, methods=("maug", "eaugbin"), n_reps: int = 5):
    """Median wall-time (seconds) of the trial-mean estimation step per
    method, on identical fitted replicates."""
    spec = scenario.endpoint_spec()
    times = {m: [] for m in methods}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for rep in range(n_reps):
            data = generate(scenario, rep)
            model = assemble(data)
            for m in methods:
                t0 = time.perf_counter()
                if m == METHOD_BIN:
                    mean_response(data, None, spec, METHOD_BIN)
                else:
                    mean_response(data, model, spec, m)
                times[m].append(time.perf_counter() - t0)
    return {m: float(np.median(v)) for m, v in times.items()}
