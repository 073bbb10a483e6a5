"""Confidence intervals and hypothesis tests for response probabilities.

Intervals for the trial-mean response probability are built on the logit
scale by the delta method: the gradient of logit(mean probability) with
respect to the joint parameter vector is taken by central finite
differences with all quadrature seeds held fixed (common random numbers),
and sandwiched with the parameter covariance.  Two-arm comparisons use Wald
tests on the counterfactual mean difference, a logistic-regression
comparator on the dichotomized outcome, and a label-shuffling permutation
test.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri

from .errors import BoundaryProbability, TooManyFailures, ValidationError
from .modelfit import FittedModel, _newton_logistic, assemble, prepare_arrays
from .mvnquad import DEFAULT_SEED
from .respprob import (
    METHOD_BIN,
    METHOD_EAUGBIN,
    METHOD_MAUG,
    EndpointSpec,
    ResponseEstimate,
    _classify_kind,
    eaugbin_per_patient,
    endpoint_terms,
    maug_per_patient,
    patient_means,
    rect_prob_batch,
    rectangle_probs,
    survival_factors,
)
from .trialdata import TrialDataset

DEFAULT_REL_STEP = 1e-5
_BOUNDARY = 1e-6


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    estimate: float
    std_error: float
    method: str


def wilson_ci(successes: int, n: int, alpha: float = 0.05):
    """Wilson score interval for a binomial proportion."""
    if not 0 <= successes <= n or n < 1:
        raise ValidationError("need 0 <= successes <= n, n >= 1")
    z = ndtri(1 - alpha / 2)
    phat = successes / n
    denom = 1 + z**2 / n
    centre = (phat + z**2 / (2 * n)) / denom
    half = z * np.sqrt(phat * (1 - phat) / n + z**2 / (4 * n**2)) / denom
    return max(centre - half, 0.0), min(centre + half, 1.0)


# ---------------------------------------------------------------------------
# mean probability as a function of theta, with quadrature caching


class _MeanProb:
    """Evaluates the trial-mean response probability at arbitrary theta with
    fixed quadrature seeds; rectangle probabilities are reused whenever only
    the logistic block of theta changed."""

    def __init__(
        self,
        dataset: TrialDataset,
        model: FittedModel,
        spec: EndpointSpec,
        method: str,
        seed: int = DEFAULT_SEED,
        n_points: int = 1024,
        n_shifts: int = 2,
        n_samples: int = 2**12,
        n_points_grad: int = 256,
    ):
        self.arr = prepare_arrays(dataset)
        self.model = model
        self.spec = spec
        self.method = method
        self.seed = seed
        self.n_points = n_points
        self.n_shifts = n_shifts
        self.n_samples = n_samples
        # gradient evaluations share quadrature points across perturbations,
        # so the differences stay accurate with fewer points than the level
        self.n_points_grad = n_points_grad
        self.terms = endpoint_terms(spec)
        self.n_mvn = model.layout["log_chol"].stop
        self._base_mvn = model.theta[: self.n_mvn]
        self._arms = (None,) if not model.two_arm else (0, 1)
        self._rect_cache = {}

    def _rect(self, mdl, force_arm):
        key = force_arm
        mvn_same = np.array_equal(mdl.theta[: self.n_mvn], self._base_mvn)
        if mvn_same and key in self._rect_cache:
            return self._rect_cache[key]
        rect = rectangle_probs(
            self.arr, mdl.tumour, self.terms, force_arm,
            self.n_points, self.n_shifts, self.seed,
        )
        if mvn_same:
            self._rect_cache[key] = rect
        return rect

    def arm_mean(self, theta: np.ndarray, force_arm) -> float:
        mdl = self.model.with_theta(theta)
        if self.method == METHOD_MAUG:
            per = maug_per_patient(
                self.arr, mdl, self.spec, trim_arr=self.arr, force_arm=force_arm,
                seed=self.seed, rect=self._rect(mdl, force_arm),
            )
        elif self.method == METHOD_EAUGBIN:
            per = eaugbin_per_patient(
                self.arr, mdl, self.spec, force_arm, self.n_samples, self.seed
            )
        else:
            raise ValidationError(f"unknown model-based method {self.method!r}")
        return float(per.mean())

    def mean(self, theta: np.ndarray) -> float:
        return float(np.mean([self.arm_mean(theta, a) for a in self._arms]))

    def difference(self, theta: np.ndarray) -> float:
        return self.arm_mean(theta, 1) - self.arm_mean(theta, 0)

    def gradient(self, arm_weights, rel_step: float = DEFAULT_REL_STEP) -> np.ndarray:
        """Central-difference gradient of sum(w_a * arm mean) over theta.

        Exploits the estimator's structure: the survival product depends
        only on the logistic block and the rectangle probabilities only on
        the normal block, so cached factors are reused, and mean-block
        perturbations (pure bound shifts) are batched into a single
        quadrature call per term.  All evaluations share quadrature points.
        """
        if self.method != METHOD_MAUG:
            fn = lambda th: sum(
                w * self.arm_mean(th, a) for a, w in arm_weights.items()
            )
            return _delta_gradient(fn, self.model.theta, rel_step)
        theta0 = self.model.theta
        layout = self.model.layout
        chol = layout["log_chol"]
        steps = rel_step * np.maximum(1.0, np.abs(theta0))
        g = np.zeros(theta0.size)
        surv0 = {
            a: survival_factors(self.arr, self.model.progression, self.terms, a, self.arr)
            for a in arm_weights
        }
        rect0 = {a: self._rect(self.model, a) for a in arm_weights}

        def perturbed(j, sgn):
            th = theta0.copy()
            th[j] += sgn * steps[j]
            return self.model.with_theta(th)

        # mean-structure coordinates: shifted bounds, shared covariance
        idx_mean = np.arange(chol.start)
        for a, w in arm_weights.items():
            stacked = [
                patient_means(self.arr, perturbed(j, sgn).tumour, a)
                for j in idx_mean
                for sgn in (1, -1)
            ]
            means = np.concatenate(stacked, axis=0)
            n = self.arr.z0.size
            vals = np.zeros(means.shape[0] // n)
            for k, term in enumerate(self.terms):
                p, _ = rect_prob_batch(
                    self.model.tumour.sigma, term.lower, term.upper, means,
                    n_points=self.n_points_grad, n_shifts=1, seed=self.seed,
                )
                vals += (p.reshape(-1, n) * surv0[a][:, k]).mean(axis=1)
            vals = vals.reshape(idx_mean.size, 2)
            g[idx_mean] += w * (vals[:, 0] - vals[:, 1]) / (2 * steps[idx_mean])
        # covariance coordinates: fresh quadrature per perturbation
        for j in range(chol.start, chol.stop):
            diff = 0.0
            for a, w in arm_weights.items():
                vals = []
                for sgn in (1, -1):
                    rect = rectangle_probs(
                        self.arr, perturbed(j, sgn).tumour, self.terms, a,
                        self.n_points_grad, 1, self.seed,
                    )
                    vals.append(float((rect * surv0[a]).sum(axis=1).mean()))
                diff += w * (vals[0] - vals[1])
            g[j] = diff / (2 * steps[j])
        # logistic coordinates: rectangle probabilities unchanged
        for j in range(chol.stop, theta0.size):
            diff = 0.0
            for a, w in arm_weights.items():
                vals = []
                for sgn in (1, -1):
                    surv = survival_factors(
                        self.arr, perturbed(j, sgn).progression, self.terms, a, self.arr
                    )
                    vals.append(float((rect0[a] * surv).sum(axis=1).mean()))
                diff += w * (vals[0] - vals[1])
            g[j] = diff / (2 * steps[j])
        return g

    def gradient_mean(self, rel_step: float = DEFAULT_REL_STEP) -> np.ndarray:
        w = 1.0 / len(self._arms)
        return self.gradient({a: w for a in self._arms}, rel_step)

    def gradient_difference(self, rel_step: float = DEFAULT_REL_STEP) -> np.ndarray:
        return self.gradient({0: -1.0, 1: 1.0}, rel_step)


def _delta_gradient(fn, theta: np.ndarray, rel_step: float = DEFAULT_REL_STEP):
    """Central-difference gradient of a scalar function of theta."""
    g = np.empty(theta.size)
    for j in range(theta.size):
        h = rel_step * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        g[j] = (fn(tp) - fn(tm)) / (2 * h)
    return g


def ci_logit_delta(
    dataset: TrialDataset,
    model: FittedModel,
    spec: EndpointSpec,
    method: str,
    alpha: float = 0.05,
    seed: int = DEFAULT_SEED,
    rel_step: float = DEFAULT_REL_STEP,
    n_points: int = 1024,
    n_shifts: int = 2,
    n_samples: int = 2**12,
) -> ResponseEstimate:
    """Delta-method confidence interval for the mean response probability,
    computed on the logit scale and mapped back through expit.

    Near-degenerate means (outside (1e-6, 1-1e-6)) cannot carry a logit
    interval; the Wilson interval of the dichotomized outcome is returned
    instead, with a warning.
    """
    mp = _MeanProb(dataset, model, spec, method, seed, n_points, n_shifts, n_samples)
    m = mp.mean(model.theta)
    if not _BOUNDARY < m < 1 - _BOUNDARY:
        warnings.warn(
            f"mean probability {m:.3g} too extreme for a logit interval; "
            "falling back to the score interval of the dichotomized outcome",
            BoundaryProbability,
        )
        kind, conf = _classify_kind(spec)
        successes = int(np.sum(dataset.classify(kind, conf)))
        ci = wilson_ci(successes, dataset.n, alpha)
        return ResponseEstimate(m, np.array([]), method, float("nan"), ci)
    grad_m = mp.gradient_mean(rel_step)
    grad_l = grad_m / (m * (1 - m))
    var_l = float(grad_l @ model.theta_cov @ grad_l)
    var_l = max(var_l, 0.0)
    z = ndtri(1 - alpha / 2)
    half = z * np.sqrt(var_l)
    lo, hi = expit(logit(m) - half), expit(logit(m) + half)
    per = np.array([])  # per-patient values available via mean_response
    return ResponseEstimate(m, per, method, var_l, (float(lo), float(hi)))


# ---------------------------------------------------------------------------
# two-arm tests


def _two_sided_p(stat: float) -> float:
    return float(2.0 * (1.0 - ndtr(abs(stat))))


def wald_difference_test(
    dataset: TrialDataset,
    model: FittedModel,
    spec: EndpointSpec,
    method: str,
    alpha: float = 0.05,
    seed: int = DEFAULT_SEED,
    rel_step: float = DEFAULT_REL_STEP,
    n_points: int = 1024,
    n_shifts: int = 2,
    n_samples: int = 2**12,
) -> TestResult:
    """Wald test of zero counterfactual mean response difference."""
    if not model.two_arm:
        raise ValidationError("Wald difference test needs a two-arm model")
    mp = _MeanProb(dataset, model, spec, method, seed, n_points, n_shifts, n_samples)
    est = mp.difference(model.theta)
    grad = mp.gradient_difference(rel_step)
    var = max(float(grad @ model.theta_cov @ grad), 0.0)
    se = np.sqrt(var)
    if est == 0.0:
        stat = 0.0
    elif se == 0.0:
        stat = np.inf if est > 0 else -np.inf
    else:
        stat = est / se
    return TestResult(float(stat), _two_sided_p(stat), float(est), float(se), method)


def bin_two_arm_test(
    dataset: TrialDataset, spec: EndpointSpec, alpha: float = 0.05
) -> TestResult:
    """Wald test on the treatment coefficient of a logistic regression of
    the dichotomized endpoint on treatment group and baseline size."""
    if not dataset.two_arm:
        raise ValidationError("binary two-arm test needs arm labels")
    kind, conf = _classify_kind(spec)
    y = np.asarray(dataset.classify(kind, conf), dtype=float)
    r = np.array([float(p.arm) for p in dataset.patients])
    z0 = np.array([p.z0 for p in dataset.patients])
    X = np.column_stack([np.ones(y.size), r, z0])
    beta = _newton_logistic(X, y, label="dichotomized endpoint")
    p = expit(X @ beta)
    w = np.maximum(p * (1 - p), 1e-10)
    info = X.T @ (X * w[:, None])
    cov = np.linalg.pinv(info)
    se = float(np.sqrt(cov[1, 1]))
    stat = beta[1] / se if se > 0 else 0.0
    return TestResult(float(stat), _two_sided_p(stat), float(beta[1]), se, METHOD_BIN)


# ---------------------------------------------------------------------------
# permutation test


def _difference_statistic(dataset, spec, method, seed):
    if method == METHOD_BIN:
        kind, conf = _classify_kind(spec)
        y = np.asarray(dataset.classify(kind, conf), dtype=float)
        r = np.array([p.arm for p in dataset.patients])
        return float(y[r == 1].mean() - y[r == 0].mean())
    model = assemble(dataset)
    mp = _MeanProb(dataset, model, spec, method, seed=seed)
    return mp.difference(model.theta)


@dataclass(frozen=True)
class PermutationResult:
    p_value: float
    observed: float
    permuted: np.ndarray
    n_failed: int


def permutation_test(
    dataset: TrialDataset,
    spec: EndpointSpec,
    method: str = METHOD_MAUG,
    n_perm: int = 999,
    seed: int = DEFAULT_SEED,
) -> PermutationResult:
    """Label-shuffling permutation test of the arm difference.

    Each permutation reassigns arm labels, refits, and recomputes the
    difference; the p-value uses add-one smoothing.  Permutations whose fit
    fails are skipped; more than 5% failures is an error.
    """
    if not dataset.two_arm:
        raise ValidationError("permutation test needs a two-arm dataset")
    if n_perm < 100:
        raise ValidationError("need at least 100 permutations")
    observed = _difference_statistic(dataset, spec, method, seed)
    if observed == 0.0:
        return PermutationResult(1.0, 0.0, np.array([]), 0)
    rng = np.random.default_rng(seed)
    labels = np.array([p.arm for p in dataset.patients])
    stats, failed = [], 0
    for _ in range(n_perm):
        shuffled = rng.permutation(labels)
        permuted = TrialDataset(
            tuple(
                replace(p, arm=int(a)) for p, a in zip(dataset.patients, shuffled)
            ),
            T=dataset.T,
            response_threshold=dataset.response_threshold,
            growth_threshold=dataset.growth_threshold,
        )
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                stats.append(_difference_statistic(permuted, spec, method, seed))
        except Exception:
            failed += 1
    if failed > 0.05 * n_perm:
        raise TooManyFailures(f"{failed}/{n_perm} permutation fits failed")
    stats = np.asarray(stats)
    p = (1 + np.sum(np.abs(stats) >= abs(observed))) / (stats.size + 1)
    return PermutationResult(float(p), observed, stats, failed)
