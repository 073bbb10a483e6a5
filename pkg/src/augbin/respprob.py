"""Response-probability engines for tumour-response endpoints.

Two model-based estimators of the probability that a patient responds:

* the exact estimator integrates the product of new-lesion survival terms
  against the multivariate normal restricted to the response region, by
  weighted (importance) sampling of the truncated normal;
* the factored estimator multiplies the survival product evaluated at the
  observed (or imputed) previous sizes by the plain rectangle probability,
  which is orders of magnitude cheaper.

Both come in fixed-time and best-observed-response (BOR) flavours; BOR is a
sum over the visit at which response is first seen, with disjoint response
regions per term.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import qmc

from .errors import AllTrimmedWarning, EmptyRiskSet, ValidationError
from .modelfit import FittedModel, ProgressionModel, TumourModel, prepare_arrays
from .mvnquad import (
    DEFAULT_SEED,
    _integration_order,
    rect_prob_batch,
)
from .trialdata import (
    GROWTH_THRESHOLD,
    RESPONSE_THRESHOLD,
    PatientRecord,
    TrialDataset,
    log_ratios,
)

FIXED_TIME = "fixed_time"
BOR = "bor_unconfirmed"
BOR_CONFIRMED = "bor_confirmed"

METHOD_BIN = "bin"
METHOD_EAUGBIN = "eaugbin"
METHOD_MAUG = "maug"

DEFAULT_SAMPLES = 2**16
_TINY = 1e-15


@dataclass(frozen=True)
class EndpointSpec:
    """Which endpoint to evaluate and over which regions."""

    kind: str
    T: int
    response_threshold: float = RESPONSE_THRESHOLD
    growth_threshold: float = GROWTH_THRESHOLD
    intermediate_bound: str = "unbounded"  # or "growth_bound"

    def __post_init__(self):
        if self.kind not in (FIXED_TIME, BOR, BOR_CONFIRMED):
            raise ValidationError(f"unknown endpoint kind {self.kind!r}")
        if self.T < 1:
            raise ValidationError("T must be at least 1")
        if self.kind == BOR_CONFIRMED and self.T < 2:
            raise ValidationError("confirmed BOR needs T >= 2")
        if self.response_threshold >= self.growth_threshold:
            raise ValidationError("response threshold must lie below growth bound")
        if self.intermediate_bound not in ("unbounded", "growth_bound"):
            raise ValidationError("intermediate_bound must be unbounded|growth_bound")


@dataclass(frozen=True)
class ResponseEstimate:
    mean_probability: float
    per_patient: np.ndarray
    method: str
    logit_variance: float = float("nan")
    ci: tuple[float, float] | None = None


@dataclass(frozen=True)
class _Term:
    """One disjoint response region: integration rectangle over (y_1..y_T),
    the number of survival factors, and the per-visit trimming region."""

    lower: np.ndarray
    upper: np.ndarray
    n_prod: int
    phi_lower: np.ndarray
    phi_upper: np.ndarray


def endpoint_terms(spec: EndpointSpec) -> tuple[_Term, ...]:
    """Disjoint-region decomposition of the endpoint."""
    T, c, g = spec.T, spec.response_threshold, spec.growth_threshold
    if spec.kind == FIXED_TIME:
        lower = np.full(T, -np.inf)
        upper = np.full(T, np.inf if spec.intermediate_bound == "unbounded" else g)
        upper[T - 1] = c
        phi_upper = np.full(T, g)
        phi_upper[T - 1] = c
        return (_Term(lower, upper, T, np.full(T, -np.inf), phi_upper),)
    terms = []
    hs = range(1, T + 1) if spec.kind == BOR else range(1, T)
    width = 1 if spec.kind == BOR else 2
    for h in hs:
        lower = np.full(T, -np.inf)
        upper = np.full(T, np.inf)
        lower[: h - 1] = c
        upper[: h - 1] = g
        upper[h - 1 : h - 1 + width] = c
        terms.append(_Term(lower, upper, h, lower.copy(), upper.copy()))
    return tuple(terms)


# ---------------------------------------------------------------------------
# shared covariate tables


def _z_entry(arr, T: int) -> np.ndarray:
    """(n, T) sizes entering each visit: column t-1 is the size measured
    just before visit t (baseline for t = 1), NaN when unobserved."""
    cols = [arr.z0[:, None]]
    if T > 1:
        cols.append(arr.z0[:, None] * np.exp(arr.y[:, : T - 1]))
    return np.concatenate(cols, axis=1)


def _patient_arrays(p: PatientRecord, T: int):
    """z0 and entering-size row for one patient (same layout as _z_entry)."""
    y = np.full(T, np.nan)
    y[: p.last_observed] = log_ratios(p)
    z_entry = np.full(T, np.nan)
    z_entry[0] = p.z0
    if T > 1:
        z_entry[1:] = p.z0 * np.exp(y[: T - 1])
    return y, z_entry


# ---------------------------------------------------------------------------
# factored (survival-product x rectangle) estimator


def _trimmed_pi(arr, z_entry, progression, t, term, force_arm):
    """Trimmed mean of the fitted progression probability at visit t over
    patients still observed at t whose log ratio lies inside the term's
    integration region."""
    risk = np.flatnonzero(arr.f >= t)
    if risk.size == 0:
        raise EmptyRiskSet(f"no patients observed at visit {t}")
    z = z_entry[risk, t - 1]
    if force_arm is not None:
        arm = force_arm
    elif arr.arm is not None:
        arm = arr.arm[risk]
    else:
        arm = None
    pi = progression.prob(t, z, arm)
    y = arr.y[risk, t - 1]
    keep = (y > term.phi_lower[t - 1]) & (y < term.phi_upper[t - 1])
    if not np.any(keep):
        warnings.warn(
            f"all at-risk patients trimmed at visit {t}; using untrimmed mean",
            AllTrimmedWarning,
        )
        return float(np.mean(pi))
    return float(np.mean(pi[keep]))


def survival_factors(
    arr,
    progression: ProgressionModel,
    terms,
    force_arm=None,
    trim_arr=None,
) -> np.ndarray:
    """(n, H) products of fitted no-new-lesion probabilities per term.

    Missing previous sizes are replaced by the per-visit trimmed mean over
    the (possibly different) reference arrays ``trim_arr``.
    """
    T = arr.y.shape[1]
    z_entry = _z_entry(arr, T)
    if trim_arr is None:
        trim_arr = arr
    trim_z = _z_entry(trim_arr, T)
    n = z_entry.shape[0]
    if force_arm is not None:
        arm = force_arm
    elif arr.arm is not None:
        arm = arr.arm
    else:
        arm = None
    out = np.empty((n, len(terms)))
    for k, term in enumerate(terms):
        prod = np.ones(n)
        for t in range(1, term.n_prod + 1):
            z = z_entry[:, t - 1]
            missing = np.isnan(z)
            pi = progression.prob(t, np.where(missing, 0.0, z), arm)
            if np.any(missing):
                pi_t = _trimmed_pi(trim_arr, trim_z, progression, t, term, force_arm)
                pi = np.where(missing, pi_t, pi)
            prod = prod * (1.0 - pi)
        out[:, k] = prod
    return out


def patient_means(arr, tumour: TumourModel, force_arm=None) -> np.ndarray:
    """(n, T) model means of the log ratios given each patient's baseline."""
    mu = tumour.intercepts + tumour.baseline_slope * arr.z0[:, None]
    if tumour.arm_effects is not None:
        if force_arm is not None:
            r = np.full(arr.z0.size, float(force_arm))
        else:
            r = arr.arm
        mu = mu + tumour.arm_effects * r[:, None]
    return mu


def rectangle_probs(
    arr,
    tumour: TumourModel,
    terms,
    force_arm=None,
    n_points: int = 2048,
    n_shifts: int = 2,
    seed: int = DEFAULT_SEED,
) -> np.ndarray:
    """(n, H) rectangle probabilities per patient and term."""
    means = patient_means(arr, tumour, force_arm)
    out = np.empty((means.shape[0], len(terms)))
    for k, term in enumerate(terms):
        p, _ = rect_prob_batch(
            tumour.sigma, term.lower, term.upper, means,
            n_points=n_points, n_shifts=n_shifts, seed=seed,
        )
        out[:, k] = p
    return out


def maug_per_patient(
    arr,
    model: FittedModel,
    spec: EndpointSpec,
    trim_arr=None,
    force_arm=None,
    n_points: int = 2048,
    n_shifts: int = 2,
    seed: int = DEFAULT_SEED,
    rect: np.ndarray | None = None,
) -> np.ndarray:
    """Factored response probabilities; ``rect`` lets callers reuse the
    rectangle probabilities when only the logistic block changed."""
    terms = endpoint_terms(spec)
    if rect is None:
        rect = rectangle_probs(
            arr, model.tumour, terms, force_arm, n_points, n_shifts, seed
        )
    surv = survival_factors(arr, model.progression, terms, force_arm, trim_arr)
    return np.clip((rect * surv).sum(axis=1), 0.0, 1.0)


# ---------------------------------------------------------------------------
# exact estimator: weighted truncated-normal integration


class _SobolStream:
    """rng-shaped wrapper so the Genz sampler runs on scrambled Sobol points."""

    def __init__(self, d, seed):
        self._engine = qmc.Sobol(d, scramble=True, seed=seed)

    def random(self, shape):
        n, d = shape
        return self._engine.random(n)


def _weighted_samples_batch(cov, lower, upper, means, u):
    """Genz-weighted truncated-normal draws for a batch of mean vectors.

    u: (n, d) uniforms shared across the batch (common random numbers).
    Returns (samples (B, n, d) in original coordinate order, weights (B, n)).
    """
    means = np.atleast_2d(means)
    d = cov.shape[0]
    mu_bar = means.mean(axis=0)
    L, _, _, order = _integration_order(cov, lower - mu_bar, upper - mu_bar)
    a = (lower - means)[:, order]
    b = (upper - means)[:, order]
    B, n = means.shape[0], u.shape[0]
    from scipy.special import ndtr, ndtri

    y = np.empty((B, n, d))
    w = np.ones((B, n))
    for j in range(d):
        mu = y[:, :, :j] @ L[j, :j]
        dj = ndtr((a[:, j, None] - mu) / L[j, j])
        ej = ndtr((b[:, j, None] - mu) / L[j, j])
        y[:, :, j] = ndtri(np.clip(dj + u[None, :, j] * (ej - dj), _TINY, 1 - 1e-16))
        w *= ej - dj
    x = y @ L.T
    out = np.empty_like(x)
    out[:, :, order] = x
    out += means[:, None, :]
    np.clip(out, lower, upper, out=out)
    return out, w


def eaugbin_per_patient(
    arr,
    model: FittedModel,
    spec: EndpointSpec,
    force_arm=None,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = DEFAULT_SEED,
    n_streams: int = 4,
    with_error: bool = False,
):
    """Exact estimator: for each disjoint term, integrate the no-new-lesion
    product against the normal restricted to the term's rectangle.

    The integral is the weighted-sample average of (product x weight), using
    independently scrambled quasi-random streams; the optional error is a
    3-sigma bound from the spread across streams.
    """
    terms = endpoint_terms(spec)
    prog = model.progression
    means_full = patient_means(arr, model.tumour, force_arm)
    if force_arm is not None:
        arm = float(force_arm)
    elif arr.arm is not None:
        arm = arr.arm[:, None]
    else:
        arm = None
    n_per = max(n_samples // n_streams, 64)
    B = means_full.shape[0]
    total = np.zeros((n_streams, B))
    for k, term in enumerate(terms):
        finite = np.flatnonzero(np.isfinite(term.lower) | np.isfinite(term.upper))
        d_eff = max(term.n_prod, int(finite.max()) + 1 if finite.size else 1)
        cov = model.tumour.sigma[:d_eff, :d_eff]
        lo, hi = term.lower[:d_eff], term.upper[:d_eff]
        means = means_full[:, :d_eff]
        for s in range(n_streams):
            u = _SobolStream(d_eff, seed=(seed * 8 + s) & 0x7FFFFFFF).random(
                (n_per, d_eff)
            )
            x, w = _weighted_samples_batch(cov, lo, hi, means, u)
            g = np.ones((B, n_per))
            for t in range(1, term.n_prod + 1):
                if t == 1:
                    z_prev = arr.z0[:, None]
                else:
                    z_prev = arr.z0[:, None] * np.exp(x[:, :, t - 2])
                eta = prog.intercepts[t - 1] + prog.size_coefs[t - 1] * z_prev
                if prog.arm_coefs is not None and arm is not None:
                    eta = eta + prog.arm_coefs[t - 1] * arm
                g *= 1.0 - expit(eta)
            total[s] += (g * w).mean(axis=1)
    probs = np.clip(total.mean(axis=0), 0.0, 1.0)
    if with_error:
        err = 3.0 * total.std(axis=0, ddof=1) / np.sqrt(n_streams)
        return probs, err
    return probs


# ---------------------------------------------------------------------------
# public per-patient and trial-level API


def _single_patient_arr(p: PatientRecord, T: int):
    """Minimal array bundle for one patient (same shape contract as
    prepare_arrays output)."""
    from .modelfit import _Arrays

    y, _ = _patient_arrays(p, T)
    f = np.array([p.last_observed])
    d = np.full((1, T), np.nan)
    d[0, : p.last_observed] = p.new_lesion
    z_prev = np.full((1, T), np.nan)
    z_prev[0, : p.last_observed] = (p.z0, *p.sizes[: p.last_observed - 1])[
        : p.last_observed
    ]
    arm = None if p.arm is None else np.array([float(p.arm)])
    return _Arrays(y[None, :], f, np.array([p.z0]), arm, d, z_prev)


def _check_kind(spec, expected):
    if spec.kind != expected:
        raise ValidationError(f"endpoint kind {spec.kind!r}, expected {expected!r}")


def prob_fixed_eaugbin(
    patient: PatientRecord,
    model: FittedModel,
    spec: EndpointSpec,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = DEFAULT_SEED,
) -> float:
    _check_kind(spec, FIXED_TIME)
    arr = _single_patient_arr(patient, spec.T)
    return float(eaugbin_per_patient(arr, model, spec, None, n_samples, seed)[0])


def prob_bor_eaugbin(
    patient: PatientRecord,
    model: FittedModel,
    spec: EndpointSpec,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = DEFAULT_SEED,
) -> float:
    if spec.kind not in (BOR, BOR_CONFIRMED):
        raise ValidationError("expected a best-observed-response endpoint")
    arr = _single_patient_arr(patient, spec.T)
    return float(eaugbin_per_patient(arr, model, spec, None, n_samples, seed)[0])


def prob_fixed_maug(
    patient: PatientRecord,
    model: FittedModel,
    spec: EndpointSpec,
    dataset: TrialDataset,
    seed: int = DEFAULT_SEED,
) -> float:
    _check_kind(spec, FIXED_TIME)
    arr = _single_patient_arr(patient, spec.T)
    trim = prepare_arrays(dataset)
    return float(maug_per_patient(arr, model, spec, trim_arr=trim, seed=seed)[0])


def prob_bor_maug(
    patient: PatientRecord,
    model: FittedModel,
    spec: EndpointSpec,
    dataset: TrialDataset,
    seed: int = DEFAULT_SEED,
) -> float:
    if spec.kind not in (BOR, BOR_CONFIRMED):
        raise ValidationError("expected a best-observed-response endpoint")
    arr = _single_patient_arr(patient, spec.T)
    trim = prepare_arrays(dataset)
    return float(maug_per_patient(arr, model, spec, trim_arr=trim, seed=seed)[0])


def _classify_kind(spec: EndpointSpec):
    if spec.kind == FIXED_TIME:
        return "fixed_time", False
    return "bor", spec.kind == BOR_CONFIRMED


def mean_response(
    dataset: TrialDataset,
    model: FittedModel | None,
    spec: EndpointSpec,
    method: str,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = DEFAULT_SEED,
    force_arm=None,
    n_points: int = 2048,
    n_shifts: int = 2,
) -> ResponseEstimate:
    """Trial-mean response probability.

    Two-arm datasets without ``force_arm`` average the counterfactual means
    with every patient assigned to each arm in turn (2n contributions).
    """
    if method == METHOD_BIN:
        kind, conf = _classify_kind(spec)
        per = np.asarray(dataset.classify(kind, conf), dtype=float)
        return ResponseEstimate(float(per.mean()), per, METHOD_BIN)
    if model is None:
        raise ValidationError("model-based methods need a fitted model")
    arr = prepare_arrays(dataset)
    if model.two_arm and force_arm is None:
        parts = [
            _per_patient(arr, model, spec, method, n_samples, seed, a, n_points, n_shifts)
            for a in (0, 1)
        ]
        per = np.concatenate(parts)
    else:
        per = _per_patient(
            arr, model, spec, method, n_samples, seed, force_arm, n_points, n_shifts
        )
    return ResponseEstimate(float(per.mean()), per, method)


def _per_patient(arr, model, spec, method, n_samples, seed, force_arm, n_points, n_shifts):
    if method == METHOD_EAUGBIN:
        return eaugbin_per_patient(arr, model, spec, force_arm, n_samples, seed)
    if method == METHOD_MAUG:
        return maug_per_patient(
            arr, model, spec, trim_arr=arr, force_arm=force_arm,
            n_points=n_points, n_shifts=n_shifts, seed=seed,
        )
    raise ValidationError(f"unknown method {method!r}")


def arm_difference(
    dataset: TrialDataset,
    model: FittedModel,
    spec: EndpointSpec,
    method: str,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = DEFAULT_SEED,
    n_points: int = 2048,
    n_shifts: int = 2,
) -> float:
    """Counterfactual mean response difference, experimental minus control."""
    if not model.two_arm:
        raise ValidationError("arm difference needs a two-arm model")
    kwargs = dict(
        n_samples=n_samples, seed=seed, n_points=n_points, n_shifts=n_shifts
    )
    m1 = mean_response(dataset, model, spec, method, force_arm=1, **kwargs)
    m0 = mean_response(dataset, model, spec, method, force_arm=0, **kwargs)
    return m1.mean_probability - m0.mean_probability
