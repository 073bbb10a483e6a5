"""Multivariate normal rectangle probabilities and truncated sampling.

Rectangle probabilities use the Genz separation-of-variables transform with
a randomized (scrambled Sobol) quasi-Monte-Carlo rule; the error estimate is
a 3-sigma bound from the spread across independent scramblings.  The same
transform provides weighted samples from the normal restricted to a
rectangle, which back the importance-sampling integrals in `respprob`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .errors import DegenerateRegion, NotPositiveSemiDefinite, ToleranceNotReached

DEFAULT_ABS_TOL = 1e-5
DEFAULT_MAX_SAMPLES = 2**20
DEFAULT_SEED = 20230

_N_SHIFTS = 8
_TINY = 1e-15


@dataclass(frozen=True)
class MvnSpec:
    """Mean vector and symmetric PSD covariance of a multivariate normal."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean must be finite")
        if cov.shape != (mean.size, mean.size):
            raise ValueError("cov shape does not match mean length")
        if not np.allclose(cov, cov.T, atol=1e-10 * max(1.0, np.abs(cov).max())):
            raise ValueError("cov must be symmetric")
        chol_pivot(cov)  # raises NotPositiveSemiDefinite if invalid

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned region; entries may be -inf/+inf for half-open sides."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape:
            raise ValueError("lower/upper length mismatch")
        if not np.all(lower < upper):
            raise ValueError("lower must be strictly below upper")

    @property
    def dim(self) -> int:
        return self.lower.size

    @classmethod
    def full_space(cls, d: int) -> "Rectangle":
        return cls(np.full(d, -np.inf), np.full(d, np.inf))


@dataclass(frozen=True)
class RectProbResult:
    probability: float
    error_estimate: float
    samples_used: int
    converged: bool = True


def chol_pivot(cov: np.ndarray, tol: float = 1e-10):
    """Pivoted Cholesky factorization of a symmetric PSD matrix.

    Returns (L, order) with ``cov[order][:, order] == L @ L.T``.  Pivots on
    the largest remaining diagonal; a pivot below ``-tol * max(diag)``
    raises NotPositiveSemiDefinite.  Non-positive pivots within tolerance
    are clamped to zero.
    """
    a = np.array(cov, dtype=float, copy=True)
    d = a.shape[0]
    order = np.arange(d)
    L = np.zeros_like(a)
    threshold = tol * max(np.abs(np.diag(a)).max(), 1e-300)
    for j in range(d):
        diag = np.diag(a)[j:]
        k = j + int(np.argmax(diag))
        if a[k, k] < -threshold:
            raise NotPositiveSemiDefinite(
                f"pivot {a[k, k]:.3e} below -{threshold:.3e} at step {j}"
            )
        if k != j:
            a[[j, k], :] = a[[k, j], :]
            a[:, [j, k]] = a[:, [k, j]]
            L[[j, k], :] = L[[k, j], :]
            order[[j, k]] = order[[k, j]]
        pivot = max(a[j, j], 0.0)
        L[j, j] = np.sqrt(pivot)
        if L[j, j] > 0:
            L[j + 1 :, j] = a[j + 1 :, j] / L[j, j]
        a[j + 1 :, j + 1 :] -= np.outer(L[j + 1 :, j], L[j + 1 :, j])
    return L, order


def _integration_order(cov, lower, upper):
    """Genz variable ordering: greedily take the coordinate whose
    conditional slab carries the least mass, for variance reduction.

    Returns (L, a, b, order) with L the Cholesky factor of the reordered
    covariance and a, b the reordered bounds.
    """
    d = cov.shape[0]
    a = np.array(lower, dtype=float, copy=True)
    b = np.array(upper, dtype=float, copy=True)
    c = np.array(cov, dtype=float, copy=True)
    L = np.zeros((d, d))
    order = np.arange(d)
    y = np.zeros(d)  # conditional expectations of accepted coordinates
    for j in range(d):
        best, best_mass = j, np.inf
        for k in range(j, d):
            var = c[k, k] - L[k, :j] @ L[k, :j]
            if var <= 0:
                continue
            s = np.sqrt(var)
            mu = L[k, :j] @ y[:j]
            mass = ndtr((b[k] - mu) / s) - ndtr((a[k] - mu) / s)
            if mass < best_mass:
                best, best_mass = k, mass
        k = best
        if k != j:
            c[[j, k], :] = c[[k, j], :]
            c[:, [j, k]] = c[:, [k, j]]
            L[[j, k], :] = L[[k, j], :]
            a[[j, k]] = a[[k, j]]
            b[[j, k]] = b[[k, j]]
            order[[j, k]] = order[[k, j]]
        var = c[j, j] - L[j, :j] @ L[j, :j]
        if var < -1e-10 * max(1.0, c[j, j]):
            raise NotPositiveSemiDefinite("negative conditional variance")
        L[j, j] = np.sqrt(max(var, 1e-300))
        if j + 1 < d:
            L[j + 1 :, j] = (c[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
        # conditional expectation of a standard normal on the slab
        mu = L[j, :j] @ y[:j]
        lo = (a[j] - mu) / L[j, j]
        hi = (b[j] - mu) / L[j, j]
        mass = max(ndtr(hi) - ndtr(lo), _TINY)
        phi_lo = np.exp(-0.5 * lo**2) / np.sqrt(2 * np.pi) if np.isfinite(lo) else 0.0
        phi_hi = np.exp(-0.5 * hi**2) / np.sqrt(2 * np.pi) if np.isfinite(hi) else 0.0
        y[j] = (phi_lo - phi_hi) / mass
    return L, a, b, order


def _genz_batch(L, a, b, u):
    """QMC estimates of P(a <= L y <= b), y std normal, for batched bounds.

    L: (d, d) lower Cholesky.  a, b: (..., d) bounds (already reordered and
    mean-subtracted).  u: (n, d-1) points in (0,1).  Returns the per-batch
    mean of the Genz integrand, shape a.shape[:-1].
    """
    d = L.shape[0]
    if d == 1:
        return ndtr(b[..., 0] / L[0, 0]) - ndtr(a[..., 0] / L[0, 0])
    n = u.shape[0]
    batch = a.shape[:-1]
    dj = ndtr(a[..., 0, None] / L[0, 0]) * np.ones(batch + (n,))
    ej = ndtr(b[..., 0, None] / L[0, 0]) * np.ones(batch + (n,))
    f = ej - dj
    ys = np.empty(batch + (n, d - 1))
    for j in range(1, d):
        w = u[:, j - 1]
        q = np.clip(dj + w * (ej - dj), _TINY, 1 - 1e-16)
        ys[..., j - 1] = ndtri(q)
        mu = ys[..., :j] @ L[j, :j]
        dj = ndtr((a[..., j, None] - mu) / L[j, j])
        ej = ndtr((b[..., j, None] - mu) / L[j, j])
        f = f * (ej - dj)
    return f.mean(axis=-1)


def _reduce_rectangle(mean, cov, lower, upper):
    """Drop coordinates unbounded on both sides; they impose no constraint."""
    keep = ~(np.isneginf(lower) & np.isposinf(upper))
    idx = np.flatnonzero(keep)
    return mean[idx], cov[np.ix_(idx, idx)], lower[idx], upper[idx]


def _sobol_points(d, n, seed):
    return qmc.Sobol(d, scramble=True, seed=seed).random(n)


def rect_prob_batch(
    cov,
    lower,
    upper,
    means,
    n_points: int = 2048,
    n_shifts: int = 2,
    seed: int = DEFAULT_SEED,
):
    """Rectangle probabilities for many mean vectors sharing one covariance.

    means: (B, d) array.  Returns (probs (B,), error_estimates (B,)).
    Deterministic given the seed.  Coordinates unbounded on both sides are
    marginalized out before integration.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    keep = ~(np.isneginf(lower) & np.isposinf(upper))
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return np.ones(means.shape[0]), np.zeros(means.shape[0])
    cov_r = np.asarray(cov, dtype=float)[np.ix_(idx, idx)]
    lo, hi = lower[idx], upper[idx]
    mu = means[:, idx]
    if idx.size == 1:
        s = np.sqrt(cov_r[0, 0])
        p = ndtr((hi[0] - mu[:, 0]) / s) - ndtr((lo[0] - mu[:, 0]) / s)
        return p, np.zeros_like(p)
    # order from the batch-average bounds; shared across the batch
    mu_bar = mu.mean(axis=0)
    L, _, _, order = _integration_order(cov_r, lo - mu_bar, hi - mu_bar)
    a = lo[order] - mu[:, order]
    b = hi[order] - mu[:, order]
    d = idx.size
    ests = np.empty((n_shifts, means.shape[0]))
    for s in range(n_shifts):
        u = _sobol_points(d - 1, n_points, seed=(seed * _N_SHIFTS + s) & 0x7FFFFFFF)
        ests[s] = _genz_batch(L, a, b, u)
    p = np.clip(ests.mean(axis=0), 0.0, 1.0)
    err = (
        3.0 * ests.std(axis=0, ddof=1) / np.sqrt(n_shifts)
        if n_shifts > 1
        else np.full(means.shape[0], np.nan)
    )
    return p, err


def mvn_rect_prob(
    spec: MvnSpec,
    rect: Rectangle,
    abs_tol: float = DEFAULT_ABS_TOL,
    max_samples: int = DEFAULT_MAX_SAMPLES,
    seed: int = DEFAULT_SEED,
) -> RectProbResult:
    """P(lower <= Y <= upper) for Y ~ N(mean, cov), with a QMC error bound.

    Doubles the point count until the 3-sigma error estimate drops below
    ``abs_tol`` or ``max_samples`` integrand evaluations are spent; in the
    latter case the result is returned with ``converged=False`` and a
    ToleranceNotReached warning.
    """
    if abs_tol <= 0:
        raise ValueError("abs_tol must be positive")
    if rect.dim != spec.dim:
        raise ValueError("rectangle/spec dimension mismatch")
    mean, cov, lo, hi = _reduce_rectangle(spec.mean, spec.cov, rect.lower, rect.upper)
    d = mean.size
    if d == 0:
        return RectProbResult(1.0, 0.0, 0)
    if d == 1:
        s = np.sqrt(cov[0, 0])
        p = float(ndtr((hi[0] - mean[0]) / s) - ndtr((lo[0] - mean[0]) / s))
        return RectProbResult(p, 0.0, 0)
    L, a, b, _ = _integration_order(cov, lo - mean, hi - mean)
    n = 1024
    used = 0
    while True:
        ests = np.empty(_N_SHIFTS)
        for s_i in range(_N_SHIFTS):
            u = _sobol_points(d - 1, n, seed=(seed * _N_SHIFTS + s_i) & 0x7FFFFFFF)
            ests[s_i] = _genz_batch(L, a[None, :], b[None, :], u)[0]
        used += _N_SHIFTS * n
        p = float(np.clip(ests.mean(), 0.0, 1.0))
        err = float(3.0 * ests.std(ddof=1) / np.sqrt(_N_SHIFTS))
        if err <= abs_tol:
            return RectProbResult(p, err, used)
        if used + 2 * _N_SHIFTS * n > max_samples:
            warnings.warn(
                f"error estimate {err:.2e} above abs_tol {abs_tol:.2e} "
                f"after {used} samples",
                ToleranceNotReached,
            )
            return RectProbResult(p, err, used, converged=False)
        n *= 2


def _weighted_truncated_samples(spec, rect, n, rng):
    """Genz sequential-conditioning proposals inside ``rect`` with weights.

    Returns (samples (n, d) in the original coordinate order, weights (n,)).
    The weight of a draw is the product of conditional slab masses; weighted
    averages of g(samples) estimate the *unnormalized* integral of g against
    the normal density over the rectangle (so weights alone average to the
    rectangle probability).
    """
    mean, cov, lo, hi = spec.mean, spec.cov, rect.lower, rect.upper
    d = mean.size
    L, a, b, order = _integration_order(cov, lo - mean, hi - mean)
    u = rng.random((n, d))
    y = np.empty((n, d))
    w = np.ones(n)
    for j in range(d):
        mu = y[:, :j] @ L[j, :j]
        dj = ndtr((a[j] - mu) / L[j, j])
        ej = ndtr((b[j] - mu) / L[j, j])
        y[:, j] = ndtri(np.clip(dj + u[:, j] * (ej - dj), _TINY, 1 - 1e-16))
        w *= ej - dj
    x = y @ L.T
    out = np.empty_like(x)
    out[:, order] = x
    out += mean
    # guard against round-off leaking marginally outside the region
    np.clip(out, rect.lower, rect.upper, out=out)
    return out, w


def truncated_mvn_sample(
    spec: MvnSpec, rect: Rectangle, n: int, seed: int = DEFAULT_SEED
) -> np.ndarray:
    """Draw n points from N(mean, cov) restricted to ``rect``.

    Proposals come from the Genz sequential-conditioning construction and
    are importance-resampled to the exact truncated distribution.
    """
    if rect.dim != spec.dim:
        raise ValueError("rectangle/spec dimension mismatch")
    prob = mvn_rect_prob(spec, rect, abs_tol=1e-4)
    if prob.probability < 1e-12:
        raise DegenerateRegion(
            f"rectangle probability {prob.probability:.3e} underflows"
        )
    rng = np.random.default_rng(seed)
    m = max(4 * n, 4096)
    x, w = _weighted_truncated_samples(spec, rect, m, rng)
    if not np.any(w > 0):
        raise DegenerateRegion("all proposal weights are zero")
    # systematic resampling keeps the draw deterministic given the seed
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    pos = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(cdf, pos)
    return x[idx]
