"""Maximum-likelihood fitting of the tumour-size and new-lesion models.

The log size ratios follow a multivariate normal with per-visit intercepts,
a common baseline-size slope, optional per-visit arm effects, and an
unstructured covariance; missingness is monotone, so each patient
contributes the marginal density of their observed prefix.  New-lesion
progression is a per-visit logistic regression on the previous size.

The joint parameter vector theta is packed in a fixed canonical order
(mean intercepts, baseline slope, [arm effects], log-Cholesky of the
covariance, then per-visit logistic coefficients) and its covariance comes
from the inverse observed information, obtained by numerically
differentiating the analytic score of each likelihood block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .errors import (
    EmptyRiskSet,
    InsufficientData,
    SeparationWarning,
    SingularDesign,
    SingularInformation,
)
from .trialdata import TrialDataset, log_ratios

COEF_CAP = 20.0
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
HESSIAN_REL_STEP = 1e-4


@dataclass(frozen=True)
class TumourModel:
    """MVN model of the log size ratios given baseline size (and arm)."""

    intercepts: np.ndarray  # per-visit, length T
    baseline_slope: float
    sigma: np.ndarray  # T x T, unstructured
    arm_effects: np.ndarray | None = None  # per-visit, two-arm only

    @property
    def T(self) -> int:
        return self.intercepts.size

    def mean_vector(self, z0: float, arm: int | None = None) -> np.ndarray:
        mu = self.intercepts + self.baseline_slope * z0
        if self.arm_effects is not None and arm:
            mu = mu + self.arm_effects
        return mu


@dataclass(frozen=True)
class ProgressionModel:
    """Per-visit logistic models for new-lesion progression."""

    intercepts: np.ndarray  # alpha_t
    size_coefs: np.ndarray  # gamma_t
    arm_coefs: np.ndarray | None = None  # beta_t, two-arm only

    @property
    def T(self) -> int:
        return self.intercepts.size

    def prob(self, t: int, z_prev, arm=None) -> np.ndarray:
        """P(new-lesion progression at visit t | previous size, arm)."""
        eta = self.intercepts[t - 1] + self.size_coefs[t - 1] * np.asarray(z_prev)
        if self.arm_coefs is not None and arm is not None:
            eta = eta + self.arm_coefs[t - 1] * np.asarray(arm)
        return expit(eta)


@dataclass(frozen=True)
class FittedModel:
    tumour: TumourModel
    progression: ProgressionModel
    theta: np.ndarray
    theta_cov: np.ndarray
    two_arm: bool
    loglik: float

    @property
    def T(self) -> int:
        return self.tumour.T

    @property
    def layout(self):
        return theta_layout(self.T, self.two_arm)

    def with_theta(self, theta: np.ndarray) -> "FittedModel":
        tumour, progression = unpack_theta(theta, self.T, self.two_arm)
        return replace(self, tumour=tumour, progression=progression, theta=theta)

    def to_report(self) -> str:
        """Plain-text key=value dump of theta for audit."""
        lines = [f"T={self.T}", f"two_arm={self.two_arm}", f"loglik={self.loglik!r}"]
        for name, value in zip(theta_labels(self.T, self.two_arm), self.theta):
            lines.append(f"{name}={value!r}")
        for name, se in zip(
            theta_labels(self.T, self.two_arm), np.sqrt(np.diag(self.theta_cov))
        ):
            lines.append(f"se.{name}={se!r}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# theta packing


def theta_layout(T: int, two_arm: bool):
    """Canonical index map: name -> slice into theta."""
    layout = {}
    i = 0

    def take(name, k):
        nonlocal i
        layout[name] = slice(i, i + k)
        i += k

    take("mean_intercepts", T)
    take("baseline_slope", 1)
    if two_arm:
        take("arm_effects", T)
    take("log_chol", T * (T + 1) // 2)
    for t in range(1, T + 1):
        take(f"logit_{t}", 3 if two_arm else 2)
    layout["total"] = i
    return layout


def theta_labels(T: int, two_arm: bool):
    labels = [f"m{t}" for t in range(1, T + 1)] + ["b"]
    if two_arm:
        labels += [f"a{t}" for t in range(1, T + 1)]
    labels += [f"lchol{r}{c}" for r in range(1, T + 1) for c in range(1, r + 1)]
    for t in range(1, T + 1):
        labels += [f"alpha{t}", f"beta{t}", f"gamma{t}"] if two_arm else [
            f"alpha{t}",
            f"gamma{t}",
        ]
    return labels


def _tril_indices(T):
    return np.tril_indices(T)


def pack_sigma(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with logged diagonal, packed row-major."""
    C = np.linalg.cholesky(sigma)
    C = C.copy()
    np.fill_diagonal(C, np.log(np.diag(C)))
    return C[_tril_indices(C.shape[0])]

def unpack_sigma(packed: np.ndarray, T: int) -> np.ndarray:
    C = np.zeros((T, T))
    C[_tril_indices(T)] = packed
    np.fill_diagonal(C, np.exp(np.diag(C)))
    return C @ C.T


def pack_theta(tumour: TumourModel, progression: ProgressionModel) -> np.ndarray:
    two_arm = tumour.arm_effects is not None
    parts = [tumour.intercepts, [tumour.baseline_slope]]
    if two_arm:
        parts.append(tumour.arm_effects)
    parts.append(pack_sigma(tumour.sigma))
    for t in range(progression.T):
        if two_arm:
            parts.append(
                [
                    progression.intercepts[t],
                    progression.arm_coefs[t],
                    progression.size_coefs[t],
                ]
            )
        else:
            parts.append([progression.intercepts[t], progression.size_coefs[t]])
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


def unpack_theta(theta: np.ndarray, T: int, two_arm: bool):
    layout = theta_layout(T, two_arm)
    m = theta[layout["mean_intercepts"]]
    b = float(theta[layout["baseline_slope"]][0])
    a = theta[layout["arm_effects"]] if two_arm else None
    sigma = unpack_sigma(theta[layout["log_chol"]], T)
    alphas = np.empty(T)
    gammas = np.empty(T)
    betas = np.empty(T) if two_arm else None
    for t in range(1, T + 1):
        block = theta[layout[f"logit_{t}"]]
        alphas[t - 1] = block[0]
        if two_arm:
            betas[t - 1] = block[1]
            gammas[t - 1] = block[2]
        else:
            gammas[t - 1] = block[1]
    tumour = TumourModel(m, b, sigma, a)
    progression = ProgressionModel(alphas, gammas, betas)
    return tumour, progression


# ---------------------------------------------------------------------------
# data preparation


@dataclass(frozen=True)
class _Arrays:
    y: np.ndarray  # (n, T) log ratios, NaN beyond last observed visit
    f: np.ndarray  # (n,) observed prefix lengths
    z0: np.ndarray
    arm: np.ndarray | None
    d: np.ndarray  # (n, T) new-lesion indicators, NaN beyond prefix
    z_prev: np.ndarray  # (n, T) size entering each visit, NaN beyond prefix


def prepare_arrays(data: TrialDataset) -> _Arrays:
    n, T = data.n, data.T
    y = np.full((n, T), np.nan)
    d = np.full((n, T), np.nan)
    z_prev = np.full((n, T), np.nan)
    f = np.zeros(n, dtype=int)
    z0 = np.empty(n)
    arm = np.empty(n) if data.two_arm else None
    # canonical patient order so fits are invariant to input shuffling
    ordered = sorted(data.patients, key=lambda p: (p.id, p.z0, p.sizes))
    for i, p in enumerate(ordered):
        ratios = log_ratios(p)
        k = p.last_observed
        f[i] = k
        z0[i] = p.z0
        y[i, :k] = ratios
        d[i, :k] = p.new_lesion
        z_prev[i, :k] = (p.z0, *p.sizes[: k - 1])[:k]
        if arm is not None:
            arm[i] = p.arm
    return _Arrays(y, f, z0, arm, d, z_prev)


# ---------------------------------------------------------------------------
# MVN block: log-likelihood, analytic score, fitting


def _mvn_params(theta_mvn: np.ndarray, T: int, two_arm: bool):
    m = theta_mvn[:T]
    b = theta_mvn[T]
    k = T + 1
    a = None
    if two_arm:
        a = theta_mvn[k : k + T]
        k += T
    lam = theta_mvn[k:]
    C = np.zeros((T, T))
    C[_tril_indices(T)] = lam
    np.fill_diagonal(C, np.exp(np.diag(C)))
    return m, b, a, C


def mvn_loglik_grad(theta_mvn: np.ndarray, arr: _Arrays, T: int, two_arm: bool):
    """Observed-data log-likelihood of the MVN block and its gradient."""
    m, b, a, C = _mvn_params(theta_mvn, T, two_arm)
    sigma = C @ C.T
    ll = 0.0
    grad_m = np.zeros(T)
    grad_b = 0.0
    grad_a = np.zeros(T) if two_arm else None
    grad_sigma = np.zeros((T, T))
    for fl in np.unique(arr.f):
        if fl == 0:
            continue
        rows = np.flatnonzero(arr.f == fl)
        k = len(rows)
        yk = arr.y[rows, :fl]
        mu = m[:fl] + b * arr.z0[rows, None]
        if two_arm:
            mu = mu + a[:fl] * arr.arm[rows, None]
        r = yk - mu
        sub = sigma[:fl, :fl]
        try:
            L = np.linalg.cholesky(sub)
        except np.linalg.LinAlgError:
            return -np.inf, np.zeros_like(theta_mvn)
        w = np.linalg.solve(sub, r.T).T  # Sigma^-1 r, (k, fl)
        quad = np.einsum("ij,ij->", r, w)
        ll += -0.5 * (
            k * fl * np.log(2 * np.pi) + 2 * k * np.log(np.diag(L)).sum() + quad
        )
        grad_m[:fl] += w.sum(axis=0)
        grad_b += float(arr.z0[rows] @ w.sum(axis=1))
        if two_arm:
            grad_a[:fl] += arr.arm[rows] @ w
        gs = 0.5 * (w.T @ w - k * np.linalg.inv(sub))
        grad_sigma[:fl, :fl] += gs
    # chain rule through sigma = C C^T with logged diagonal
    gC = 2.0 * grad_sigma @ C
    gC *= np.tri(T)
    gC[np.diag_indices(T)] *= np.diag(C)
    pieces = [grad_m, [grad_b]]
    if two_arm:
        pieces.append(grad_a)
    pieces.append(gC[_tril_indices(T)])
    return ll, np.concatenate([np.atleast_1d(np.asarray(p)) for p in pieces])


def _sequential_warm_start(arr: _Arrays, T: int, two_arm: bool):
    """Factorized-regression estimate (free per-visit slopes) projected to
    the common-slope layout; exact MLE when T = 1."""
    n = arr.f.size
    m_marg = np.zeros(T)
    b_marg = np.zeros(T)
    a_marg = np.zeros(T)
    sigma = np.zeros((T, T))
    for t in range(T):
        rows = np.flatnonzero(arr.f >= t + 1)
        cols = [np.ones(len(rows)), arr.z0[rows]]
        if two_arm:
            cols.append(arr.arm[rows])
        for j in range(t):
            cols.append(arr.y[rows, j])
        X = np.column_stack(cols)
        yv = arr.y[rows, t]
        if len(rows) <= X.shape[1]:
            raise InsufficientData(f"visit {t + 1}: {len(rows)} patients at risk")
        coef, _, rank, _ = np.linalg.lstsq(X, yv, rcond=None)
        if rank < X.shape[1]:
            raise SingularDesign(f"collinear regressors at visit {t + 1}")
        resid = yv - X @ coef
        s2 = float(resid @ resid) / len(rows)
        off = 3 if two_arm else 2
        phi = coef[off:]
        m_marg[t] = coef[0] + phi @ m_marg[:t]
        b_marg[t] = coef[1] + phi @ b_marg[:t]
        if two_arm:
            a_marg[t] = coef[2] + phi @ a_marg[:t]
        sigma[t, :t] = phi @ sigma[:t, :t]
        sigma[:t, t] = sigma[t, :t]
        sigma[t, t] = s2 + phi @ sigma[:t, :t] @ phi
    b = float(b_marg.mean())
    m = m_marg + (b_marg - b) * arr.z0.mean()
    # keep the start strictly PD
    w, V = np.linalg.eigh(sigma)
    sigma = (V * np.maximum(w, 1e-8)) @ V.T
    parts = [m, [b]]
    if two_arm:
        parts.append(a_marg)
    parts.append(pack_sigma(sigma))
    return np.concatenate([np.atleast_1d(np.asarray(p)) for p in parts])


def fit_tumour(data: TrialDataset, two_arm: bool | None = None):
    """MLE of the MVN tumour model under monotone missingness.

    Returns (TumourModel, loglik).  Starts from the factorized sequential
    regressions and refines the common-slope model by quasi-Newton ascent
    of the observed-data log-likelihood.
    """
    if two_arm is None:
        two_arm = data.two_arm
    arr = prepare_arrays(data)
    T = data.T
    if np.sum(arr.f >= 1) < T + 3:
        raise InsufficientData("need at least T+3 patients with a post-baseline visit")
    for t in range(1, T + 1):
        if np.sum(arr.f >= t) < 2:
            raise InsufficientData(f"visit {t} observed for fewer than 2 patients")
    x0 = _sequential_warm_start(arr, T, two_arm)

    def objective(th):
        ll, g = mvn_loglik_grad(th, arr, T, two_arm)
        return -ll, -g

    res = minimize(objective, x0, jac=True, method="BFGS",
                   options={"gtol": 1e-9, "maxiter": 1000})
    theta = res.x
    ll, _ = mvn_loglik_grad(theta, arr, T, two_arm)
    m, b, a, C = _mvn_params(theta, T, two_arm)
    return TumourModel(m.copy(), float(b), C @ C.T, None if a is None else a.copy()), float(ll)


# ---------------------------------------------------------------------------
# logistic block


def _newton_logistic(X: np.ndarray, y: np.ndarray, label: str):
    """Newton-Raphson logistic MLE with separation capping."""
    beta = np.zeros(X.shape[1])
    for _ in range(NEWTON_MAX_ITER):
        p = expit(X @ beta)
        score = X.T @ (y - p)
        if np.max(np.abs(score)) < NEWTON_TOL:
            break
        w = np.maximum(p * (1 - p), 1e-10)
        H = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            raise SingularDesign(f"singular logistic information at {label}") from None
        # damp huge steps so separated fits walk to the cap gracefully
        nrm = np.max(np.abs(step))
        if nrm > 5.0:
            step *= 5.0 / nrm
        beta = beta + step
        if np.max(np.abs(beta)) > COEF_CAP:
            beta = np.clip(beta, -COEF_CAP, COEF_CAP)
            warnings.warn(
                f"separation detected at {label}; coefficients capped at "
                f"{COEF_CAP:g}",
                SeparationWarning,
            )
            break
    return beta


def logistic_loglik(theta_logit: np.ndarray, arr: _Arrays, T: int, two_arm: bool):
    """Sum of the per-visit logistic log-likelihoods."""
    k = 3 if two_arm else 2
    ll = 0.0
    for t in range(T):
        rows = np.flatnonzero(arr.f >= t + 1)
        if rows.size == 0:
            continue
        block = theta_logit[t * k : (t + 1) * k]
        eta = block[0] + block[-1] * arr.z_prev[rows, t]
        if two_arm:
            eta = eta + block[1] * arr.arm[rows]
        y = arr.d[rows, t]
        ll += float(y @ eta - np.logaddexp(0.0, eta).sum())
    return ll


def logistic_score(theta_logit: np.ndarray, arr: _Arrays, T: int, two_arm: bool):
    k = 3 if two_arm else 2
    grad = np.zeros(T * k)
    for t in range(T):
        rows = np.flatnonzero(arr.f >= t + 1)
        if rows.size == 0:
            continue
        block = theta_logit[t * k : (t + 1) * k]
        cols = [np.ones(rows.size)]
        if two_arm:
            cols.append(arr.arm[rows])
        cols.append(arr.z_prev[rows, t])
        X = np.column_stack(cols)
        resid = arr.d[rows, t] - expit(X @ block)
        grad[t * k : (t + 1) * k] = X.T @ resid
    return grad


def fit_progression(data: TrialDataset, two_arm: bool | None = None):
    """Per-visit logistic MLEs; returns (ProgressionModel, loglik)."""
    if two_arm is None:
        two_arm = data.two_arm
    arr = prepare_arrays(data)
    T = data.T
    alphas = np.empty(T)
    gammas = np.empty(T)
    betas = np.empty(T) if two_arm else None
    for t in range(T):
        rows = np.flatnonzero(arr.f >= t + 1)
        if rows.size == 0:
            raise EmptyRiskSet(f"no patients at risk at visit {t + 1}")
        cols = [np.ones(rows.size)]
        if two_arm:
            cols.append(arr.arm[rows])
        cols.append(arr.z_prev[rows, t])
        X = np.column_stack(cols)
        beta = _newton_logistic(X, arr.d[rows, t], label=f"visit {t + 1}")
        alphas[t] = beta[0]
        if two_arm:
            betas[t] = beta[1]
        gammas[t] = beta[-1]
    model = ProgressionModel(alphas, gammas, betas)
    theta_logit = np.concatenate(
        [
            [alphas[t], betas[t], gammas[t]] if two_arm else [alphas[t], gammas[t]]
            for t in range(T)
        ]
    )
    return model, logistic_loglik(theta_logit, arr, T, two_arm)


# ---------------------------------------------------------------------------
# assembly


def _hessian_from_score(score_fn, theta: np.ndarray, rel_step=HESSIAN_REL_STEP):
    """Central-difference Hessian from an analytic score function."""
    d = theta.size
    H = np.empty((d, d))
    for j in range(d):
        h = rel_step * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        H[:, j] = (score_fn(tp) - score_fn(tm)) / (2 * h)
    return 0.5 * (H + H.T)


def assemble(data: TrialDataset, two_arm: bool | None = None) -> FittedModel:
    """Fit both blocks and build the joint theta with its covariance."""
    if two_arm is None:
        two_arm = data.two_arm
    arr = prepare_arrays(data)
    T = data.T
    tumour, ll_mvn = fit_tumour(data, two_arm)
    progression, ll_logit = fit_progression(data, two_arm)
    theta = pack_theta(tumour, progression)
    layout = theta_layout(T, two_arm)
    n_mvn = layout["log_chol"].stop
    theta_mvn = theta[:n_mvn]
    theta_logit = theta[n_mvn:]

    H_mvn = _hessian_from_score(
        lambda th: mvn_loglik_grad(th, arr, T, two_arm)[1], theta_mvn
    )
    H_logit = _hessian_from_score(
        lambda th: logistic_score(th, arr, T, two_arm), theta_logit
    )
    info = np.zeros((theta.size, theta.size))
    info[:n_mvn, :n_mvn] = -H_mvn
    info[n_mvn:, n_mvn:] = -H_logit
    try:
        cov = np.linalg.inv(info)
        if not np.all(np.isfinite(cov)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn("observed information singular; using pseudo-inverse",
                      SingularInformation)
        cov = np.linalg.pinv(info)
    cov = 0.5 * (cov + cov.T)
    return FittedModel(
        tumour=tumour,
        progression=progression,
        theta=theta,
        theta_cov=cov,
        two_arm=two_arm,
        loglik=ll_mvn + ll_logit,
    )


def observed_loglik(model: FittedModel, data: TrialDataset) -> float:
    """Full observed-data log-likelihood of a model on a dataset."""
    arr = prepare_arrays(data)
    T = data.T
    layout = theta_layout(T, model.two_arm)
    n_mvn = layout["log_chol"].stop
    ll_mvn, _ = mvn_loglik_grad(model.theta[:n_mvn], arr, T, model.two_arm)
    ll_logit = logistic_loglik(model.theta[n_mvn:], arr, T, model.two_arm)
    return float(ll_mvn + ll_logit)
