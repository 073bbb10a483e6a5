"""Shared fixtures/helpers: hand-built fitted models and a small
model-faithful record generator used across test modules."""

import math

import numpy as np

from augbin.modelfit import FittedModel, ProgressionModel, TumourModel, pack_theta
from augbin.trialdata import PatientRecord, TrialDataset


def make_model(mu, b, sigma, alphas, gammas, arm_effects=None, betas=None):
    tumour = TumourModel(
        np.asarray(mu, dtype=float),
        float(b),
        np.asarray(sigma, dtype=float),
        None if arm_effects is None else np.asarray(arm_effects, dtype=float),
    )
    prog = ProgressionModel(
        np.asarray(alphas, dtype=float),
        np.asarray(gammas, dtype=float),
        None if betas is None else np.asarray(betas, dtype=float),
    )
    theta = pack_theta(tumour, prog)
    return FittedModel(
        tumour=tumour,
        progression=prog,
        theta=theta,
        theta_cov=np.zeros((theta.size, theta.size)),
        two_arm=arm_effects is not None,
        loglik=0.0,
    )


def simulate_records(model, n, T, seed, arms=None):
    """Draw patients from the model itself (latent normal + sequential
    new-lesion progression truncating the record)."""
    rng = np.random.default_rng(seed)
    z0 = rng.uniform(0.2, 1.2, n)
    patients = []
    for i in range(n):
        r = None if arms is None else arms[i]
        mu = model.tumour.mean_vector(z0[i], r)
        y = rng.multivariate_normal(mu, model.tumour.sigma)
        sizes, nl = [], []
        z_prev = z0[i]
        for t in range(1, T + 1):
            p_nl = float(model.progression.prob(t, z_prev, r))
            sizes.append(z0[i] * math.exp(y[t - 1]))
            if rng.random() < p_nl:
                nl.append(1)
                break
            nl.append(0)
            z_prev = sizes[-1]
        patients.append(PatientRecord(f"p{i}", z0[i], tuple(sizes), tuple(nl), arm=r))
    return TrialDataset(tuple(patients), T=T)
