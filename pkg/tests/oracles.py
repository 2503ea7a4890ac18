"""First-principles enumeration oracles.

Every probability is rebuilt here from raw coefficients with scipy, so these
share no code with the package's recursions or its own path helpers.
"""

import itertools
import math

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import norm

from mnarhmm.core import Ignorable, StateBernoulli

EPS = 1e-12
FLOOR = 1e-3


def _clog(p):
    return np.log(np.clip(p, EPS, 1 - EPS))


def _softmax_with_reference(coef, x):
    eta = np.concatenate([[0.0], coef @ x])
    return np.exp(eta - logsumexp(eta))


def _covariate_row(names, series, t):
    return np.array([1.0] + [float(series.covariates[n][t]) for n in names])


def log_terms(model, series):
    """log pi (K,), log A_t (T-1, K, K), log emission weights (T, K)."""
    K, T = model.n_states, len(series)
    init = model.initial
    log_pi = _clog(_softmax_with_reference(init.coefficients,
                                           _covariate_row(init.covariates, series, 0)))
    log_A = np.empty((max(T - 1, 0), K, K))
    for t in range(1, T):
        for i, row in enumerate(model.transition):
            x = _covariate_row(row.covariates, series, t)
            log_A[t - 1, i] = _clog(_softmax_with_reference(row.coefficients, x))
    log_B = np.empty((T, K))
    miss = model.missingness
    for t in range(T):
        y = series.y[t]
        for k, e in enumerate(model.emissions):
            if isinstance(miss, Ignorable):
                p_miss = None
            elif isinstance(miss, StateBernoulli):
                p_miss = miss.phi[k]
            else:
                p_miss = expit(miss.beta[k] @ _covariate_row(miss.covariates, series, t))
            if math.isnan(y):
                log_B[t, k] = 0.0 if p_miss is None else _clog(p_miss)
            else:
                dens = norm.logpdf(y, e.mu, max(e.sigma, FLOOR))
                log_B[t, k] = dens + (0.0 if p_miss is None else _clog(1 - p_miss))
    return log_pi, log_A, log_B


def path_scores(model, series):
    """(paths (K**T, T) 0-based, joint log-probabilities) over all paths."""
    K, T = model.n_states, len(series)
    log_pi, log_A, log_B = log_terms(model, series)
    paths = np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64).reshape(-1, T)
    lp = log_pi[paths[:, 0]] + log_B[0, paths[:, 0]]
    for t in range(1, T):
        lp += log_A[t - 1, paths[:, t - 1], paths[:, t]] + log_B[t, paths[:, t]]
    return paths, lp


def enumerate_log_likelihood(model, series):
    return float(logsumexp(path_scores(model, series)[1]))


def enumerate_best_score(model, series):
    return float(path_scores(model, series)[1].max())


def path_score(model, series, path):
    """Joint log-probability of a 1-based path."""
    log_pi, log_A, log_B = log_terms(model, series)
    p = np.asarray(path) - 1
    lp = log_pi[p[0]] + log_B[0, p[0]]
    for t in range(1, len(p)):
        lp += log_A[t - 1, p[t - 1], p[t]] + log_B[t, p[t]]
    return float(lp)
