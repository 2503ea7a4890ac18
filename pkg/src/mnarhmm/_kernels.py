"""Compiled inner loops for scaled forward-backward and Viterbi.

All kernels take stacked equal-length series: ``pi`` (n, K), ``A`` (n, T-1, K, K)
and emission weights ``B`` (n, T, K). States are 0-based here.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def forward_backward(pi, A, B):
    n, T, K = B.shape
    gamma = np.zeros((n, T, K))
    xi = np.zeros((n, max(T - 1, 0), K, K))
    scale = np.zeros((n, T))
    loglik = np.zeros(n)
    bad = np.full(n, -1, dtype=np.int64)
    alpha = np.empty((T, K))
    beta = np.empty((T, K))
    for s in range(n):
        c = 0.0
        for k in range(K):
            alpha[0, k] = pi[s, k] * B[s, 0, k]
            c += alpha[0, k]
        if not (c > 0.0) or not np.isfinite(c):
            bad[s] = 0
            continue
        for k in range(K):
            alpha[0, k] /= c
        scale[s, 0] = c
        failed = False
        for t in range(1, T):
            c = 0.0
            for j in range(K):
                acc = 0.0
                for i in range(K):
                    acc += alpha[t - 1, i] * A[s, t - 1, i, j]
                alpha[t, j] = acc * B[s, t, j]
                c += alpha[t, j]
            if not (c > 0.0) or not np.isfinite(c):
                bad[s] = t
                failed = True
                break
            for j in range(K):
                alpha[t, j] /= c
            scale[s, t] = c
        if failed:
            continue
        ll = 0.0
        for t in range(T):
            ll += np.log(scale[s, t])
        loglik[s] = ll

        for k in range(K):
            beta[T - 1, k] = 1.0
        for t in range(T - 2, -1, -1):
            for i in range(K):
                acc = 0.0
                for j in range(K):
                    acc += A[s, t, i, j] * B[s, t + 1, j] * beta[t + 1, j]
                beta[t, i] = acc / scale[s, t + 1]

        for t in range(T):
            tot = 0.0
            for k in range(K):
                g = alpha[t, k] * beta[t, k]
                gamma[s, t, k] = g
                tot += g
            for k in range(K):
                gamma[s, t, k] /= tot
        for t in range(T - 1):
            tot = 0.0
            for i in range(K):
                for j in range(K):
                    v = (alpha[t, i] * A[s, t, i, j] * B[s, t + 1, j]
                         * beta[t + 1, j] / scale[s, t + 1])
                    xi[s, t, i, j] = v
                    tot += v
            for i in range(K):
                for j in range(K):
                    xi[s, t, i, j] /= tot
    return gamma, xi, loglik, scale, bad


@numba.njit(cache=True)
def forward_loglik(pi, A, B):
    """Log-likelihood only; skips the backward pass."""
    n, T, K = B.shape
    loglik = np.zeros(n)
    bad = np.full(n, -1, dtype=np.int64)
    alpha = np.empty(K)
    nxt = np.empty(K)
    for s in range(n):
        c = 0.0
        for k in range(K):
            alpha[k] = pi[s, k] * B[s, 0, k]
            c += alpha[k]
        if not (c > 0.0) or not np.isfinite(c):
            bad[s] = 0
            continue
        ll = np.log(c)
        for k in range(K):
            alpha[k] /= c
        for t in range(1, T):
            c = 0.0
            for j in range(K):
                acc = 0.0
                for i in range(K):
                    acc += alpha[i] * A[s, t - 1, i, j]
                nxt[j] = acc * B[s, t, j]
                c += nxt[j]
            if not (c > 0.0) or not np.isfinite(c):
                bad[s] = t
                break
            for j in range(K):
                alpha[j] = nxt[j] / c
            ll += np.log(c)
        loglik[s] = ll
    return loglik, bad


@numba.njit(cache=True)
def viterbi(log_pi, log_A, log_B):
    n, T, K = log_B.shape
    paths = np.zeros((n, T), dtype=np.int64)
    best_scores = np.empty(n)
    delta = np.empty((T, K))
    back = np.zeros((T, K), dtype=np.int64)
    for s in range(n):
        for k in range(K):
            delta[0, k] = log_pi[s, k] + log_B[s, 0, k]
        for t in range(1, T):
            for j in range(K):
                best = -np.inf
                arg = 0
                for i in range(K):
                    v = delta[t - 1, i] + log_A[s, t - 1, i, j]
                    if v > best:
                        best = v
                        arg = i
                delta[t, j] = best + log_B[s, t, j]
                back[t, j] = arg
        best = -np.inf
        arg = 0
        for k in range(K):
            if delta[T - 1, k] > best:
                best = delta[T - 1, k]
                arg = k
        best_scores[s] = best
        paths[s, T - 1] = arg
        for t in range(T - 1, 0, -1):
            paths[s, t - 1] = back[t, paths[s, t]]
    return paths, best_scores


@numba.njit(cache=True)
def emission_weights(y, mu, sigma, pmiss, use_miss):
    """Gaussian density times the missingness channel; NaN marks missing."""
    n, T = y.shape
    K = mu.shape[0]
    out = np.empty((n, T, K))
    norm = 1.0 / np.sqrt(2.0 * np.pi)
    for s in range(n):
        for t in range(T):
            v = y[s, t]
            if np.isnan(v):
                for k in range(K):
                    out[s, t, k] = pmiss[s, t, k] if use_miss else 1.0
            else:
                for k in range(K):
                    z = (v - mu[k]) / sigma[k]
                    d = np.exp(-0.5 * z * z) * norm / sigma[k]
                    out[s, t, k] = (1.0 - pmiss[s, t, k]) * d if use_miss else d
    return out
