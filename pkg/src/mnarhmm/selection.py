"""Model comparison: parameter counts, information criteria, likelihood-ratio
tests and Wald intervals from a numerical Hessian."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .core import (
    COEF_CAP,
    SIGMA_FLOOR,
    HmmModel,
    StateBernoulli,
    StateLogistic,
    log_likelihood,
    pack_parameters,
    unpack_parameters,
)
from .errors import NestingError, SingularInformationError
from .estimation import constrain_missingness

BOUNDARY_LOGIT = 15.0


def count_free_parameters(model: HmmModel) -> int:
    """Identifiable parameters: reference categories excluded, tied
    missingness counted once."""
    return len(pack_parameters(model)[0])


def count_raw_parameters(model: HmmModel) -> int:
    """Parameter count including reference-category coefficients, as
    reported in a ``#par`` column."""
    K = model.n_states
    ci = len(model.initial.covariates)
    ct = len(model.transition_covariates)
    n = K * (1 + ci) + K * K * (1 + ct) + 2 * K
    miss = model.missingness
    if isinstance(miss, StateBernoulli):
        n += 1 if miss.tied else K
    elif isinstance(miss, StateLogistic):
        n += (1 if miss.tied else K) * (1 + len(miss.covariates))
    return n


def aic(log_likelihood, free_count):
    return -2.0 * log_likelihood + 2.0 * free_count


def bic(log_likelihood, free_count, nobs):
    if nobs < 1:
        raise ValueError("nobs must be at least 1")
    return -2.0 * log_likelihood + math.log(nobs) * free_count


def constrain_missingness_equal(model: HmmModel) -> HmmModel:
    """Share one missingness parameter set across all states."""
    return constrain_missingness(model)


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    n_states: int
    log_likelihood: float
    n_raw: int
    n_free: int
    aic: float
    bic: float

    @classmethod
    def from_fit(cls, label, model: HmmModel, log_lik, nobs):
        free = count_free_parameters(model)
        return cls(label, model.n_states, float(log_lik), count_raw_parameters(model), free,
                   aic(log_lik, free), bic(log_lik, free, nobs))


COMPARISON_COLUMNS = ("model", "states", "log_likelihood", "n_par", "n_free", "aic", "bic",
                      "aic_rank", "bic_rank")


def _ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=int)
    ranks[order] = np.arange(1, len(values) + 1)
    return ranks


def write_comparison_csv(rows, path):
    rows = list(rows)
    aic_rank = _ranks([r.aic for r in rows])
    bic_rank = _ranks([r.bic for r in rows])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_COLUMNS)
        for r, ra, rb in zip(rows, aic_rank, bic_rank):
            w.writerow([r.label, r.n_states, repr(r.log_likelihood), r.n_raw, r.n_free,
                        repr(r.aic), repr(r.bic), ra, rb])


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    df: int
    p_value: float


def chi2_sf(x, df):
    """Upper-tail chi-square probability."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def likelihood_ratio_test(ll_full, ll_restricted, df) -> LrtResult:
    if df < 1:
        raise ValueError("df must be at least 1")
    stat = 2.0 * (ll_full - ll_restricted)
    if stat < -2e-6:
        raise NestingError(
            f"restricted log-likelihood {ll_restricted} exceeds the full model's {ll_full}"
        )
    stat = max(stat, 0.0)
    return LrtResult(stat, int(df), chi2_sf(stat, df))


def normal_quantile(p):
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return float(special.ndtri(p))


# ---------------------------------------------------------------------------
# Wald intervals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterInterval:
    name: str
    estimate: float
    lower: float
    upper: float
    se: float
    flagged: bool = False
    reason: str = ""


def _fd_step(theta):
    return 1e-4 * np.maximum(1.0, np.abs(theta))


def boundary_flags(model: HmmModel, names, values):
    """Parameters whose finite-difference stencil would cross a clamp."""
    h = _fd_step(values)
    flags = {}
    for i, (name, v) in enumerate(zip(names, values)):
        if name.startswith("sigma[") and v - h[i] <= SIGMA_FLOOR:
            flags[name] = "sigma at floor"
        elif name.startswith("phi") and (v - h[i] <= 1e-6 or v + h[i] >= 1 - 1e-6):
            flags[name] = "probability at boundary"
        elif not (name.startswith("mu[") or name.startswith("sigma[") or name.startswith("phi")):
            if abs(v) >= BOUNDARY_LOGIT or abs(v) + h[i] >= COEF_CAP:
                flags[name] = "logit coefficient diverging"
    return flags


def numerical_hessian(f, theta, free):
    """Central-difference Hessian of ``f`` over the indices ``free``."""
    theta = np.asarray(theta, dtype=float)
    h = _fd_step(theta)
    n = len(free)
    H = np.empty((n, n))
    f0 = f(theta)

    def at(offsets):
        x = theta.copy()
        for idx, s in offsets:
            x[idx] += s * h[idx]
        return f(x)

    for a, i in enumerate(free):
        H[a, a] = (at([(i, 1)]) - 2 * f0 + at([(i, -1)])) / (h[i] ** 2)
        for b in range(a):
            j = free[b]
            v = (at([(i, 1), (j, 1)]) - at([(i, 1), (j, -1)])
                 - at([(i, -1), (j, 1)]) + at([(i, -1), (j, -1)])) / (4 * h[i] * h[j])
            H[a, b] = H[b, a] = v
    return H


def wald_intervals(names, theta, H, level, flags=None):
    """Intervals from the Hessian ``H`` of a log-likelihood over the
    unflagged parameters (in order)."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    flags = flags or {}
    free = [i for i, n in enumerate(names) if n not in flags]
    info = -np.asarray(H)
    w, v = np.linalg.eigh(info)
    tol = max(1e-10 * max(np.abs(w).max(initial=0.0), 1.0), 1e-12)
    null = w <= tol
    if np.any(null):
        weights = np.abs(v[:, null]).max(axis=1)
        involved = [names[free[a]] for a in np.flatnonzero(weights > 0.1)]
        raise SingularInformationError(
            f"observed information is not positive definite; involved parameters: {involved}",
            null_space=tuple(involved),
        )
    cov = (v / w) @ v.T
    z = normal_quantile(0.5 + level / 2.0)
    out = []
    se = dict(zip(free, np.sqrt(np.diag(cov))))
    for i, n in enumerate(names):
        est = float(theta[i])
        if n in flags:
            out.append(ParameterInterval(n, est, math.nan, math.nan, math.nan, True, flags[n]))
        else:
            s = float(se[i])
            out.append(ParameterInterval(n, est, est - z * s, est + z * s, s))
    return out


def approx_confidence_intervals(fit, dataset, level=0.95):
    """Wald intervals for every free parameter of a fitted model.

    ``fit`` is a :class:`~mnarhmm.estimation.FitResult` or an
    :class:`HmmModel`. Boundary-adjacent parameters are flagged and held
    fixed rather than intervaled.
    """
    model = fit if isinstance(fit, HmmModel) else fit.model
    names, theta = pack_parameters(model)
    flags = boundary_flags(model, names, theta)
    free = [i for i, n in enumerate(names) if n not in flags]

    def f(x):
        return log_likelihood(unpack_parameters(model, x), dataset)

    H = numerical_hessian(f, theta, free)
    return wald_intervals(names, theta, H, level, flags)


__all__ = [
    "ComparisonRow",
    "LrtResult",
    "ParameterInterval",
    "aic",
    "bic",
    "approx_confidence_intervals",
    "chi2_sf",
    "constrain_missingness_equal",
    "count_free_parameters",
    "count_raw_parameters",
    "likelihood_ratio_test",
    "normal_quantile",
    "write_comparison_csv",
]
