"""Model types and exact inference for Gaussian HMMs with missing responses.

Three missingness regimes are supported through the emission weight of a
record: ignorable (missing responses contribute a weight of one), state
dependent Bernoulli missingness, and state dependent logistic missingness on
named covariates. Responses and missingness indicators are conditionally
independent given the hidden state.

States are labelled 1..K in every public function; compiled kernels work
0-based internally.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping, Sequence, Union

import numpy as np

from . import _kernels
from .errors import CapacityError, NumericalDegeneracyError, SchemaError

SIGMA_FLOOR = 1e-3
PROB_EPS = 1e-12
COEF_CAP = 30.0
BRUTE_FORCE_MAX_PATHS = 10**7

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def _frozen_array(a, ndim=None):
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _softmax_ref(logits):
    """Softmax over the last axis with an implicit zero logit prepended."""
    shape = logits.shape[:-1] + (logits.shape[-1] + 1,)
    full = np.zeros(shape)
    full[..., 1:] = logits
    full -= full.max(axis=-1, keepdims=True)
    np.exp(full, out=full)
    full /= full.sum(axis=-1, keepdims=True)
    return full


# ---------------------------------------------------------------------------
# model components
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianEmission:
    mu: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma", max(float(self.sigma), SIGMA_FLOOR))

    def density(self, y):
        z = (y - self.mu) / self.sigma
        return math.exp(-0.5 * z * z) / (self.sigma * _SQRT_2PI)


@dataclass(frozen=True, eq=False)
class MultinomialLogit:
    """Multinomial logit with category 1 as the zero-coefficient reference.

    ``coefficients`` has shape (K-1, 1+C): an intercept column followed by one
    column per named covariate.
    """

    coefficients: np.ndarray
    covariates: tuple = ()

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float)
        if coef.ndim != 2:
            raise ValueError("coefficients must be (K-1, 1+C)")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if coef.shape[1] != 1 + len(self.covariates):
            raise ValueError(
                f"{coef.shape[1]} coefficient columns for {len(self.covariates)} covariates"
            )
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    @property
    def n_categories(self):
        return self.coefficients.shape[0] + 1

    def probs(self, design):
        design = np.asarray(design, dtype=float)
        return _softmax_ref(design @ self.coefficients.T)

    @classmethod
    def uniform(cls, n_categories, covariates=()):
        return cls(np.zeros((n_categories - 1, 1 + len(covariates))), covariates)

    @classmethod
    def from_probs(cls, probs, covariates=()):
        """Intercept-only logit reproducing ``probs``; covariate effects zero."""
        p = clamp_prob(np.asarray(probs, dtype=float))
        coef = np.zeros((len(p) - 1, 1 + len(covariates)))
        coef[:, 0] = np.log(p[1:] / p[0])
        return cls(coef, covariates)


@dataclass(frozen=True)
class Ignorable:
    """Missing responses carry weight one; no parameters."""

    covariates = ()


@dataclass(frozen=True, eq=False)
class StateBernoulli:
    phi: np.ndarray
    tied: bool = False
    covariates = ()

    def __post_init__(self):
        phi = clamp_prob(np.array(self.phi, dtype=float).ravel())
        if self.tied and not np.all(phi == phi[0]):
            raise ValueError("tied missingness requires identical phis")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def n_states(self):
        return len(self.phi)

    def missing_probs(self, design):
        design = np.asarray(design)
        return np.broadcast_to(self.phi, design.shape[:-1] + (len(self.phi),))


@dataclass(frozen=True, eq=False)
class StateLogistic:
    """Per-state logistic missingness; ``beta`` is (K, 1+C), intercept first."""

    beta: np.ndarray
    covariates: tuple = ()
    tied: bool = False

    def __post_init__(self):
        beta = np.clip(np.array(self.beta, dtype=float), -COEF_CAP, COEF_CAP)
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if beta.ndim != 2 or beta.shape[1] != 1 + len(self.covariates):
            raise ValueError("beta must be (K, 1+C) for C covariates")
        if self.tied and not np.all(beta == beta[0]):
            raise ValueError("tied missingness requires identical coefficient rows")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def n_states(self):
        return self.beta.shape[0]

    def missing_probs(self, design):
        eta = np.asarray(design, dtype=float) @ self.beta.T
        return clamp_prob(1.0 / (1.0 + np.exp(-eta)))


MissingnessSpec = Union[Ignorable, StateBernoulli, StateLogistic]


def _permute_logit(logit, order):
    full = np.vstack([np.zeros((1, logit.coefficients.shape[1])), logit.coefficients])[order]
    return MultinomialLogit(full[1:] - full[0], logit.covariates)


@dataclass(frozen=True, eq=False)
class HmmModel:
    initial: MultinomialLogit
    transition: tuple
    emissions: tuple
    missingness: MissingnessSpec = field(default_factory=Ignorable)

    def __post_init__(self):
        object.__setattr__(self, "transition", tuple(self.transition))
        object.__setattr__(self, "emissions", tuple(self.emissions))
        K = len(self.emissions)
        if K < 1:
            raise ValueError("need at least one state")
        if self.initial.n_categories != K:
            raise ValueError("initial model does not have K categories")
        if len(self.transition) != K:
            raise ValueError("need one transition model per origin state")
        names = {row.covariates for row in self.transition}
        if len(names) != 1:
            raise ValueError("transition rows must share their covariates")
        for row in self.transition:
            if row.n_categories != K:
                raise ValueError("transition row does not have K categories")
        if not isinstance(self.missingness, Ignorable) and self.missingness.n_states != K:
            raise ValueError("missingness parameters must be given per state")

    @property
    def n_states(self):
        return len(self.emissions)

    @property
    def mus(self):
        return np.array([e.mu for e in self.emissions])

    @property
    def sigmas(self):
        return np.array([e.sigma for e in self.emissions])

    @property
    def transition_covariates(self):
        return self.transition[0].covariates

    @property
    def covariate_registry(self):
        return {
            "initial": self.initial.covariates,
            "transition": self.transition_covariates,
            "missingness": tuple(self.missingness.covariates),
        }

    @property
    def required_covariates(self):
        seen = []
        for names in self.covariate_registry.values():
            for name in names:
                if name not in seen:
                    seen.append(name)
        return tuple(seen)

    def initial_at(self, covariates=None):
        design = _design_from_mapping(self.initial.covariates, covariates or {})
        return self.initial.probs(design)

    def transition_at(self, covariates=None):
        design = _design_from_mapping(self.transition_covariates, covariates or {})
        return np.stack([row.probs(design) for row in self.transition])

    def with_missingness(self, missingness):
        return replace(self, missingness=missingness)

    def permuted(self, order):
        """Relabel states so new state ``k`` is old state ``order[k]`` (0-based).

        Logit coefficients are re-expressed against the new reference state,
        so the relabelled model defines the same distribution for any
        covariate values.
        """
        order = [int(k) for k in order]
        if sorted(order) != list(range(self.n_states)):
            raise ValueError(f"{order} is not a permutation of 0..{self.n_states - 1}")
        miss = self.missingness
        if isinstance(miss, StateBernoulli):
            miss = StateBernoulli(miss.phi[order], miss.tied)
        elif isinstance(miss, StateLogistic):
            miss = StateLogistic(miss.beta[order], miss.covariates, miss.tied)
        return HmmModel(
            _permute_logit(self.initial, order),
            tuple(_permute_logit(self.transition[k], order) for k in order),
            tuple(self.emissions[k] for k in order),
            miss,
        )

    @classmethod
    def from_probabilities(cls, pi, A, mu, sigma, missingness=None,
                           initial_covariates=(), transition_covariates=()):
        A = np.asarray(A, dtype=float)
        return cls(
            initial=MultinomialLogit.from_probs(pi, initial_covariates),
            transition=tuple(
                MultinomialLogit.from_probs(row, transition_covariates) for row in A
            ),
            emissions=tuple(GaussianEmission(m, s) for m, s in zip(mu, sigma)),
            missingness=missingness if missingness is not None else Ignorable(),
        )


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    t: int
    y: float | None
    covariates: Mapping[str, float] = field(default_factory=dict)

    @property
    def m(self):
        return int(self.y is None)


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """One unit's series; ``y`` holds NaN where the response is missing."""

    id: object
    y: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    start: int = 1

    def __post_init__(self):
        y = _frozen_array(self.y, ndim=1)
        if len(y) == 0:
            raise ValueError("time series must be nonempty")
        covs = {}
        for name, values in dict(self.covariates).items():
            arr = _frozen_array(values, ndim=1)
            if len(arr) != len(y):
                raise ValueError(f"covariate {name!r} has length {len(arr)} != {len(y)}")
            covs[name] = arr
        if self.start < 1:
            raise ValueError("time indices start at 1 or later")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariates", covs)

    def __len__(self):
        return len(self.y)

    @property
    def m(self):
        return np.isnan(self.y).astype(int)

    @property
    def records(self):
        out = []
        for i, yv in enumerate(self.y):
            covs = {k: float(v[i]) for k, v in self.covariates.items()}
            out.append(Record(self.start + i, None if np.isnan(yv) else float(yv), covs))
        return tuple(out)

    @classmethod
    def from_records(cls, id, records: Sequence[Record]):
        records = list(records)
        if not records:
            raise ValueError("time series must be nonempty")
        for a, b in zip(records, records[1:]):
            if b.t != a.t + 1:
                raise ValueError(f"time indices must increase by 1 (got {a.t} then {b.t})")
        names = list(records[0].covariates)
        for r in records:
            if set(r.covariates) != set(names):
                raise SchemaError(f"record at t={r.t} has covariates {sorted(r.covariates)}")
        y = [np.nan if r.y is None else r.y for r in records]
        covs = {n: [r.covariates[n] for r in records] for n in names}
        return cls(id, y, covs, start=records[0].t)

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.id == other.id
            and self.start == other.start
            and np.array_equal(self.y, other.y, equal_nan=True)
            and self.covariates.keys() == other.covariates.keys()
            and all(np.array_equal(v, other.covariates[k]) for k, v in self.covariates.items())
        )

    __hash__ = None


class _Batch:
    """Equal-length series stacked for the compiled kernels."""

    def __init__(self, positions, series):
        self.positions = np.asarray(positions)
        self.ids = [s.id for s in series]
        self.y = np.stack([s.y for s in series])
        self.obs = ~np.isnan(self.y)
        self.covariates = {
            name: np.stack([s.covariates[name] for s in series])
            for name in series[0].covariates
        }
        self._designs = {}

    @property
    def shape(self):
        return self.y.shape

    def design(self, names):
        names = tuple(names)
        if names not in self._designs:
            cols = [np.ones(self.y.shape)]
            for name in names:
                if name not in self.covariates:
                    raise SchemaError(f"missing required covariate {name!r}")
                cols.append(self.covariates[name])
            self._designs[names] = np.stack(cols, axis=-1)
        return self._designs[names]


@dataclass(frozen=True, eq=False)
class Dataset:
    series: tuple
    covariate_names: tuple = None

    def __post_init__(self):
        series = tuple(self.series)
        if not series:
            raise ValueError("dataset must contain at least one series")
        names = self.covariate_names
        if names is None:
            names = tuple(series[0].covariates)
        names = tuple(names)
        for s in series:
            if set(s.covariates) != set(names):
                raise SchemaError(
                    f"series {s.id!r} covariates {sorted(s.covariates)} do not match schema {list(names)}"
                )
        object.__setattr__(self, "series", series)
        object.__setattr__(self, "covariate_names", names)

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.covariate_names == other.covariate_names
            and len(self.series) == len(other.series)
            and all(a == b for a, b in zip(self.series, other.series))
        )

    __hash__ = None

    @cached_property
    def batches(self):
        groups = {}
        for pos, s in enumerate(self.series):
            groups.setdefault(len(s), []).append(pos)
        return [_Batch(pos, [self.series[p] for p in pos]) for pos in groups.values()]

    @cached_property
    def n_observed(self):
        return int(sum(np.count_nonzero(~np.isnan(s.y)) for s in self.series))

    @cached_property
    def n_records(self):
        return int(sum(len(s) for s in self.series))


@dataclass(frozen=True, eq=False)
class Posteriors:
    gamma: np.ndarray
    xi: np.ndarray
    log_likelihood: float
    scaling: np.ndarray


# ---------------------------------------------------------------------------
# per-record quantities (scalar path; also used by the enumeration oracle)
# ---------------------------------------------------------------------------


def _design_from_mapping(names, covariates):
    row = [1.0]
    for name in names:
        if name not in covariates:
            raise SchemaError(f"missing required covariate {name!r}")
        row.append(float(covariates[name]))
    return np.array(row)


def initial_probs(model: HmmModel, record: Record) -> np.ndarray:
    return model.initial.probs(_design_from_mapping(model.initial.covariates, record.covariates))


def transition_matrix(model: HmmModel, record: Record) -> np.ndarray:
    """Transition probabilities into ``record``'s time step, rows = origin."""
    design = _design_from_mapping(model.transition_covariates, record.covariates)
    return np.stack([row.probs(design) for row in model.transition])


def missing_probability(model: HmmModel, state: int, record: Record) -> float:
    miss = model.missingness
    if isinstance(miss, Ignorable):
        raise TypeError("ignorable missingness has no probability model")
    if isinstance(miss, StateBernoulli):
        return float(miss.phi[state - 1])
    x = _design_from_mapping(miss.covariates, record.covariates)
    eta = float(x @ miss.beta[state - 1])
    p = 1.0 / (1.0 + math.exp(-eta))
    return min(max(p, PROB_EPS), 1.0 - PROB_EPS)


def emission_weight(model: HmmModel, state: int, record: Record) -> float:
    if not 1 <= state <= model.n_states:
        raise IndexError(f"state {state} outside 1..{model.n_states}")
    if isinstance(model.missingness, Ignorable):
        if record.y is None:
            return 1.0
        return model.emissions[state - 1].density(record.y)
    p = missing_probability(model, state, record)
    if record.y is None:
        return p
    return (1.0 - p) * model.emissions[state - 1].density(record.y)


# ---------------------------------------------------------------------------
# vectorised path
# ---------------------------------------------------------------------------


def emission_weights(model: HmmModel, batch: _Batch) -> np.ndarray:
    """Weights of shape (n, T, K) for a stacked batch."""
    miss = model.missingness
    n, T = batch.shape
    if isinstance(miss, Ignorable):
        return _kernels.emission_weights(batch.y, model.mus, model.sigmas, _NO_MISS, False)
    if isinstance(miss, StateBernoulli):
        p = np.empty((n, T, model.n_states))
        p[...] = miss.phi
    else:
        p = miss.missing_probs(batch.design(miss.covariates))
    return _kernels.emission_weights(batch.y, model.mus, model.sigmas, p, True)


_NO_MISS = np.zeros((1, 1, 1))


def chain_arrays(model: HmmModel, batch: _Batch):
    """Initial probabilities (n, K) and transitions (n, T-1, K, K)."""
    n, T = batch.shape
    K = model.n_states
    pi = model.initial.probs(batch.design(model.initial.covariates)[:, 0, :])
    if T == 1:
        return pi, np.zeros((n, 0, K, K))
    if model.transition_covariates:
        X = batch.design(model.transition_covariates)[:, 1:, :]
        A = np.stack([row.probs(X) for row in model.transition], axis=-2)
    else:
        A = np.broadcast_to(model.transition_at(), (n, T - 1, K, K)).copy()
    return pi, A


def _raise_bad(bad, batch):
    idx = np.flatnonzero(bad >= 0)
    if idx.size:
        i = idx[0]
        raise NumericalDegeneracyError(int(bad[i]) + 1, batch.ids[i])


def batch_posteriors(model: HmmModel, batch: _Batch):
    pi, A = chain_arrays(model, batch)
    B = emission_weights(model, batch)
    gamma, xi, ll, scale, bad = _kernels.forward_backward(pi, A, B)
    _raise_bad(bad, batch)
    return gamma, xi, ll, scale


def series_log_likelihoods(model: HmmModel, dataset: Dataset) -> np.ndarray:
    """Per-series log-likelihoods in dataset order."""
    out = np.empty(len(dataset))
    for batch in dataset.batches:
        pi, A = chain_arrays(model, batch)
        B = emission_weights(model, batch)
        ll, bad = _kernels.forward_loglik(pi, A, B)
        _raise_bad(bad, batch)
        out[batch.positions] = ll
    return out


def forward_backward(model: HmmModel, series: TimeSeries) -> Posteriors:
    batch = _Batch([0], [series])
    gamma, xi, ll, scale = batch_posteriors(model, batch)
    return Posteriors(gamma[0], xi[0], float(ll[0]), scale[0])


def log_likelihood(model: HmmModel, dataset: Dataset) -> float:
    return float(np.sum(series_log_likelihoods(model, dataset)))


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def viterbi_batch(model: HmmModel, batch: _Batch):
    pi, A = chain_arrays(model, batch)
    B = emission_weights(model, batch)
    paths, scores = _kernels.viterbi(_log(pi), _log(A), _log(B))
    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        raise NumericalDegeneracyError(None, batch.ids[bad[0]])
    return paths + 1, scores


def viterbi(model: HmmModel, series: TimeSeries) -> np.ndarray:
    """MAP state path (labels 1..K); ties go to the lower state index."""
    paths, _ = viterbi_batch(model, _Batch([0], [series]))
    return paths[0]


def viterbi_all(model: HmmModel, dataset: Dataset):
    out = [None] * len(dataset)
    for batch in dataset.batches:
        paths, _ = viterbi_batch(model, batch)
        for pos, path in zip(batch.positions, paths):
            out[pos] = path
    return out


def posteriors_all(model: HmmModel, dataset: Dataset):
    out = [None] * len(dataset)
    for batch in dataset.batches:
        gamma, xi, ll, scale = batch_posteriors(model, batch)
        for j, pos in enumerate(batch.positions):
            out[pos] = Posteriors(gamma[j], xi[j], float(ll[j]), scale[j])
    return out


# ---------------------------------------------------------------------------
# enumeration oracle
# ---------------------------------------------------------------------------


def _path_terms(model, series):
    records = series.records
    K = model.n_states
    log_pi = _log(initial_probs(model, records[0]))
    log_A = [_log(transition_matrix(model, r)) for r in records[1:]]
    log_B = np.array([[_log(emission_weight(model, k + 1, r)) for k in range(K)] for r in records])
    return log_pi, log_A, log_B


def _path_log_probs(log_pi, log_A, log_B, paths):
    paths = np.asarray(paths)
    T = log_B.shape[0]
    lp = log_pi[paths[:, 0]] + log_B[0, paths[:, 0]]
    for t in range(1, T):
        lp = lp + log_A[t - 1][paths[:, t - 1], paths[:, t]] + log_B[t, paths[:, t]]
    return lp


def _enumerate(K, T, chunk=200_000):
    it = itertools.product(range(K), repeat=T)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        yield np.array(block, dtype=np.int64).reshape(len(block), T)


def brute_force_log_likelihood(model: HmmModel, series: TimeSeries) -> float:
    """Exact log-likelihood by summing over all K**T state paths."""
    K, T = model.n_states, len(series)
    if K**T > BRUTE_FORCE_MAX_PATHS:
        raise CapacityError(f"{K}**{T} paths exceeds the enumeration budget")
    terms = _path_terms(model, series)
    chunks = [_path_log_probs(*terms, paths) for paths in _enumerate(K, T)]
    lp = np.concatenate(chunks)
    top = lp.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(math.fsum(np.exp(lp - top))))


def path_log_probability(model: HmmModel, series: TimeSeries, path) -> float:
    """Joint log-probability of a 1-based state path and the series."""
    terms = _path_terms(model, series)
    return float(_path_log_probs(*terms, np.asarray(path)[None, :] - 1)[0])


def brute_force_viterbi(model: HmmModel, series: TimeSeries):
    """Best path and its score by exhaustive enumeration (first maximum wins)."""
    K, T = model.n_states, len(series)
    if K**T > BRUTE_FORCE_MAX_PATHS:
        raise CapacityError(f"{K}**{T} paths exceeds the enumeration budget")
    terms = _path_terms(model, series)
    best, best_path = -np.inf, None
    for paths in _enumerate(K, T):
        lp = _path_log_probs(*terms, paths)
        i = int(np.argmax(lp))
        if best_path is None or lp[i] > best:
            best, best_path = float(lp[i]), paths[i] + 1
    return best_path, best


# ---------------------------------------------------------------------------
# flat parameter vectors
# ---------------------------------------------------------------------------


def _coef_label(names, c):
    return "(Intercept)" if c == 0 else names[c - 1]


def pack_parameters(model: HmmModel):
    """Free parameters as (names, values); reference categories are excluded
    and tied missingness parameters appear once."""
    names, values = [], []
    K = model.n_states
    for k, e in enumerate(model.emissions, 1):
        names.append(f"mu[{k}]")
        values.append(e.mu)
    for k, e in enumerate(model.emissions, 1):
        names.append(f"sigma[{k}]")
        values.append(e.sigma)
    cov = model.initial.covariates
    for j in range(1, K):
        for c in range(1 + len(cov)):
            names.append(f"init[{j + 1}].{_coef_label(cov, c)}")
            values.append(model.initial.coefficients[j - 1, c])
    cov = model.transition_covariates
    for i, row in enumerate(model.transition, 1):
        for j in range(1, K):
            for c in range(1 + len(cov)):
                names.append(f"trans[{i}->{j + 1}].{_coef_label(cov, c)}")
                values.append(row.coefficients[j - 1, c])
    miss = model.missingness
    if isinstance(miss, StateBernoulli):
        if miss.tied:
            names.append("phi")
            values.append(miss.phi[0])
        else:
            for k in range(K):
                names.append(f"phi[{k + 1}]")
                values.append(miss.phi[k])
    elif isinstance(miss, StateLogistic):
        states = [None] if miss.tied else range(K)
        for k in states:
            prefix = "miss" if k is None else f"miss[{k + 1}]"
            row = miss.beta[0 if k is None else k]
            for c in range(len(row)):
                names.append(f"{prefix}.{_coef_label(miss.covariates, c)}")
                values.append(row[c])
    return names, np.array(values, dtype=float)


def unpack_parameters(model: HmmModel, values) -> HmmModel:
    """Inverse of :func:`pack_parameters` using ``model`` as the template."""
    values = np.asarray(values, dtype=float)
    K = model.n_states
    pos = 0

    def take(n):
        nonlocal pos
        out = values[pos:pos + n]
        pos += n
        return out

    mu = take(K)
    sigma = take(K)
    ci = len(model.initial.covariates)
    initial = MultinomialLogit(take((K - 1) * (1 + ci)).reshape(K - 1, 1 + ci),
                               model.initial.covariates)
    ct = len(model.transition_covariates)
    transition = tuple(
        MultinomialLogit(take((K - 1) * (1 + ct)).reshape(K - 1, 1 + ct),
                         model.transition_covariates)
        for _ in range(K)
    )
    miss = model.missingness
    if isinstance(miss, StateBernoulli):
        phi = np.repeat(take(1), K) if miss.tied else take(K)
        miss = StateBernoulli(phi, miss.tied)
    elif isinstance(miss, StateLogistic):
        p = 1 + len(miss.covariates)
        beta = np.tile(take(p), (K, 1)) if miss.tied else take(K * p).reshape(K, p)
        miss = StateLogistic(beta, miss.covariates, miss.tied)
    if pos != len(values):
        raise ValueError(f"expected {pos} parameters, got {len(values)}")
    return HmmModel(initial, transition,
                    tuple(GaussianEmission(m, s) for m, s in zip(mu, sigma)), miss)
