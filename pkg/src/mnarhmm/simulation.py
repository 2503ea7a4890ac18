"""Simulation scenarios, replication harness and state-recovery metrics."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Dataset,
    HmmModel,
    Ignorable,
    StateBernoulli,
    StateLogistic,
    TimeSeries,
    viterbi_all,
)
from .errors import MnarHmmError
from .estimation import FitConfig, default_jobs, em_fit, multi_start_fit

log = logging.getLogger(__name__)

FAMILIES = ("MAR", "MNAR-state", "MNAR-time")
TIME_COVARIATE = "t"


# ---------------------------------------------------------------------------
# missingness mechanisms of the generating process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateBernoulliMechanism:
    phi: tuple

    def probability(self, t, states):
        return np.asarray(self.phi)[states]


@dataclass(frozen=True)
class ConstantRate:
    p: float

    def probability(self, t, states):
        return np.full(np.shape(states), self.p, dtype=float)


@dataclass(frozen=True)
class TimeLogistic:
    beta0: float
    beta_time: float

    def probability(self, t, states):
        t = np.asarray(t, dtype=float)
        p = 1.0 / (1.0 + np.exp(-(self.beta0 + self.beta_time * t)))
        return np.broadcast_to(p, np.shape(states)).copy()


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    mu: tuple
    sigma: tuple
    pi: tuple
    A: tuple
    missingness: object
    n_series: int = 100
    n_times: int = 50

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        A = np.asarray(self.A, dtype=float)
        if abs(pi.sum() - 1) > 1e-12 or np.any(pi < 0):
            raise ValueError("initial probabilities must form a simplex")
        if np.any(np.abs(A.sum(axis=1) - 1) > 1e-12) or np.any(A < 0):
            raise ValueError("transition rows must form simplexes")
        if self.n_series < 1 or self.n_times < 1:
            raise ValueError("N and T must be at least 1")

    @property
    def n_states(self):
        return len(self.mu)

    def with_size(self, n_series=None, n_times=None):
        return Scenario(self.name, self.mu, self.sigma, self.pi, self.A, self.missingness,
                        n_series or self.n_series, n_times or self.n_times)

    def state_marginals(self):
        """Exact p(S_t = k) for t = 1..T, shape (T, K)."""
        A = np.asarray(self.A)
        out = np.empty((self.n_times, self.n_states))
        out[0] = self.pi
        for t in range(1, self.n_times):
            out[t] = out[t - 1] @ A
        return out

    def mean_missing_rate(self):
        t = np.arange(1, self.n_times + 1)
        occ = self.state_marginals()
        states = np.broadcast_to(np.arange(self.n_states), occ.shape)
        p = self.missingness.probability(t[:, None], states)
        return float(np.mean(np.sum(occ * p, axis=1)))

    def truth_model(self, family="MAR") -> HmmModel:
        """HMM with the generating parameters, in the given model family."""
        K = self.n_states
        mech = self.missingness
        if family == "MAR":
            miss = Ignorable()
        elif family == "MNAR-state":
            if isinstance(mech, StateBernoulliMechanism):
                phi = np.asarray(mech.phi, dtype=float)
            elif isinstance(mech, ConstantRate):
                phi = np.full(K, mech.p)
            else:
                phi = np.full(K, self.mean_missing_rate())
            miss = StateBernoulli(phi)
        elif family == "MNAR-time":
            if isinstance(mech, TimeLogistic):
                beta = np.tile([mech.beta0, mech.beta_time], (K, 1))
            else:
                phi = (np.asarray(mech.phi, dtype=float) if isinstance(mech, StateBernoulliMechanism)
                       else np.full(K, mech.p))
                beta = np.column_stack([np.log(phi / (1 - phi)), np.zeros(K)])
            miss = StateLogistic(beta, (TIME_COVARIATE,))
        else:
            raise ValueError(f"unknown model family {family!r}; expected one of {FAMILIES}")
        return HmmModel.from_probabilities(self.pi, self.A, self.mu, self.sigma, miss)

    def true_parameters(self):
        K = self.n_states
        out = {}
        for k in range(K):
            out[f"mu_{k + 1}"] = float(self.mu[k])
        for k in range(K):
            out[f"sigma_{k + 1}"] = float(self.sigma[k])
        for k in range(K):
            out[f"pi_{k + 1}"] = float(self.pi[k])
        for i in range(K):
            for j in range(K):
                out[f"a_{i + 1}{j + 1}"] = float(self.A[i][j])
        mech = self.missingness
        if isinstance(mech, StateBernoulliMechanism):
            for k in range(K):
                out[f"phi_{k + 1}"] = float(mech.phi[k])
        elif isinstance(mech, ConstantRate):
            for k in range(K):
                out[f"phi_{k + 1}"] = float(mech.p)
        else:
            for k in range(K):
                out[f"beta0_{k + 1}"] = float(mech.beta0)
            for k in range(K):
                out[f"beta_time_{k + 1}"] = float(mech.beta_time)
        return out


def table_parameters(model: HmmModel):
    """Probability-scale parameters of a covariate-free fitted model."""
    K = model.n_states
    out = {}
    for k in range(K):
        out[f"mu_{k + 1}"] = model.emissions[k].mu
    for k in range(K):
        out[f"sigma_{k + 1}"] = model.emissions[k].sigma
    pi = model.initial_at()
    A = model.transition_at()
    for k in range(K):
        out[f"pi_{k + 1}"] = float(pi[k])
    for i in range(K):
        for j in range(K):
            out[f"a_{i + 1}{j + 1}"] = float(A[i, j])
    miss = model.missingness
    if isinstance(miss, StateBernoulli):
        for k in range(K):
            out[f"phi_{k + 1}"] = float(miss.phi[k])
    elif isinstance(miss, StateLogistic):
        for k in range(K):
            out[f"beta0_{k + 1}"] = float(miss.beta[k, 0])
        if TIME_COVARIATE in miss.covariates:
            c = 1 + miss.covariates.index(TIME_COVARIATE)
            for k in range(K):
                out[f"beta_time_{k + 1}"] = float(miss.beta[k, c])
    return out


def builtin_scenarios():
    """The five simulation designs: three states, N = 100 series of T = 50."""
    mu = (-1.0, 0.0, 1.0)
    pi = (0.8, 0.1, 0.1)
    A = ((0.75, 0.125, 0.125), (0.125, 0.75, 0.125), (0.125, 0.125, 0.75))
    state_dep = StateBernoulliMechanism((0.05, 0.25, 0.50))
    constant = ConstantRate(0.25)
    return {
        "sim1": Scenario("sim1", mu, (1.0, 1.0, 1.0), pi, A, state_dep),
        "sim2": Scenario("sim2", mu, (1.0, 1.0, 1.0), pi, A, constant),
        "sim3": Scenario("sim3", mu, (3.0, 3.0, 3.0), pi, A, state_dep),
        "sim4": Scenario("sim4", mu, (3.0, 3.0, 3.0), pi, A, constant),
        "sim5": Scenario("sim5", mu, (1.0, 1.0, 1.0), pi, A, TimeLogistic(-5.0, 0.125)),
    }


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimulatedData:
    dataset: Dataset
    states: np.ndarray  # (N, T), labels 1..K


def _draw_categorical(cum, u):
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[-1] - 1)


def generate_dataset(scenario: Scenario, seed) -> SimulatedData:
    """States first, then responses, then missingness erasure."""
    rng = np.random.default_rng(seed)
    N, T, K = scenario.n_series, scenario.n_times, scenario.n_states
    pi = np.asarray(scenario.pi, dtype=float)
    cumA = np.cumsum(np.asarray(scenario.A, dtype=float), axis=1)
    u = rng.random((N, T))
    states = np.empty((N, T), dtype=np.int64)
    states[:, 0] = _draw_categorical(np.broadcast_to(np.cumsum(pi), (N, K)), u[:, 0])
    for t in range(1, T):
        states[:, t] = _draw_categorical(cumA[states[:, t - 1]], u[:, t])
    mu = np.asarray(scenario.mu, dtype=float)
    sigma = np.asarray(scenario.sigma, dtype=float)
    y = mu[states] + sigma[states] * rng.standard_normal((N, T))
    times = np.arange(1, T + 1)
    p_miss = scenario.missingness.probability(times[None, :], states)
    y[rng.random((N, T)) < p_miss] = np.nan
    series = [TimeSeries(i + 1, y[i], {TIME_COVARIATE: times}) for i in range(N)]
    return SimulatedData(Dataset(series, (TIME_COVARIATE,)), states + 1)


# ---------------------------------------------------------------------------
# accuracy measures
# ---------------------------------------------------------------------------


def recovery_accuracy(true_paths, decoded_paths, align=False) -> float:
    """Fraction of time points where the decoded state equals the truth.

    With ``align`` the decoded labels are first permuted to best match the
    truth.
    """
    truth = np.concatenate([np.ravel(p) for p in true_paths]) if isinstance(true_paths, list) else np.ravel(true_paths)
    dec = np.concatenate([np.ravel(p) for p in decoded_paths]) if isinstance(decoded_paths, list) else np.ravel(decoded_paths)
    if truth.shape != dec.shape:
        raise ValueError(f"path shapes differ: {truth.shape} vs {dec.shape}")
    if not align:
        return float(np.mean(truth == dec))
    K = int(max(truth.max(), dec.max()))
    best = 0.0
    for perm in itertools.permutations(range(1, K + 1)):
        mapped = np.asarray(perm)[dec - 1]
        best = max(best, float(np.mean(truth == mapped)))
    return best


def best_permutation(true_paths, decoded_paths, K):
    truth = np.ravel(true_paths)
    dec = np.ravel(decoded_paths)
    best, best_perm = -1.0, tuple(range(K))
    for perm in itertools.permutations(range(K)):
        acc = float(np.mean(truth - 1 == np.asarray(perm)[dec - 1]))
        if acc > best:
            best, best_perm = acc, perm
    return best_perm


def mixture_oracle_accuracy(scenario: Scenario, n_mc: int, seed, rule="map") -> float:
    """Accuracy of the pointwise Bayes classifier over (Y, M) at the true
    parameters, ignoring serial dependence; priors are the exact time-t state
    marginals. ``n_mc`` is the number of simulated series.

    ``rule="map"`` scores the argmax state; ``rule="expected"`` scores the
    posterior probability assigned to the true state instead.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    if rule not in ("map", "expected"):
        raise ValueError(f"unknown rule {rule!r}")
    sim = generate_dataset(scenario.with_size(n_series=n_mc), seed)
    y = np.stack([s.y for s in sim.dataset.series])
    N, T = y.shape
    K = scenario.n_states
    mu = np.asarray(scenario.mu, dtype=float)
    sigma = np.asarray(scenario.sigma, dtype=float)
    t = np.arange(1, T + 1)
    states = np.broadcast_to(np.arange(K), (N, T, K))
    p_miss = scenario.missingness.probability(t[None, :, None], states)
    obs = ~np.isnan(y)
    z = (np.where(obs, y, 0.0)[..., None] - mu) / sigma
    dens = np.exp(-0.5 * z * z) / sigma
    lik = np.where(obs[..., None], (1 - p_miss) * dens, p_miss)
    post = scenario.state_marginals()[None, :, :] * lik
    if rule == "expected":
        post /= post.sum(axis=-1, keepdims=True)
        return float(np.mean(np.take_along_axis(post, sim.states[..., None] - 1, axis=-1)))
    decoded = np.argmax(post, axis=-1) + 1
    return recovery_accuracy(sim.states, decoded)


def hmm_oracle_accuracy(scenario: Scenario, n_mc_series: int, seed, aware=True) -> float:
    """Viterbi recovery rate with the true parameters.

    ``aware`` decodes with the missingness channel; otherwise missing
    responses are treated as ignorable.
    """
    if n_mc_series < 1:
        raise ValueError("n_mc_series must be at least 1")
    sim = generate_dataset(scenario.with_size(n_series=n_mc_series), seed)
    if aware:
        family = "MNAR-time" if isinstance(scenario.missingness, TimeLogistic) else "MNAR-state"
    else:
        family = "MAR"
    paths = viterbi_all(scenario.truth_model(family), sim.dataset)
    return recovery_accuracy(sim.states, np.stack(paths))


# ---------------------------------------------------------------------------
# replication study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitSpec:
    family: str
    start_at_truth: bool = True
    n_starts: int = 5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")

    @property
    def label(self):
        return self.family


# EM started at the truth creeps along flat ridges for thousands of iterations
# in the overlapping scenarios; study fits run to convergence, not to the
# interactive default budget
STUDY_MAX_ITERATIONS = 20000


@dataclass(frozen=True)
class StudyConfig:
    n_replications: int = 100
    specs: tuple = (FitSpec("MAR"), FitSpec("MNAR-state"))
    master_seed: int = 0
    fit_config: FitConfig = field(
        default_factory=lambda: FitConfig(max_iterations=STUDY_MAX_ITERATIONS))
    n_jobs: int | None = None

    def __post_init__(self):
        if self.n_replications < 1:
            raise ValueError("n_replications must be at least 1")
        specs = tuple(FitSpec(s) if isinstance(s, str) else s for s in self.specs)
        if not specs:
            raise ValueError("need at least one fit specification")
        object.__setattr__(self, "specs", specs)


def replication_seed(master_seed, index):
    return np.random.SeedSequence([int(master_seed), int(index)])


def _fit_spec(scenario, spec, sim, config, seed):
    if spec.start_at_truth:
        fit = em_fit(scenario.truth_model(spec.family), sim.dataset, config.fit_config)
        model = fit.model
    else:
        template = scenario.truth_model(spec.family)
        start_seed = int(seed.generate_state(1)[0])
        fit = multi_start_fit(template, sim.dataset, spec.n_starts, start_seed,
                              config.fit_config, n_jobs=1)
        paths = np.stack(viterbi_all(fit.model, sim.dataset))
        perm = best_permutation(sim.states, paths, scenario.n_states)
        model = fit.model.permuted(np.argsort(perm))
    paths = np.stack(viterbi_all(model, sim.dataset))
    return table_parameters(model), recovery_accuracy(sim.states, paths), fit.converged


def _replicate(args):
    scenario, config, index = args
    seed = replication_seed(config.master_seed, index)
    data_seed, fit_seed = seed.spawn(2)
    sim = generate_dataset(scenario, data_seed)
    out = {}
    for spec in config.specs:
        try:
            out[spec.label] = _fit_spec(scenario, spec, sim, config, fit_seed)
        except MnarHmmError as exc:
            out[spec.label] = exc
    return out


@dataclass
class StudySummary:
    scenario: str
    specs: tuple
    true_values: dict
    estimates: dict
    accuracies: dict
    failures: dict
    n_replications: int
    nonconverged: dict = field(default_factory=dict)  # fits that exhausted the EM budget

    @property
    def reference(self):
        return self.specs[0]

    @property
    def parameters(self):
        names = list(self.true_values)
        for spec in self.specs:
            for name in self.estimates[spec]:
                if name not in names:
                    names.append(name)
        return names

    def stat(self, spec, param):
        """(mean, SD, MAE); SD uses n-1 when more than one replication."""
        values = self.estimates[spec].get(param)
        if values is None or len(values) == 0:
            return (math.nan, math.nan, math.nan)
        values = np.asarray(values)
        mean = float(values.mean())
        sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        truth = self.true_values.get(param, math.nan)
        mae = float(np.mean(np.abs(values - truth))) if not math.isnan(truth) else math.nan
        return (mean, sd, mae)

    def shared_parameters(self, spec):
        return [
            p for p in self.true_values
            if p in self.estimates[self.reference] and p in self.estimates[spec]
        ]

    def relative_mae(self, spec):
        """MAE of ``spec`` over MAE of the reference spec, per shared parameter."""
        return {
            p: self.stat(spec, p)[2] / self.stat(self.reference, p)[2]
            for p in self.shared_parameters(spec)
        }

    def average_relative_mae(self, spec):
        return float(np.mean(list(self.relative_mae(spec).values())))

    def mean_accuracy(self, spec):
        acc = self.accuracies[spec]
        return float(np.mean(acc)) if len(acc) else math.nan

    def rows(self):
        comparisons = self.specs[1:]
        rel = {s: self.relative_mae(s) for s in comparisons}
        out = []
        for p in self.parameters:
            row = {"parameter": p, "true_value": self.true_values.get(p, math.nan)}
            for s in self.specs:
                mean, sd, mae = self.stat(s, p)
                row[f"{s}_mean"], row[f"{s}_sd"], row[f"{s}_mae"] = mean, sd, mae
            for s in comparisons:
                row[f"rel_mae_{s}"] = rel[s].get(p, math.nan)
            out.append(row)
        return out

    def to_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def run_study(scenario: Scenario, config: StudyConfig) -> StudySummary:
    jobs = [(scenario, config, i) for i in range(config.n_replications)]
    n_jobs = config.n_jobs or default_jobs()
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_replicate, jobs))
    else:
        results = [_replicate(j) for j in jobs]

    labels = tuple(s.label for s in config.specs)
    estimates = {s: {} for s in labels}
    accuracies = {s: [] for s in labels}
    failures = {s: 0 for s in labels}
    nonconverged = {s: 0 for s in labels}
    for i, res in enumerate(results):
        for s in labels:
            outcome = res[s]
            if isinstance(outcome, Exception):
                log.warning("replication %d, %s fit failed: %s", i, s, outcome)
                failures[s] += 1
                continue
            params, acc, converged = outcome
            nonconverged[s] += not converged
            for name, value in params.items():
                estimates[s].setdefault(name, []).append(value)
            accuracies[s].append(acc)
    estimates = {s: {k: np.asarray(v) for k, v in d.items()} for s, d in estimates.items()}
    return StudySummary(scenario.name, labels, scenario.true_parameters(), estimates,
                        {s: np.asarray(v) for s, v in accuracies.items()}, failures,
                        config.n_replications, nonconverged)
