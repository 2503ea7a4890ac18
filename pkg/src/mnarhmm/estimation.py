"""Maximum-likelihood fitting by EM.

The E-step is the scaled forward-backward pass. Gaussian and Bernoulli
M-steps are closed form; logistic and multinomial-logit components are
updated by Newton iterations warm-started at the current values and guarded
by step halving, so every M-step is a generalized EM step and the
log-likelihood trace never decreases.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from .core import (
    COEF_CAP,
    PROB_EPS,
    Dataset,
    GaussianEmission,
    HmmModel,
    Ignorable,
    MultinomialLogit,
    Posteriors,
    SIGMA_FLOOR,
    StateBernoulli,
    StateLogistic,
    batch_posteriors,
    clamp_prob,
    pack_parameters,
)
from .errors import (
    DegenerateStateError,
    EstimationError,
    InvalidConstraintError,
    MnarHmmError,
    RankError,
)

log = logging.getLogger(__name__)

RIDGE = 1e-8

# logits this large only arise from (quasi-)separated data
SEPARATION_LOGIT = 15.0


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 500
    tolerance: float = 1e-6
    irls_max_iterations: int = 50
    irls_tolerance: float = 1e-8
    tie_missingness: bool = False

    def __post_init__(self):
        if self.tolerance <= 0 or self.irls_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1 or self.irls_max_iterations < 1:
            raise ValueError("iteration budgets must be at least 1")


@dataclass
class FitResult:
    model: HmmModel
    trace: list
    converged: bool
    n_iterations: int
    n_free: int
    warnings: list = field(default_factory=list)

    @property
    def log_likelihood(self):
        return self.trace[-1]


@dataclass
class SufficientStats:
    """Posterior state and transition probabilities, stored per length batch."""

    dataset: Dataset
    gamma: list
    xi: list
    series_log_likelihood: np.ndarray
    log_likelihood: float

    def posteriors(self, index):
        for batch, g, x in zip(self.dataset.batches, self.gamma, self.xi):
            hit = np.flatnonzero(batch.positions == index)
            if hit.size:
                j = hit[0]
                return Posteriors(g[j], x[j], float(self.series_log_likelihood[index]), None)
        raise IndexError(index)


def e_step(model: HmmModel, dataset: Dataset) -> SufficientStats:
    gammas, xis = [], []
    ll = np.empty(len(dataset))
    for batch in dataset.batches:
        g, x, batch_ll, _ = batch_posteriors(model, batch)
        gammas.append(g)
        xis.append(x)
        ll[batch.positions] = batch_ll
    # per-series values summed in dataset order, independent of batching
    return SufficientStats(dataset, gammas, xis, ll, float(np.sum(ll)))


# ---------------------------------------------------------------------------
# M-step pieces
# ---------------------------------------------------------------------------


def m_step_gaussian(y, weights):
    """Weighted ML mean and standard deviation per state.

    ``y`` holds observed responses only; ``weights`` is (R, K).
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    mass = np.ones(len(y)) @ w
    if np.any(~(mass > 0)):
        k = int(np.flatnonzero(~(mass > 0))[0]) + 1
        raise DegenerateStateError(f"state {k} has no posterior mass on observed records")
    mu = (y @ w) / mass
    var = np.einsum("rk,rk->k", w, (y[:, None] - mu) ** 2) / mass
    sigma = np.maximum(np.sqrt(var), SIGMA_FLOOR)
    return tuple(GaussianEmission(m, s) for m, s in zip(mu, sigma))


def m_step_bernoulli(m, weights):
    m = np.asarray(m, dtype=float)
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    mass = np.ones(len(m)) @ w
    if np.any(~(mass > 0)):
        k = int(np.flatnonzero(~(mass > 0))[0]) + 1
        raise DegenerateStateError(f"state {k} has no posterior mass")
    return clamp_prob((m @ w) / mass)


@dataclass
class LogisticFit:
    coef: np.ndarray
    converged: bool
    separated: bool
    n_iterations: int
    gradient_norm: float


def _logistic_objective(X, y, w, b):
    eta = X @ b
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def weighted_logistic_irls(X, y, w=None, start=None, max_iterations=50,
                           tolerance=1e-8, cap=COEF_CAP):
    """Weighted logistic regression by IRLS (Newton) with step halving.

    Coefficients are capped at ``cap`` in magnitude; hitting the cap sets
    ``separated``. Never returns a point with a lower objective than ``start``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    p = X.shape[1]
    if not np.all(np.isfinite(X)):
        raise RankError("weighted logistic design has non-finite entries")
    b = np.zeros(p) if start is None else np.clip(np.array(start, dtype=float), -cap, cap)
    separated = bool(np.any(np.abs(b) >= cap))
    f0 = _logistic_objective(X, y, w, b)
    converged = False
    n_iter = 0
    grad = X.T @ (w * (y - expit(X @ b)))
    for _ in range(max_iterations):
        if np.max(np.abs(grad)) <= tolerance:
            converged = True
            break
        mu = expit(X @ b)
        H = X.T @ (X * (w * mu * (1.0 - mu))[:, None]) + RIDGE * np.eye(p)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise RankError("weighted logistic design is singular") from exc
        if not np.all(np.isfinite(step)):
            raise RankError("weighted logistic design is singular")
        s = 1.0
        moved = False
        for _ in range(50):
            cand = np.clip(b + s * step, -cap, cap)
            f1 = _logistic_objective(X, y, w, cand)
            if f1 >= f0:
                moved = not np.array_equal(cand, b)
                b, f0 = cand, f1
                break
            s *= 0.5
        n_iter += 1
        grad = X.T @ (w * (y - expit(X @ b)))
        if np.any(np.abs(b) >= cap):
            separated = True
        if not moved:
            # stalled at rounding level
            converged = np.max(np.abs(grad)) <= tolerance * max(1.0, w.sum())
            break
    else:
        converged = np.max(np.abs(grad)) <= tolerance
    big = np.max(np.abs(b))
    if not separated and big >= SEPARATION_LOGIT:
        # saturated fit: if the objective keeps rising along the ray the data
        # are separated and the supremum sits at the cap
        ray = b * (cap / big)
        f_ray = _logistic_objective(X, y, w, ray)
        if f_ray >= f0:
            b, f0, separated = ray, f_ray, True
            grad = X.T @ (w * (y - expit(X @ b)))
    return LogisticFit(b, bool(converged) and not separated, separated, n_iter,
                       float(np.max(np.abs(grad))))


def _multinomial_objective(W, X, B):
    logits = np.zeros((X.shape[0], B.shape[0] + 1))
    logits[:, 1:] = X @ B.T
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    return float(np.sum(W * logp))


def m_step_multinomial(weights, design, start=None, covariates=(), max_iterations=50,
                       tolerance=1e-8, cap=COEF_CAP):
    """Weighted multinomial-logit fit with category 1 as reference.

    Without covariates the weighted proportions are returned in closed form.
    With covariates Newton ascent runs from ``start``; steps that would lower
    the objective are halved.
    """
    W = np.asarray(weights, dtype=float)
    X = np.asarray(design, dtype=float)
    if start is not None:
        covariates = start.covariates
    R, K = W.shape
    P = X.shape[1]
    total = W.sum()
    if not total > 0:
        if start is not None:
            return start
        raise DegenerateStateError("multinomial outcome has no weight")
    if P == 1:
        return MultinomialLogit.from_probs(W.sum(axis=0) / total, covariates)
    B = np.zeros((K - 1, P)) if start is None else np.array(start.coefficients)
    f0 = _multinomial_objective(W, X, B)
    rowsum = W.sum(axis=1)
    eye = np.eye(K - 1)
    for _ in range(max_iterations):
        logits = np.zeros((R, K))
        logits[:, 1:] = X @ B.T
        prob = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        pm = prob[:, 1:]
        G = (W[:, 1:] - rowsum[:, None] * pm).T @ X
        if np.max(np.abs(G)) <= tolerance:
            break
        M = rowsum[:, None, None] * (pm[:, :, None] * eye - pm[:, :, None] * pm[:, None, :])
        H = np.einsum("rjl,ra,rb->jalb", M, X, X).reshape((K - 1) * P, (K - 1) * P)
        H += RIDGE * np.eye((K - 1) * P)
        try:
            step = np.linalg.solve(H, G.ravel()).reshape(K - 1, P)
        except np.linalg.LinAlgError as exc:
            raise RankError("multinomial Hessian is singular") from exc
        if not np.all(np.isfinite(step)):
            raise RankError("multinomial Hessian is singular")
        s = 1.0
        moved = False
        for _ in range(50):
            cand = np.clip(B + s * step, -cap, cap)
            f1 = _multinomial_objective(W, X, cand)
            if f1 >= f0:
                moved = not np.array_equal(cand, B)
                B, f0 = cand, f1
                break
            s *= 0.5
        if not moved:
            break
    return MultinomialLogit(B, covariates)


# ---------------------------------------------------------------------------
# full EM
# ---------------------------------------------------------------------------


def _stack(dataset, stats, model):
    """Flatten batch arrays into record-level arrays in a fixed order."""
    K = model.n_states
    out = {"gamma": [], "y": [], "obs": [], "g0": [], "X0": [], "xi": [], "Xt": [], "Xm": []}
    miss_cov = model.missingness.covariates
    for batch, g, x in zip(dataset.batches, stats.gamma, stats.xi):
        n, T = batch.shape
        out["gamma"].append(g.reshape(-1, K))
        out["y"].append(batch.y.ravel())
        out["obs"].append(batch.obs.ravel())
        out["g0"].append(g[:, 0, :])
        out["X0"].append(batch.design(model.initial.covariates)[:, 0, :])
        if T > 1:
            out["xi"].append(x.reshape(-1, K, K))
            out["Xt"].append(batch.design(model.transition_covariates)[:, 1:, :].reshape(n * (T - 1), -1))
        if not isinstance(model.missingness, Ignorable):
            out["Xm"].append(batch.design(miss_cov).reshape(n * T, -1))
    return {k: np.concatenate(v) if v else None for k, v in out.items()}


def constrain_missingness(model: HmmModel) -> HmmModel:
    """Replace per-state missingness parameters with one shared set (the
    state-1 values)."""
    miss = model.missingness
    if isinstance(miss, Ignorable):
        raise InvalidConstraintError("ignorable missingness has nothing to constrain")
    if miss.tied:
        return model
    K = model.n_states
    if isinstance(miss, StateBernoulli):
        new = StateBernoulli(np.repeat(miss.phi[0], K), tied=True)
    else:
        new = StateLogistic(np.tile(miss.beta[0], (K, 1)), miss.covariates, tied=True)
    return replace(model, missingness=new)


def m_step(model: HmmModel, dataset: Dataset, stats: SufficientStats, config: FitConfig,
           notes=None):
    K = model.n_states
    d = _stack(dataset, stats, model)
    obs = d["obs"]
    emissions = m_step_gaussian(d["y"][obs], d["gamma"][obs])
    inner = dict(max_iterations=config.irls_max_iterations, tolerance=config.irls_tolerance)
    initial = m_step_multinomial(d["g0"], d["X0"], start=model.initial, **inner)
    if d["xi"] is not None and not model.transition_covariates:
        counts = np.ones(len(d["xi"])) @ d["xi"].reshape(len(d["xi"]), K * K)
        counts = counts.reshape(K, K)
        transition = tuple(
            m_step_multinomial(counts[i][None, :], np.ones((1, 1)), start=model.transition[i])
            for i in range(K)
        )
    elif d["xi"] is not None:
        transition = tuple(
            m_step_multinomial(d["xi"][:, i, :], d["Xt"], start=model.transition[i], **inner)
            for i in range(K)
        )
    else:
        transition = model.transition

    miss = model.missingness
    m = (~obs).astype(float)
    if isinstance(miss, StateBernoulli):
        if miss.tied:
            phi = m_step_bernoulli(m, d["gamma"].sum(axis=1))
            miss = StateBernoulli(np.repeat(phi[0], K), tied=True)
        else:
            miss = StateBernoulli(m_step_bernoulli(m, d["gamma"]))
    elif isinstance(miss, StateLogistic):
        rows = []
        targets = [d["gamma"].sum(axis=1)] if miss.tied else [d["gamma"][:, k] for k in range(K)]
        for k, w in enumerate(targets):
            fit = weighted_logistic_irls(d["Xm"], m, w, start=miss.beta[k], **inner)
            if notes is not None and not fit.converged:
                notes.append("separation" if fit.separated else "irls-nonconvergence")
            rows.append(fit.coef)
        beta = np.tile(rows[0], (K, 1)) if miss.tied else np.array(rows)
        miss = StateLogistic(beta, miss.covariates, miss.tied)
    return HmmModel(initial, transition, emissions, miss)


def count_free(model: HmmModel) -> int:
    return len(pack_parameters(model)[0])


def em_fit(initial_model: HmmModel, dataset: Dataset, config: FitConfig | None = None) -> FitResult:
    config = config or FitConfig()
    model = initial_model
    if config.tie_missingness:
        model = constrain_missingness(model)
    it = 0
    notes = []
    try:
        stats = e_step(model, dataset)
        trace = [stats.log_likelihood]
        converged = False
        for it in range(1, config.max_iterations + 1):
            model = m_step(model, dataset, stats, config, notes)
            stats = e_step(model, dataset)
            trace.append(stats.log_likelihood)
            # one state: posteriors are parameter-free, so an exact M-step is final
            exact = model.n_states == 1 and not notes
            if exact or abs(trace[-1] - trace[-2]) < config.tolerance:
                converged = True
                break
    except MnarHmmError as exc:
        raise EstimationError(f"EM iteration {it}: {exc}") from exc
    return FitResult(model, trace, converged, it, count_free(model), sorted(set(notes)))


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------


def _observed(dataset):
    y = np.concatenate([s.y for s in dataset.series])
    return y[~np.isnan(y)], float(np.mean(np.isnan(y)))


def _logit(p):
    p = float(np.clip(p, 1e-6, 1 - 1e-6))
    return np.log(p / (1 - p))


def moment_start(template: HmmModel, dataset: Dataset) -> HmmModel:
    """Deterministic start: means at observed quantiles, persistent chain."""
    K = template.n_states
    y, rate = _observed(dataset)
    mu = np.quantile(y, (np.arange(K) + 0.5) / K)
    sd = max(float(np.std(y)), SIGMA_FLOOR)
    A = np.full((K, K), 0.2 / max(K - 1, 1)) + np.eye(K) * (0.8 - 0.2 / max(K - 1, 1))
    if K == 1:
        A = np.ones((1, 1))
    return _assemble(template, mu, np.full(K, sd / np.sqrt(K)), np.full(K, 1.0 / K), A,
                     np.zeros, rate)


def random_start(template: HmmModel, dataset: Dataset, rng: np.random.Generator) -> HmmModel:
    """Quantile-anchored means with jitter, logit coefficients ~ N(0, 0.5)
    and Dirichlet(1, ..., 1) rows for covariate-free probabilities."""
    K = template.n_states
    y, rate = _observed(dataset)
    sd = max(float(np.std(y)), SIGMA_FLOOR)
    mu = np.sort(np.quantile(y, (np.arange(K) + 0.5) / K) + rng.normal(0.0, 0.25 * sd / K, K))
    pi = rng.dirichlet(np.ones(K))
    A = rng.dirichlet(np.ones(K), size=K)
    return _assemble(template, mu, np.full(K, sd), pi, A,
                     lambda shape: rng.normal(0.0, 0.5, shape), rate)


def _assemble(template, mu, sigma, pi, A, coef_draw, rate):
    K = template.n_states
    ci = template.initial.covariates
    ct = template.transition_covariates
    if ci:
        initial = MultinomialLogit(coef_draw((K - 1, 1 + len(ci))), ci)
    else:
        initial = MultinomialLogit.from_probs(pi)
    if ct:
        transition = tuple(MultinomialLogit(coef_draw((K - 1, 1 + len(ct))), ct) for _ in range(K))
    else:
        transition = tuple(MultinomialLogit.from_probs(row) for row in A)
    miss = template.missingness
    if isinstance(miss, StateBernoulli):
        eta = _logit(rate) + coef_draw((K,))
        phi = expit(eta)
        if miss.tied:
            phi = np.repeat(phi[0], K)
        miss = StateBernoulli(phi, miss.tied)
    elif isinstance(miss, StateLogistic):
        beta = coef_draw((K, 1 + len(miss.covariates)))
        beta[:, 0] += _logit(rate)
        if miss.tied:
            beta = np.tile(beta[0], (K, 1))
        miss = StateLogistic(beta, miss.covariates, miss.tied)
    emissions = tuple(GaussianEmission(m, s) for m, s in zip(mu, sigma))
    return HmmModel(initial, transition, emissions, miss)


def _fit_one(args):
    start, dataset, config = args
    try:
        return em_fit(start, dataset, config)
    except EstimationError as exc:
        return exc


def default_jobs():
    return max(1, int(os.environ.get("MNARHMM_THREADS", "1")))


def multi_start_fit(model_template: HmmModel, dataset: Dataset, n_starts: int,
                    master_seed: int, config: FitConfig | None = None,
                    n_jobs: int | None = None) -> FitResult:
    """Best of one moment-based start and ``n_starts`` random starts."""
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    config = config or FitConfig()
    if config.tie_missingness:
        model_template = constrain_missingness(model_template)
    seeds = np.random.SeedSequence(master_seed).spawn(n_starts)
    starts = [moment_start(model_template, dataset)]
    starts += [random_start(model_template, dataset, np.random.default_rng(s)) for s in seeds]
    jobs = [(s, dataset, config) for s in starts]
    n_jobs = n_jobs or default_jobs()
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]
    best = None
    failures = []
    for i, res in enumerate(results):
        if isinstance(res, Exception):
            failures.append(f"start {i}: {res}")
            continue
        log.debug("start %d: loglik %.6f after %d iterations", i, res.log_likelihood, res.n_iterations)
        if best is None or res.log_likelihood > best.log_likelihood:
            best = res
    if best is None:
        raise EstimationError("all starts failed:\n" + "\n".join(failures))
    return best
