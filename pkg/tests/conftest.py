import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mnarhmm.core import (
    Dataset,
    GaussianEmission,
    HmmModel,
    Ignorable,
    MultinomialLogit,
    StateBernoulli,
    StateLogistic,
    TimeSeries,
)

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

REGIMES = ("ignorable", "bernoulli", "logistic")


def random_model(rng, K, regime="ignorable", covariates=("x",), tied=False):
    """Random model whose initial, transition and (logistic) missingness
    components all use ``covariates``."""
    C = len(covariates)
    initial = MultinomialLogit(rng.normal(0, 1, (K - 1, 1 + C)), covariates)
    transition = tuple(MultinomialLogit(rng.normal(0, 1, (K - 1, 1 + C)), covariates)
                       for _ in range(K))
    emissions = tuple(GaussianEmission(rng.normal(0, 2), rng.uniform(0.3, 2.0)) for _ in range(K))
    if regime == "ignorable":
        miss = Ignorable()
    elif regime == "bernoulli":
        phi = rng.uniform(0.05, 0.95, K)
        miss = StateBernoulli(np.full(K, phi[0]) if tied else phi, tied)
    else:
        beta = rng.normal(0, 1, (K, 1 + C))
        if tied:
            beta = np.tile(beta[0], (K, 1))
        miss = StateLogistic(beta, covariates, tied)
    return HmmModel(initial, transition, emissions, miss)


def random_series(rng, T, covariates=("x",), p_missing=0.3, id=1):
    y = rng.normal(0, 2, T)
    y[rng.random(T) < p_missing] = np.nan
    covs = {c: rng.normal(0, 1, T) for c in covariates}
    return TimeSeries(id, y, covs)


def random_dataset(rng, n, T, covariates=("x",), p_missing=0.3):
    return Dataset([random_series(rng, T, covariates, p_missing, id=i + 1) for i in range(n)],
                   tuple(covariates))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
