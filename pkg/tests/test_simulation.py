import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chi2_contingency

from mnarhmm.estimation import FitConfig
from mnarhmm.simulation import (
    ConstantRate,
    FitSpec,
    Scenario,
    STUDY_MAX_ITERATIONS,
    StateBernoulliMechanism,
    StudyConfig,
    TimeLogistic,
    best_permutation,
    builtin_scenarios,
    generate_dataset,
    hmm_oracle_accuracy,
    mixture_oracle_accuracy,
    recovery_accuracy,
    run_study,
    table_parameters,
)

SCENARIOS = builtin_scenarios()


def one_state(n_series=20, n_times=10):
    return Scenario("one", (0.0,), (1.0,), (1.0,), ((1.0,),), ConstantRate(0.3), n_series, n_times)


def test_builtin_scenarios_are_three_state():
    assert sorted(SCENARIOS) == ["sim1", "sim2", "sim3", "sim4", "sim5"]
    for scen in SCENARIOS.values():
        assert scen.n_states == 3
        assert (scen.n_series, scen.n_times) == (100, 50)


def test_invalid_scenario_rejected():
    with pytest.raises(ValueError):
        Scenario("bad", (0, 1), (1, 1), (0.6, 0.6), ((1, 0), (0, 1)), ConstantRate(0.1))
    with pytest.raises(ValueError):
        one_state(n_series=0)


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_generation_deterministic(name):
    scen = SCENARIOS[name].with_size(n_series=10, n_times=12)
    a, b = generate_dataset(scen, 7), generate_dataset(scen, 7)
    np.testing.assert_array_equal(a.states, b.states)
    for sa, sb in zip(a.dataset, b.dataset):
        np.testing.assert_array_equal(sa.y, sb.y)
    c = generate_dataset(scen, 8)
    assert not np.array_equal(a.states, c.states)


def test_generated_shapes_and_labels():
    sim = generate_dataset(SCENARIOS["sim1"], 1)
    assert sim.states.shape == (100, 50)
    assert set(np.unique(sim.states)) == {1, 2, 3}
    assert len(sim.dataset) == 100
    np.testing.assert_array_equal(sim.dataset.series[0].covariates["t"], np.arange(1, 51))


def test_constant_rate_independent_of_state():
    scen = SCENARIOS["sim2"].with_size(n_series=2000, n_times=50)
    sim = generate_dataset(scen, 11)
    missing = np.isnan(np.stack([s.y for s in sim.dataset])).ravel()
    states = sim.states.ravel()
    table = np.array([[np.sum((states == k) & (missing == m)) for m in (False, True)]
                      for k in (1, 2, 3)])
    assert table.sum() == 100_000
    assert chi2_contingency(table)[1] > 0.001
    assert missing.mean() == pytest.approx(0.25, abs=0.005)


def test_state_bernoulli_rates():
    scen = SCENARIOS["sim1"].with_size(n_series=2000)
    sim = generate_dataset(scen, 12)
    missing = np.isnan(np.stack([s.y for s in sim.dataset]))
    for k, phi in enumerate((0.05, 0.25, 0.5), start=1):
        assert missing[sim.states == k].mean() == pytest.approx(phi, abs=0.01)


def test_time_logistic_rates():
    mech = SCENARIOS["sim5"].missingness
    p = mech.probability(np.arange(1, 51), np.zeros(50, dtype=int))
    assert p[0] == pytest.approx(0.0076, abs=1e-4)
    assert p[-1] == pytest.approx(1 / (1 + np.exp(5 - 6.25)), rel=1e-12)
    assert np.all(np.diff(p) > 0)


def test_state_marginals_match_empirical():
    scen = SCENARIOS["sim1"].with_size(n_series=5000, n_times=6)
    sim = generate_dataset(scen, 3)
    emp = np.stack([(sim.states == k).mean(axis=0) for k in (1, 2, 3)], axis=1)
    np.testing.assert_allclose(emp, scen.state_marginals(), atol=0.02)


@given(seed=st.integers(0, 2**32 - 1))
def test_accuracy_of_truth_is_one_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    paths = rng.integers(1, 4, (5, 9))
    assert recovery_accuracy(paths, paths) == 1.0
    perm = rng.permutation(3) + 1
    assert recovery_accuracy(perm[paths - 1], perm[paths - 1]) == 1.0
    assert recovery_accuracy(paths, perm[paths - 1], align=True) == 1.0


@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 3))
def test_constant_decoder_scores_occupancy(seed, k):
    paths = np.random.default_rng(seed).integers(1, 4, (4, 7))
    assert recovery_accuracy(paths, np.full_like(paths, k)) == pytest.approx(np.mean(paths == k))


def test_accuracy_shape_mismatch():
    with pytest.raises(ValueError):
        recovery_accuracy(np.ones(3, dtype=int), np.ones(4, dtype=int))


def test_best_permutation_recovers_relabeling():
    rng = np.random.default_rng(0)
    truth = rng.integers(1, 4, 500)
    relabel = np.array([2, 0, 1])  # truth label k -> decoded label relabel[k-1] + 1
    decoded = relabel[truth - 1] + 1
    perm = best_permutation(truth, decoded, 3)
    np.testing.assert_array_equal(np.asarray(perm)[decoded - 1] + 1, truth)


def test_single_state_oracles_are_exact():
    scen = one_state()
    assert mixture_oracle_accuracy(scen, 50, 0) == 1.0
    assert mixture_oracle_accuracy(scen, 50, 0, rule="expected") == 1.0
    assert hmm_oracle_accuracy(scen, 50, 0) == 1.0


@pytest.mark.parametrize("name", ["sim1", "sim3"])
def test_mixture_oracle_beats_majority(name):
    scen = SCENARIOS[name]
    majority = scen.state_marginals().max(axis=1).mean()
    # MC error with 500 series of 50 points is well under 0.01
    assert mixture_oracle_accuracy(scen, 500, 1) >= majority - 0.01


@pytest.mark.parametrize("name", ["sim1", "sim3"])
def test_aware_decoding_at_least_blind(name):
    scen = SCENARIOS[name]
    aware = hmm_oracle_accuracy(scen, 300, 2, aware=True)
    blind = hmm_oracle_accuracy(scen, 300, 2, aware=False)
    assert aware >= blind - 0.005


def test_hmm_oracle_near_perfect_when_separated():
    scen = Scenario("far", (-20.0, 0.0, 20.0), (1.0, 1.0, 1.0), (1.0, 0.0, 0.0),
                    ((0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0)),
                    StateBernoulliMechanism((0.3, 0.3, 0.3)), 50, 30)
    assert hmm_oracle_accuracy(scen, 50, 0) >= 0.999


def test_oracle_argument_checks():
    with pytest.raises(ValueError):
        mixture_oracle_accuracy(SCENARIOS["sim1"], 0, 0)
    with pytest.raises(ValueError):
        mixture_oracle_accuracy(SCENARIOS["sim1"], 10, 0, rule="mode")
    with pytest.raises(ValueError):
        hmm_oracle_accuracy(SCENARIOS["sim1"], 0, 0)


@pytest.mark.parametrize("family", ["MAR", "MNAR-state", "MNAR-time"])
@pytest.mark.parametrize("name", ["sim1", "sim2", "sim5"])
def test_truth_model_round_trips_table_parameters(name, family):
    scen = SCENARIOS[name]
    params = table_parameters(scen.truth_model(family))
    truth = scen.true_parameters()
    for key in ("mu_1", "sigma_3", "pi_1", "a_12", "a_33"):
        assert params[key] == pytest.approx(truth[key], abs=1e-9)
    if family == "MNAR-state" and "phi_1" in truth:
        assert params["phi_2"] == pytest.approx(truth["phi_2"], abs=1e-9)
    if family == "MNAR-time" and name == "sim5":
        assert params["beta_time_1"] == pytest.approx(0.125, abs=1e-9)


def test_unknown_family():
    with pytest.raises(ValueError):
        SCENARIOS["sim1"].truth_model("MNAR-other")
    with pytest.raises(ValueError):
        FitSpec("other")


def small_config(**kw):
    base = dict(n_replications=2, specs=("MAR", "MNAR-state"), master_seed=5, n_jobs=1)
    base.update(kw)
    return StudyConfig(**base)


def test_study_budget_and_nonconvergence_count():
    assert StudyConfig().fit_config.max_iterations == STUDY_MAX_ITERATIONS
    scen = SCENARIOS["sim1"].with_size(n_series=15, n_times=12)
    summary = run_study(scen, small_config(fit_config=FitConfig(max_iterations=2)))
    # budget exhaustion is counted, not treated as a failed fit
    assert summary.nonconverged == {"MAR": 2, "MNAR-state": 2}
    assert summary.failures == {"MAR": 0, "MNAR-state": 0}
    assert len(summary.accuracies["MAR"]) == 2


def test_study_single_replication_zero_sd():
    scen = SCENARIOS["sim1"].with_size(n_series=15, n_times=12)
    summary = run_study(scen, small_config(n_replications=1))
    for spec in summary.specs:
        for p in summary.shared_parameters(spec):
            assert summary.stat(spec, p)[1] == 0.0
    assert summary.failures == {"MAR": 0, "MNAR-state": 0}


def test_study_deterministic_and_jobs_independent(tmp_path):
    scen = SCENARIOS["sim2"].with_size(n_series=15, n_times=12)
    a = run_study(scen, small_config())
    b = run_study(scen, small_config(n_jobs=2))
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_study_summary_columns(tmp_path):
    scen = SCENARIOS["sim1"].with_size(n_series=15, n_times=12)
    summary = run_study(scen, small_config())
    rel = summary.relative_mae("MNAR-state")
    assert len(rel) == 18  # mu, sigma, pi (3 each) and nine transitions
    path = tmp_path / "s.csv"
    summary.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["parameter", "true_value", "MAR_mean", "MAR_sd", "MAR_mae",
                      "MNAR-state_mean", "MNAR-state_sd", "MNAR-state_mae",
                      "rel_mae_MNAR-state"]
    assert 0.0 <= summary.mean_accuracy("MAR") <= 1.0


def test_random_start_fit_is_aligned():
    base = SCENARIOS["sim1"]
    scen = Scenario("far", (-6.0, 0.0, 6.0), base.sigma, base.pi, base.A, base.missingness, 30, 30)
    config = small_config(n_replications=1, specs=(FitSpec("MAR", start_at_truth=False, n_starts=3),))
    summary = run_study(scen, config)
    mus = [summary.stat("MAR", f"mu_{k}")[0] for k in (1, 2, 3)]
    np.testing.assert_allclose(mus, [-6, 0, 6], atol=0.3)
    # only missing points can be misdecoded
    assert summary.mean_accuracy("MAR") > 0.8


def test_study_config_validation():
    with pytest.raises(ValueError):
        StudyConfig(n_replications=0)
    with pytest.raises(ValueError):
        StudyConfig(specs=())
    assert isinstance(StudyConfig(specs=("MAR",)).specs[0], FitSpec)


def test_time_mechanism_broadcasts():
    p = TimeLogistic(-1.0, 0.5).probability(np.array([[1, 2]]), np.zeros((3, 2), dtype=int))
    assert p.shape == (3, 2)
