import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from mnarhmm.cli import (
    EXIT_INPUT,
    EXIT_NONCONVERGED,
    EXIT_OK,
    load_fit,
    main,
    model_from_dict,
    model_to_dict,
    sibling,
)
from mnarhmm.core import StateBernoulli, log_likelihood
from mnarhmm.dataio import read_csv

from conftest import REGIMES, random_model


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def small_data(tmp_path):
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--scenario", "sim1", "--seed", "3", "--n-series", "12",
                 "--n-times", "15", "--out", str(out)]) == EXIT_OK
    return out


def fit(tmp_path, data, name, *extra):
    out = tmp_path / f"{name}.json"
    code = main(["fit", "--data", str(data), "--states", "2", "--starts", "2", "--seed", "1",
                 "--out", str(out), *extra])
    return code, out


def test_sibling_paths():
    assert str(sibling("a/out.csv", "states")) == "a/out.states.csv"
    assert str(sibling("out", "lrt")) == "out.lrt.csv"


def test_simulate_byte_identical(tmp_path):
    paths = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        assert main(["simulate", "--scenario", "sim5", "--seed", "42", "--n-series", "5",
                     "--out", str(out)]) == EXIT_OK
        paths.append(out)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert sibling(paths[0], "states").read_bytes() == sibling(paths[1], "states").read_bytes()
    data = read_csv(paths[0])
    assert len(data) == 5 and len(data.series[0]) == 50


def test_simulate_seed_changes_output(tmp_path):
    for seed in ("1", "2"):
        main(["simulate", "--seed", seed, "--n-series", "4", "--out", str(tmp_path / f"{seed}.csv")])
    assert (tmp_path / "1.csv").read_bytes() != (tmp_path / "2.csv").read_bytes()


@pytest.mark.parametrize("argv", [
    ["simulate", "--scenario", "sim9", "--out", "x.csv"],
    ["simulate"],
    ["simulate", "--seed", "-1", "--out", "x.csv"],
    ["fit", "--data", "does-not-exist.csv", "--out", "x.json"],
    ["frobnicate"],
])
def test_input_errors_exit_2(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INPUT


def test_unknown_scenario_lists_names(tmp_path, capsys):
    assert main(["simulate", "--scenario", "sim9", "--out", str(tmp_path / "x.csv")]) == EXIT_INPUT
    assert "sim1" in capsys.readouterr().err


def test_fit_writes_document(tmp_path, small_data):
    code, out = fit(tmp_path, small_data, "mar2")
    assert code == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["converged"] and doc["n_free"] == 2 * 2 + 1 + 2
    assert doc["nobs"] == int(sum((~np.isnan(s.y)).sum() for s in read_csv(small_data)))
    model = model_from_dict(doc["model"])
    assert log_likelihood(model, read_csv(small_data)) == pytest.approx(doc["log_likelihood"], abs=1e-9)


def test_fit_not_converged_exit_3(tmp_path, small_data):
    code, out = fit(tmp_path, small_data, "short", "--max-iterations", "2")
    assert code == EXIT_NONCONVERGED
    assert not json.loads(out.read_text())["converged"]


def test_fit_unknown_covariate(tmp_path, small_data):
    code, _ = fit(tmp_path, small_data, "bad", "--initial-covariates", "drug")
    assert code == EXIT_INPUT


def test_decode_rows(tmp_path, small_data):
    _, model = fit(tmp_path, small_data, "m")
    out = tmp_path / "dec.csv"
    assert main(["decode", "--data", str(small_data), "--model", str(model), "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert len(rows) == 12 * 15
    for row in rows:
        assert float(row["p1"]) + float(row["p2"]) == pytest.approx(1.0, abs=1e-9)
        assert row["state"] in ("1", "2")
    props = read_rows(sibling(out, "proportions"))
    by_t = {}
    for row in props:
        by_t.setdefault(row["t"], 0.0)
        by_t[row["t"]] += float(row["proportion"])
    assert len(by_t) == 15
    assert all(v == pytest.approx(1.0) for v in by_t.values())


def test_select_and_lrt(tmp_path, small_data):
    _, tied = fit(tmp_path, small_data, "tied", "--missingness", "state", "--tie-missingness")
    doc, model = load_fit(tied)
    full = tmp_path / "full.json"
    # start the unconstrained fit at the constrained optimum so nesting holds
    untied = replace(model, missingness=StateBernoulli(model.missingness.phi.copy(), False))
    doc["model"] = model_to_dict(untied)
    start = tmp_path / "start.json"
    start.write_text(json.dumps(doc))
    assert main(["fit", "--data", str(small_data), "--init-model", str(start),
                 "--out", str(full)]) in (EXIT_OK, EXIT_NONCONVERGED)
    out = tmp_path / "cmp.csv"
    assert main(["select", str(tied), str(full), "--lrt", str(full), str(tied),
                 "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert [r["model"] for r in rows] == ["tied", "full"]
    lrt = read_rows(sibling(out, "lrt"))[0]
    assert int(lrt["df"]) == 1
    assert float(lrt["statistic"]) >= 0.0
    assert 0.0 <= float(lrt["p_value"]) <= 1.0
    # reversed roles are not nested
    assert main(["select", str(tied), "--lrt", str(tied), str(full), "--out", str(out)]) == EXIT_INPUT


def test_config_file(tmp_path):
    cfg = tmp_path / "sim.yaml"
    out = tmp_path / "cfg.csv"
    cfg.write_text(f"scenario: sim2\nseed: 9\nn_series: 3\nn_times: 4\nout: {out}\n")
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    ref = tmp_path / "ref.csv"
    main(["simulate", "--scenario", "sim2", "--seed", "9", "--n-series", "3", "--n-times", "4",
          "--out", str(ref)])
    assert out.read_bytes() == ref.read_bytes()
    # command-line flags override the file
    assert main(["simulate", "--config", str(cfg), "--seed", "10"]) == EXIT_OK
    assert out.read_bytes() != ref.read_bytes()


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("scenario: sim1\nreplicates: 3\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == EXIT_INPUT


def test_study_single_replication(tmp_path):
    out = tmp_path / "study.csv"
    assert main(["study", "--scenario", "sim1", "--replications", "1", "--n-series", "10",
                 "--n-times", "10", "--oracle-series", "20", "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert {r["parameter"] for r in rows} >= {"mu_1", "a_33", "phi_3"}
    assert all(r["MAR_sd"] in ("0.0", "") for r in rows)
    rec = read_rows(sibling(out, "recovery"))
    assert [r["spec"] for r in rec] == ["MAR", "MNAR-state"]
    oracles = read_rows(sibling(out, "oracles"))
    assert [r["oracle"] for r in oracles] == ["mixture", "hmm-MNAR-state", "hmm-MAR"]


@pytest.mark.parametrize("regime", REGIMES)
def test_model_document_round_trip(rng, regime):
    model = random_model(rng, 3, regime)
    doc = json.loads(json.dumps(model_to_dict(model)))
    back = model_from_dict(doc)
    np.testing.assert_array_equal(back.mus, model.mus)
    covs = {"x": 0.3}
    np.testing.assert_array_equal(back.transition_at(covs), model.transition_at(covs))
    np.testing.assert_array_equal(back.initial_at(covs), model.initial_at(covs))
