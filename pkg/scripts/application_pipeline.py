"""Missingness analysis of the longitudinal IMPS79 trial data.

    python3 scripts/application_pipeline.py --data SCHIZREP.DAT --out results/application

The input is the public whitespace-delimited long file (id, imps79, week,
drug, sex). The pipeline runs:

- a missingness summary and a logistic regression of missingness on
  treatment, week and main-week indicators
- MAR and MNAR hidden Markov models with 2-5 states, treatment on the
  initial and transition models, and week + main-week on the MNAR
  missingness model
- an information-criterion table
- a likelihood-ratio test of state-equal missingness in the 3-state MNAR model
- Wald intervals for the missingness coefficients
- MAP state proportions per week and treatment arm
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mnarhmm.cli import model_template
from mnarhmm.core import HmmModel, viterbi_all
from mnarhmm.dataio import glm_missingness, load_long, summarize_missingness
from mnarhmm.estimation import FitConfig, em_fit, multi_start_fit
from mnarhmm.selection import (
    ComparisonRow,
    approx_confidence_intervals,
    constrain_missingness_equal,
    count_free_parameters,
    likelihood_ratio_test,
    write_comparison_csv,
)

log = logging.getLogger("application")

FAMILIES = {"MAR": ("mar", ()), "MNAR": ("logistic", ("week", "main"))}

# Published reference values the pipeline is checked against.
EXPECTED = {
    "n_subjects": 437,
    "week_fractions": (0.9931, 0.9748, 0.0320, 0.8558, 0.0252, 0.0206, 0.7666),
    "glm_estimate": (1.921, 0.433, 0.496, -5.381, -0.112, -0.596),
    "glm_se": (0.393, 0.463, 0.068, 0.382, 0.081, 0.446),
    "loglik": {("MAR", 3): -2266.603, ("MNAR", 3): -2889.040},
    "criteria": {  # (family, K) -> (AIC, BIC)
        ("MAR", 2): (4865.350, 4919.146), ("MAR", 3): (4577.206, 4695.558),
        ("MAR", 4): (4527.742, 4732.168), ("MAR", 5): (4480.781, 4792.799),
        ("MNAR", 2): (6181.256, 6267.330), ("MNAR", 3): (5840.081, 6006.849),
        ("MNAR", 4): (5782.215, 6051.197), ("MNAR", 5): (5746.671, 6139.385),
    },
    "lrt": 1328.57,
    "means": {"MAR": (2.315, 4.339, 5.7), "MNAR": (2.325, 4.424, 5.756)},
    "state1_missingness": {  # coefficient -> (estimate, lower, upper)
        "(Intercept)": (2.635, 1.998, 3.272),
        "week": (0.149, 0.028, 0.269),
        "main": (-4.511, -5.037, -3.984),
    },
}


def sort_by_mean(model: HmmModel) -> HmmModel:
    return model.permuted(np.argsort(model.mus, kind="stable"))


def family_template(family, K, tied=False):
    kind, miss_covs = FAMILIES[family]
    template = model_template(K, kind, ("drug",), ("drug",), miss_covs)
    return constrain_missingness_equal(template) if tied else template


@dataclass
class ApplicationResult:
    dataset: object
    profile: object
    glm: object
    fits: dict
    constrained: object
    lrt: object
    intervals: list
    rows: list = field(default_factory=list)

    def state1_missingness(self):
        out = {}
        for iv in self.intervals:
            if iv.name.startswith("miss[1]."):
                out[iv.name.split(".", 1)[1]] = iv
        return out

    def checks(self):
        """Comparison with the published values: name -> (ok, detail)."""
        E = EXPECTED
        out = {}
        n = len(self.dataset)
        out["subjects"] = (n == E["n_subjects"], f"{n}")
        frac = np.round(self.profile.observed_fraction, 4)
        out["week fractions"] = (bool(np.allclose(frac, E["week_fractions"], atol=5e-5)),
                                 f"{frac.tolist()}")
        est, se = np.asarray(self.glm.estimate), np.asarray(self.glm.se)
        out["missingness GLM"] = (
            bool(np.all(np.abs(est - E["glm_estimate"]) <= 0.01)
                 and np.all(np.abs(se - E["glm_se"]) <= 0.01)),
            f"estimates {np.round(est, 3).tolist()}, SEs {np.round(se, 3).tolist()}")
        for key, ref in E["loglik"].items():
            ll = self.fits[key].log_likelihood
            out[f"{key[0]}{key[1]} loglik"] = (abs(ll - ref) <= 2.0, f"{ll:.3f} vs {ref}")
        by_key = {(r.label.rstrip("0123456789"), r.n_states): r for r in self.rows}
        worst = max(max(abs(by_key[k].aic - a), abs(by_key[k].bic - b))
                    for k, (a, b) in E["criteria"].items() if k in by_key)
        out["AIC/BIC"] = (worst <= 4.0, f"max deviation {worst:.3f}")
        for fam in FAMILIES:
            rows = [r for k, r in by_key.items() if k[0] == fam]
            best = min(rows, key=lambda r: r.bic).n_states
            out[f"{fam} BIC-best K"] = (best == 3, f"{best}")
        out["LRT"] = (abs(self.lrt.statistic - E["lrt"]) <= 10 and self.lrt.df == 6,
                      f"chi2({self.lrt.df}) = {self.lrt.statistic:.2f}")
        for fam, ref in E["means"].items():
            mus = self.fits[(fam, 3)].model.mus
            out[f"{fam} means"] = (bool(np.all(np.abs(mus - ref) <= 0.1)),
                                   f"{np.round(mus, 3).tolist()}")
        ivals = self.state1_missingness()
        ok = bool(ivals)
        parts = []
        for name, (e, lo, hi) in E["state1_missingness"].items():
            iv = ivals.get(name)
            if iv is None or iv.flagged:
                ok = False
                parts.append(f"{name} unavailable")
                continue
            ok &= abs(iv.lower - lo) <= 0.1 and abs(iv.upper - hi) <= 0.1
            parts.append(f"{name} {iv.estimate:.3f} ({iv.lower:.3f}, {iv.upper:.3f})")
        out["state-1 missingness CI"] = (ok, "; ".join(parts))
        return out


def run_application(path, states=(2, 3, 4, 5), starts=20, seed=1, jobs=None,
                    config: FitConfig | None = None) -> ApplicationResult:
    config = config or FitConfig()
    dataset = load_long(path)
    profile = summarize_missingness(dataset)
    glm = glm_missingness(dataset)
    nobs = dataset.n_observed
    log.info("%d subjects, %d observed ratings", len(dataset), nobs)

    fits, rows = {}, []
    for fam in FAMILIES:
        for K in states:
            fit = multi_start_fit(family_template(fam, K), dataset, starts, seed + K, config, jobs)
            fits[(fam, K)] = fit
            rows.append(ComparisonRow.from_fit(f"{fam}{K}", fit.model, fit.log_likelihood, nobs))
            log.info("%s K=%d: loglik %.3f", fam, K, fit.log_likelihood)
    fits = {key: replace(fit, model=sort_by_mean(fit.model)) for key, fit in fits.items()}

    full = fits[("MNAR", 3)]
    constrained = multi_start_fit(family_template("MNAR", 3, tied=True), dataset, starts, seed,
                                  config, jobs)
    df = count_free_parameters(full.model) - count_free_parameters(constrained.model)
    lrt = likelihood_ratio_test(full.log_likelihood, constrained.log_likelihood, df)
    intervals = approx_confidence_intervals(full, dataset)
    return ApplicationResult(dataset, profile, glm, fits, constrained, lrt, intervals, rows)


def write_outputs(res: ApplicationResult, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(res.rows, out / "model_comparison.csv")
    res.glm.to_csv(out / "missingness_glm.csv")
    with open(out / "missingness_intervals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "estimate", "lower", "upper", "se", "flag"])
        for iv in res.intervals:
            w.writerow([iv.name, repr(iv.estimate), repr(iv.lower), repr(iv.upper), repr(iv.se),
                        iv.reason])
    with open(out / "lrt.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "df", "p_value"])
        w.writerow([repr(res.lrt.statistic), res.lrt.df, repr(res.lrt.p_value)])
    with open(out / "state_proportions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "drug", "week", "state", "proportion"])
        drug = np.array([s.covariates["drug"][0] for s in res.dataset])
        for fam in FAMILIES:
            paths = np.stack(viterbi_all(res.fits[(fam, 3)].model, res.dataset))
            for d in np.unique(drug):
                sub = paths[drug == d]
                for week in range(sub.shape[1]):
                    for k in (1, 2, 3):
                        w.writerow([fam, int(d), week, k, repr(float(np.mean(sub[:, week] == k)))])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default=os.environ.get("MNARHMM_SCHIZ_DATA"))
    ap.add_argument("--out", default="results/application")
    ap.add_argument("--starts", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args()
    if not args.data:
        ap.error("--data (or MNARHMM_SCHIZ_DATA) is required")
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    res = run_application(args.data, starts=args.starts, seed=args.seed, jobs=args.jobs)
    write_outputs(res, Path(args.out))
    for name, (ok, detail) in res.checks().items():
        print(f"{'ok  ' if ok else 'MISS'} {name}: {detail}")


if __name__ == "__main__":
    main()
