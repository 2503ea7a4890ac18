"""Command-line interface: simulate, fit, decode, study, select.

Every subcommand accepts ``--config FILE`` (YAML mapping of option names to
values); explicit flags override file values. Exit codes: 0 success, 2 input
or usage error, 3 fit did not converge (best iterate still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .core import (
    GaussianEmission,
    HmmModel,
    Ignorable,
    MultinomialLogit,
    StateBernoulli,
    StateLogistic,
    pack_parameters,
    posteriors_all,
    unpack_parameters,
    viterbi_all,
)
from .dataio import LongRecordSchema, load_long, read_csv, write_csv
from .errors import MnarHmmError
from .estimation import FitConfig, em_fit, multi_start_fit
from .selection import (
    ComparisonRow,
    aic,
    bic,
    count_free_parameters,
    count_raw_parameters,
    likelihood_ratio_test,
    write_comparison_csv,
)
from .simulation import (
    FAMILIES,
    FitSpec,
    StudyConfig,
    builtin_scenarios,
    generate_dataset,
    hmm_oracle_accuracy,
    mixture_oracle_accuracy,
    STUDY_MAX_ITERATIONS,
    run_study,
    TimeLogistic,
)

log = logging.getLogger("mnarhmm")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 2, 3
FIT_FORMAT = "mnarhmm-fit"
MISSINGNESS_KINDS = ("mar", "state", "logistic")


class UsageError(Exception):
    pass


def _seed(text):
    try:
        v = int(text)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _names(text):
    if text is None:
        return ()
    if isinstance(text, (list, tuple)):
        return tuple(str(t) for t in text)
    return tuple(t for t in str(text).replace(",", " ").split() if t)


def sibling(path, suffix):
    """``out.csv`` -> ``out.<suffix>.csv``."""
    p = Path(path)
    return p.with_name(f"{p.stem}.{suffix}{p.suffix or '.csv'}")


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def model_template(n_states, missingness="mar", initial_covariates=(), transition_covariates=(),
                   missingness_covariates=(), tie_missingness=False) -> HmmModel:
    """Structure-only model (parameter values are placeholders)."""
    K = int(n_states)
    if K < 1:
        raise UsageError("number of states must be at least 1")
    if missingness == "mar":
        if missingness_covariates:
            raise UsageError("missingness covariates need --missingness logistic")
        miss = Ignorable()
    elif missingness == "state":
        if missingness_covariates:
            raise UsageError("missingness covariates need --missingness logistic")
        miss = StateBernoulli(np.full(K, 0.5), tie_missingness)
    elif missingness == "logistic":
        miss = StateLogistic(np.zeros((K, 1 + len(missingness_covariates))),
                             tuple(missingness_covariates), tie_missingness)
    else:
        raise UsageError(f"unknown missingness {missingness!r}; expected one of {MISSINGNESS_KINDS}")
    ci, ct = tuple(initial_covariates), tuple(transition_covariates)
    return HmmModel(
        MultinomialLogit.uniform(K, ci),
        tuple(MultinomialLogit.uniform(K, ct) for _ in range(K)),
        tuple(GaussianEmission(float(k), 1.0) for k in range(K)),
        miss,
    )


def _structure(model: HmmModel):
    miss = model.missingness
    kind = ("mar" if isinstance(miss, Ignorable)
            else "state" if isinstance(miss, StateBernoulli) else "logistic")
    return {
        "n_states": model.n_states,
        "missingness": kind,
        "tied_missingness": bool(getattr(miss, "tied", False)),
        "covariates": {k: list(v) for k, v in model.covariate_registry.items()},
    }


def model_to_dict(model: HmmModel):
    names, values = pack_parameters(model)
    return {**_structure(model), "parameters": dict(zip(names, map(float, values)))}


def model_from_dict(doc) -> HmmModel:
    cov = doc.get("covariates", {})
    template = model_template(doc["n_states"], doc.get("missingness", "mar"),
                              cov.get("initial", ()), cov.get("transition", ()),
                              cov.get("missingness", ()), doc.get("tied_missingness", False))
    names, _ = pack_parameters(template)
    params = doc["parameters"]
    if list(params) != names:
        raise UsageError(f"parameter names do not match the declared structure; expected {names}")
    return unpack_parameters(template, [params[n] for n in names])


def load_fit(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FIT_FORMAT:
        raise UsageError(f"{path}: not a fitted-model file")
    return doc, model_from_dict(doc["model"])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def read_data(path, fmt="auto"):
    if fmt == "auto":
        fmt = "csv" if str(path).lower().endswith(".csv") else "long"
    if fmt == "csv":
        return read_csv(path)
    if fmt == "long":
        return load_long(path, LongRecordSchema())
    raise UsageError(f"unknown data format {fmt!r}")


def _check_schema(model, dataset):
    missing = [n for n in model.required_covariates if n not in dataset.covariate_names]
    if missing:
        raise UsageError(
            f"model uses covariates {missing} absent from the data (has {list(dataset.covariate_names)})"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _scenario(name, n_series=None, n_times=None):
    scenarios = builtin_scenarios()
    if name not in scenarios:
        raise UsageError(f"unknown scenario {name!r}; valid names: {', '.join(scenarios)}")
    return scenarios[name].with_size(n_series, n_times)


def cmd_simulate(args):
    scenario = _scenario(args.scenario, args.n_series, args.n_times)
    sim = generate_dataset(scenario, np.random.SeedSequence(args.seed))
    write_csv(sim.dataset, args.out, response="y", leading=("t",))
    states_path = sibling(args.out, "states")
    with open(states_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t", "state"])
        for s, path in zip(sim.dataset, sim.states):
            for t, k in enumerate(path, 1):
                w.writerow([s.id, t, int(k)])
    rate = float(np.mean([np.isnan(s.y).mean() for s in sim.dataset]))
    print(f"wrote {len(sim.dataset)} series to {args.out} (missing rate {rate:.3f}); "
          f"true states in {states_path}")
    return EXIT_OK


def _fit_config(args):
    return FitConfig(max_iterations=args.max_iterations, tolerance=args.tolerance,
                     tie_missingness=args.tie_missingness)


def cmd_fit(args):
    dataset = read_data(args.data, args.format)
    config = _fit_config(args)
    if args.init_model:
        _, start = load_fit(args.init_model)
        _check_schema(start, dataset)
        fit = em_fit(start, dataset, config)
    else:
        template = model_template(args.states, args.missingness, _names(args.initial_covariates),
                                  _names(args.transition_covariates),
                                  _names(args.missingness_covariates), args.tie_missingness)
        _check_schema(template, dataset)
        fit = multi_start_fit(template, dataset, args.starts, args.seed, config, args.jobs)
    nobs = dataset.n_observed
    free = count_free_parameters(fit.model)
    doc = {
        "format": FIT_FORMAT,
        "version": 1,
        "data": str(args.data),
        "label": args.label or Path(args.out).stem,
        "model": model_to_dict(fit.model),
        "log_likelihood": fit.log_likelihood,
        "n_free": free,
        "n_raw": count_raw_parameters(fit.model),
        "nobs": nobs,
        "aic": aic(fit.log_likelihood, free),
        "bic": bic(fit.log_likelihood, free, nobs),
        "converged": fit.converged,
        "n_iterations": fit.n_iterations,
        "warnings": list(fit.warnings),
        "settings": {"max_iterations": config.max_iterations, "tolerance": config.tolerance,
                     "starts": args.starts, "seed": args.seed},
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2)
    print(f"log-likelihood {fit.log_likelihood:.4f} after {fit.n_iterations} iterations "
          f"({'converged' if fit.converged else 'NOT converged'}); wrote {args.out}")
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def cmd_decode(args):
    dataset = read_data(args.data, args.format)
    _, model = load_fit(args.model)
    _check_schema(model, dataset)
    paths = viterbi_all(model, dataset)
    posts = posteriors_all(model, dataset)
    K = model.n_states
    label_name = "week" if "week" in dataset.covariate_names else "t"
    counts = {}
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", label_name, "y", "missing", "state"] + [f"p{k}" for k in range(1, K + 1)])
        for s, path, post in zip(dataset, paths, posts):
            labels = s.covariates.get(label_name, np.arange(s.start, s.start + len(s)))
            for i, (y, k) in enumerate(zip(s.y, path)):
                miss = math.isnan(y)
                lab = float(labels[i])
                lab = int(lab) if lab.is_integer() else lab
                w.writerow([s.id, lab, "" if miss else repr(float(y)), int(miss), int(k)]
                           + [repr(float(p)) for p in post.gamma[i]])
                counts.setdefault(lab, np.zeros(K))[k - 1] += 1
    prop_path = sibling(args.out, "proportions")
    with open(prop_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([label_name, "state", "proportion"])
        for lab in sorted(counts):
            c = counts[lab]
            for k in range(K):
                w.writerow([lab, k + 1, repr(float(c[k] / c.sum()))])
    print(f"decoded {len(dataset)} series; wrote {args.out} and {prop_path}")
    return EXIT_OK


def cmd_study(args):
    scenario = _scenario(args.scenario, args.n_series, args.n_times)
    specs = tuple(FitSpec(f, start_at_truth=not args.random_starts, n_starts=args.starts)
                  for f in _names(args.specs))
    if not specs:
        raise UsageError("need at least one fit specification")
    config = StudyConfig(args.replications, specs, args.seed, _fit_config(args), args.jobs)
    summary = run_study(scenario, config)
    summary.to_csv(args.out)
    rec_path = sibling(args.out, "recovery")
    with open(rec_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["spec", "mean_accuracy", "sd_accuracy", "n_fits", "n_failures",
                    "n_nonconverged", "avg_rel_mae"])
        for s in summary.specs:
            acc = summary.accuracies[s]
            sd = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
            rel = "" if s == summary.reference else repr(summary.average_relative_mae(s))
            w.writerow([s, repr(summary.mean_accuracy(s)), repr(sd), len(acc),
                        summary.failures[s], summary.nonconverged[s], rel])
    oracle_path = sibling(args.out, "oracles")
    if args.oracle_series > 0:
        seeds = np.random.SeedSequence([args.seed, 2**32]).spawn(3)
        aware = "MNAR-time" if isinstance(scenario.missingness, TimeLogistic) else "MNAR-state"
        rows = [
            ("mixture", mixture_oracle_accuracy(scenario, args.oracle_series, seeds[0])),
            (f"hmm-{aware}", hmm_oracle_accuracy(scenario, args.oracle_series, seeds[1], True)),
            ("hmm-MAR", hmm_oracle_accuracy(scenario, args.oracle_series, seeds[2], False)),
        ]
        with open(oracle_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["oracle", "accuracy"])
            for name, acc in rows:
                w.writerow([name, repr(acc)])
    for s in summary.specs:
        print(f"{s}: mean recovery {summary.mean_accuracy(s):.4f}, failures {summary.failures[s]}")
    print(f"wrote {args.out}, {rec_path}" + (f", {oracle_path}" if args.oracle_series > 0 else ""))
    return EXIT_OK


def cmd_select(args):
    docs = []
    for path in args.fits:
        doc, model = load_fit(path)
        docs.append((path, doc, model))
    rows = [ComparisonRow.from_fit(doc.get("label", Path(p).stem), model, doc["log_likelihood"],
                                   doc["nobs"]) for p, doc, model in docs]
    write_comparison_csv(rows, args.out)
    print(f"wrote {args.out}")
    for r in sorted(rows, key=lambda r: r.bic):
        print(f"  {r.label}: LL {r.log_likelihood:.3f}  AIC {r.aic:.3f}  BIC {r.bic:.3f}")
    if args.lrt:
        loaded = {p: (doc, model) for p, doc, model in docs}
        full_path, restricted_path = args.lrt
        full_doc, full = loaded.get(full_path) or load_fit(full_path)
        res_doc, res = loaded.get(restricted_path) or load_fit(restricted_path)
        df = count_free_parameters(full) - count_free_parameters(res)
        if df < 1:
            raise UsageError("LRT models are not nested: the full model must have more free "
                             f"parameters (got difference {df})")
        lrt = likelihood_ratio_test(full_doc["log_likelihood"], res_doc["log_likelihood"], df)
        lrt_path = sibling(args.out, "lrt")
        with open(lrt_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["full", "restricted", "statistic", "df", "p_value"])
            w.writerow([full_path, restricted_path, repr(lrt.statistic), lrt.df,
                        repr(lrt.p_value)])
        print(f"LRT chi2({lrt.df}) = {lrt.statistic:.3f}, p = {lrt.p_value:.3g}; wrote {lrt_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_fit_options(p, max_iterations=500):
    p.add_argument("--max-iterations", type=int, default=max_iterations, help="EM iteration budget")
    p.add_argument("--tolerance", type=float, default=1e-6,
                   help="stop when the log-likelihood gains less than this (nats)")
    p.add_argument("--tie-missingness", action="store_true", default=False,
                   help="share missingness parameters across states")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: $MNARHMM_THREADS or 1)")


def build_parser():
    parser = argparse.ArgumentParser(prog="mnarhmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = sub.choices

    p = sub.add_parser("simulate", help="generate a data set from a built-in scenario")
    p.add_argument("--config", help="YAML file of option values")
    p.add_argument("--scenario", default="sim1", help="sim1 .. sim5")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--n-series", type=int, default=None, help="override the scenario's N")
    p.add_argument("--n-times", type=int, default=None, help="override the scenario's T")
    p.add_argument("--out", help="data CSV; true states go to <out>.states.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a hidden Markov model by EM with multiple starts")
    p.add_argument("--config", help="YAML file of option values")
    p.add_argument("--data", help="wide CSV or whitespace long file")
    p.add_argument("--format", choices=("auto", "csv", "long"), default="auto")
    p.add_argument("--states", type=int, default=3)
    p.add_argument("--missingness", choices=MISSINGNESS_KINDS, default="mar",
                   help="ignorable, per-state Bernoulli, or per-state logistic")
    p.add_argument("--initial-covariates", default="", help="comma-separated names")
    p.add_argument("--transition-covariates", default="", help="comma-separated names")
    p.add_argument("--missingness-covariates", default="",
                   help="comma-separated names (logistic missingness only)")
    p.add_argument("--starts", type=int, default=10, help="random starts besides the moment start")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--init-model", help="start EM from a fitted-model file instead")
    p.add_argument("--label", help="model name used by 'select'")
    p.add_argument("--out", help="fitted-model JSON")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("decode", help="MAP states and posterior probabilities")
    p.add_argument("--config", help="YAML file of option values")
    p.add_argument("--data")
    p.add_argument("--format", choices=("auto", "csv", "long"), default="auto")
    p.add_argument("--model", help="fitted-model JSON from 'fit'")
    p.add_argument("--out", help="per-point CSV; proportions go to <out>.proportions.csv")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("study", help="replicated simulation study")
    p.add_argument("--config", help="YAML file of option values")
    p.add_argument("--scenario", default="sim1")
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--specs", default="MAR,MNAR-state", help=f"comma list from {FAMILIES}")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--n-series", type=int, default=None)
    p.add_argument("--n-times", type=int, default=None)
    p.add_argument("--random-starts", action="store_true", default=False,
                   help="multi-start fits instead of starting at the truth")
    p.add_argument("--starts", type=int, default=5)
    p.add_argument("--oracle-series", type=int, default=2000,
                   help="simulated series for oracle accuracies (0 skips them)")
    p.add_argument("--out", help="parameter table CSV; also <out>.recovery.csv, <out>.oracles.csv")
    _add_fit_options(p, STUDY_MAX_ITERATIONS)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("select", help="compare fitted models by AIC/BIC")
    p.add_argument("--config", help="YAML file of option values")
    p.add_argument("fits", nargs="*", help="fitted-model JSON files")
    p.add_argument("--lrt", nargs=2, metavar=("FULL", "RESTRICTED"),
                   help="likelihood-ratio test of two nested fits; written to <out>.lrt.csv")
    p.add_argument("--out", help="comparison CSV")
    p.set_defaults(func=cmd_select)
    return parser


REQUIRED = {
    "simulate": ("out",),
    "fit": ("data", "out"),
    "decode": ("data", "model", "out"),
    "study": ("out",),
    "select": ("out",),
}


def _check_required(args):
    missing = [d for d in REQUIRED[args.command] if getattr(args, d) in (None, "")]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        raise UsageError(f"'{args.command}' needs {flags} (on the command line or in --config)")
    if args.command == "select" and not args.fits:
        raise UsageError("'select' needs at least one fitted-model file")
    return args


def _apply_config(parser, argv):
    """Re-parse with values from ``--config`` as defaults."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return _check_required(args)
    with open(args.config) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"{args.config}: expected a mapping of option names to values")
    subparser = parser.commands[args.command]
    known = {a.dest for a in subparser._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "func"):
            raise UsageError(f"{args.config}: unknown option {key!r} for '{args.command}'")
        if isinstance(value, list) and dest not in ("fits", "lrt"):
            value = ",".join(map(str, value))
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if "seed" in defaults:
        args.seed = _seed(args.seed)
    return _check_required(args)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INPUT
    except (UsageError, OSError, yaml.YAMLError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, MnarHmmError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
