"""Long-format ingestion, week-grid expansion, CSV round trips and the
state-independent missingness regression."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .core import Dataset, TimeSeries
from .errors import DataFormatError, DuplicateRecordError, SchemaError
from .estimation import weighted_logistic_irls


class RangeWarning(UserWarning):
    """A response lies outside its nominal scale."""


@dataclass(frozen=True)
class LongRecordSchema:
    """Column roles of a whitespace-delimited long file (one row per
    observed subject-week)."""

    columns: tuple = ("id", "imps79", "week", "drug", "sex")
    id: str = "id"
    response: str = "imps79"
    week: str = "week"
    treatment: str = "drug"
    missing_tokens: tuple = (".", "NA")
    weeks: tuple = tuple(range(7))
    main_weeks: tuple = (0, 1, 3, 6)
    response_range: tuple = (1.0, 7.0)

    def __post_init__(self):
        for role in ("id", "response", "week"):
            if getattr(self, role) not in self.columns:
                raise SchemaError(f"{role} column {getattr(self, role)!r} not among {self.columns}")
        if self.treatment is not None and self.treatment not in self.columns:
            raise SchemaError(f"treatment column {self.treatment!r} not among {self.columns}")

    @property
    def covariate_names(self):
        names = ["week"]
        if self.treatment is not None:
            names.append("drug")
        names.append("main")
        return tuple(names)


def _parse_id(token):
    try:
        f = float(token)
    except ValueError:
        return token
    return int(f) if f.is_integer() else token


def _is_number(token):
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_long(path, schema: LongRecordSchema | None = None) -> Dataset:
    """Read a long file and expand every subject to the full week grid.

    Absent weeks, and rows whose response is a missing token, become
    missing records. Records carry the covariates ``week`` (metric),
    ``drug`` (constant within subject) and ``main`` (1 on main measurement
    weeks).
    """
    schema = schema or LongRecordSchema()
    col = {name: i for i, name in enumerate(schema.columns)}
    grid = {w: i for i, w in enumerate(schema.weeks)}
    subjects = {}
    lo, hi = schema.response_range
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if lineno == 1 and not all(_is_number(t) or t in schema.missing_tokens for t in tokens):
                continue  # header
            if len(tokens) < len(schema.columns):
                raise DataFormatError(
                    f"expected {len(schema.columns)} columns, found {len(tokens)}", line=lineno
                )
            try:
                sid = _parse_id(tokens[col[schema.id]])
                week = float(tokens[col[schema.week]])
                raw = tokens[col[schema.response]]
                y = math.nan if raw in schema.missing_tokens else float(raw)
                drug = float(tokens[col[schema.treatment]]) if schema.treatment else None
            except ValueError as exc:
                raise DataFormatError(f"cannot parse row: {exc}", line=lineno) from None
            if not week.is_integer() or int(week) not in grid:
                raise DataFormatError(f"week {week:g} is not on the grid {schema.weeks}", line=lineno)
            week = int(week)
            if not math.isnan(y) and not lo <= y <= hi:
                warnings.warn(f"line {lineno}: response {y} outside [{lo:g}, {hi:g}]", RangeWarning,
                              stacklevel=2)
            entry = subjects.setdefault(sid, {"y": {}, "drug": drug})
            if week in entry["y"]:
                raise DuplicateRecordError(f"subject {sid!r} has two rows for week {week}",
                                           line=lineno)
            if drug is not None and entry["drug"] != drug:
                raise DataFormatError(f"treatment of subject {sid!r} changes over time",
                                      line=lineno)
            entry["y"][week] = y
    if not subjects:
        raise DataFormatError("no data rows found")

    weeks = np.asarray(schema.weeks, dtype=float)
    main = np.isin(schema.weeks, schema.main_weeks).astype(float)
    series = []
    for sid, entry in sorted(subjects.items(), key=lambda kv: _sort_key(kv[0])):
        y = np.array([entry["y"].get(w, math.nan) for w in schema.weeks])
        covs = {"week": weeks}
        if schema.treatment is not None:
            covs["drug"] = np.full(len(weeks), entry["drug"])
        covs["main"] = main
        series.append(TimeSeries(sid, y, covs))
    return Dataset(series, schema.covariate_names)


def _sort_key(sid):
    return (0, sid, "") if isinstance(sid, int) else (1, 0, str(sid))


# ---------------------------------------------------------------------------
# expanded CSV
# ---------------------------------------------------------------------------


def write_csv(dataset: Dataset, path, response="y", leading=()):
    """One row per record: id, leading covariates, response (empty when
    missing), missing indicator, remaining covariates."""
    leading = tuple(leading)
    for name in leading:
        if name not in dataset.covariate_names:
            raise SchemaError(f"unknown covariate {name!r}")
    others = tuple(n for n in dataset.covariate_names if n not in leading)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id",) + leading + (response, "missing") + others)
        for s in dataset:
            for i, y in enumerate(s.y):
                miss = math.isnan(y)
                w.writerow(
                    [s.id]
                    + [_fmt(s.covariates[n][i]) for n in leading]
                    + ["" if miss else repr(float(y)), int(miss)]
                    + [_fmt(s.covariates[n][i]) for n in others]
                )


def write_expanded_csv(dataset: Dataset, path):
    """Expanded long data with columns id, week, imps79, missing, drug, main."""
    write_csv(dataset, path, response="imps79", leading=("week",))


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def read_csv(path) -> Dataset:
    """Inverse of :func:`write_csv`; rows of a series must be contiguous and
    in time order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file") from None
        if not header or header[0] != "id" or "missing" not in header:
            raise DataFormatError("header must start with 'id' and contain 'missing'", line=1)
        mpos = header.index("missing")
        if mpos < 2:
            raise DataFormatError("no response column before 'missing'", line=1)
        rpos = mpos - 1
        cov_cols = [i for i in range(1, len(header)) if i not in (rpos, mpos)]
        names = tuple(header[i] for i in cov_cols)
        rows = {}
        order = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
            sid = _parse_id(row[0])
            try:
                y = math.nan if row[rpos] == "" else float(row[rpos])
                flag = int(row[mpos])
                covs = [float(row[i]) for i in cov_cols]
            except ValueError as exc:
                raise DataFormatError(f"cannot parse row: {exc}", line=lineno) from None
            if flag != int(math.isnan(y)):
                raise DataFormatError("missing flag disagrees with the response", line=lineno)
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            elif order[-1] != sid:
                raise DataFormatError(f"rows of series {sid!r} are not contiguous", line=lineno)
            rows[sid].append((y, covs))
    if not order:
        raise DataFormatError("no data rows found")
    series = []
    for sid in order:
        data = rows[sid]
        y = [d[0] for d in data]
        covs = {n: [d[1][j] for d in data] for j, n in enumerate(names)}
        series.append(TimeSeries(sid, y, covs))
    return Dataset(series, names)


# ---------------------------------------------------------------------------
# descriptive summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MissingnessProfile:
    labels: np.ndarray  # time label per position (week value when available)
    observed_fraction: np.ndarray
    observed_counts: np.ndarray  # per subject
    main_counts: np.ndarray | None = None  # per subject, main weeks only
    by_treatment: dict = field(default_factory=dict)  # treatment -> per-position fractions

    def fraction_with_at_least(self, k, main_only=False):
        counts = self.main_counts if main_only else self.observed_counts
        if counts is None:
            raise SchemaError("dataset has no 'main' covariate")
        return float(np.mean(counts >= k))

    def count_distribution(self):
        values, counts = np.unique(self.observed_counts, return_counts=True)
        return dict(zip(values.tolist(), (counts / counts.sum()).tolist()))


def summarize_missingness(dataset: Dataset) -> MissingnessProfile:
    lengths = {len(s) for s in dataset}
    if len(lengths) != 1:
        raise ValueError("summaries need series of equal length")
    y = np.stack([s.y for s in dataset])
    obs = ~np.isnan(y)
    first = dataset.series[0]
    labels = first.covariates.get("week", np.arange(first.start, first.start + len(first)))
    main_counts = None
    if "main" in dataset.covariate_names:
        main = np.stack([s.covariates["main"] for s in dataset]) > 0
        main_counts = (obs & main).sum(axis=1)
    by_treatment = {}
    if "drug" in dataset.covariate_names:
        drug = np.array([s.covariates["drug"][0] for s in dataset])
        for d in np.unique(drug):
            by_treatment[float(d)] = obs[drug == d].mean(axis=0)
    return MissingnessProfile(np.asarray(labels), obs.mean(axis=0), obs.sum(axis=1), main_counts,
                              by_treatment)


# ---------------------------------------------------------------------------
# missingness regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    names: tuple
    estimate: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    separated: bool
    converged: bool

    def rows(self):
        return [
            {"term": n, "estimate": float(b), "se": float(s), "z": float(z), "p": float(p)}
            for n, b, s, z, p in zip(self.names, self.estimate, self.se, self.z, self.p)
        ]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["term", "estimate", "se", "z", "p"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: v if k == "term" else repr(v) for k, v in row.items()})


def _term_column(dataset, term):
    parts = term.split(":")
    cols = []
    for s in dataset:
        col = np.ones(len(s))
        for p in parts:
            if p not in s.covariates:
                raise SchemaError(f"unknown covariate {p!r} in term {term!r}")
            col = col * s.covariates[p]
        cols.append(col)
    return np.concatenate(cols)


def glm_missingness(dataset: Dataset, terms=("drug", "week", "main", "drug:week", "drug:main"),
                    max_iterations=100) -> CoefficientTable:
    """Logistic regression of the missingness indicator on an intercept plus
    ``terms``; ``a:b`` denotes the product of covariates ``a`` and ``b``."""
    terms = tuple(terms)
    m = np.concatenate([s.m for s in dataset]).astype(float)
    X = np.column_stack([np.ones(len(m))] + [_term_column(dataset, t) for t in terms])
    fit = weighted_logistic_irls(X, m, max_iterations=max_iterations)
    eta = X @ fit.coef
    mu = special.expit(eta)
    info = X.T @ (X * (mu * (1 - mu))[:, None])
    try:
        cov = np.linalg.inv(info)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(len(fit.coef), math.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = fit.coef / se
    p = 2.0 * special.ndtr(-np.abs(z))
    return CoefficientTable(("(Intercept)",) + terms, fit.coef, se, z, p, fit.separated,
                            fit.converged)
