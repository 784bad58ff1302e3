"""Evaluation battery: calibration bins, co-registration cohorts, burst-size curves,
engagement heatmap data and group trends.

Functions taking ``scored`` expect a mapping ``model tag -> ScoredEvents``
produced by :func:`betaend.estimation.predict` on the same event table, so
rows align across models.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse, stats

from .core import DomainError
from .estimation import EventTable, ScoredEvents
from .ingest import CourseRecord

log = logging.getLogger(__name__)

LOW_SUPPORT = 30
MIN_COHORT_CERTIFICATES = 5
AGE_EDGES = tuple(range(15, 80, 5))


class DegenerateCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationBin:
    index: int
    count: int
    n_certified: int
    mean_predicted: float
    observed: float


def calibration_table(scored: ScoredEvents, n_bins: int = 20) -> list[CalibrationBin]:
    """Equal-count bins of events sorted by predicted probability (stable, ties keep input order)."""
    n = len(scored)
    if n == 0:
        raise ValueError("no scored events")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if n < n_bins:
        log.warning("only %d events for %d bins; using %d bins", n, n_bins, n)
        n_bins = n
    order = np.argsort(scored.probability, kind="stable")
    p = scored.probability[order]
    y = scored.table.certified[order]
    out = []
    for i, idx in enumerate(np.array_split(np.arange(n), n_bins), start=1):
        out.append(CalibrationBin(i, int(idx.size), int(y[idx].sum()), float(p[idx].mean()), float(y[idx].mean())))
    return out


def _logit(p):
    with np.errstate(divide="ignore"):
        return float(np.log(p) - np.log1p(-p)) if 0 <= p <= 1 else math.nan


def _loglog(p):
    with np.errstate(divide="ignore"):
        return float(np.log(-np.log(p))) if 0 < p < 1 else math.nan


@dataclass
class CohortStat:
    first: str
    second: str
    n_users: int
    n_certificates: int
    rate: float
    log_odds: float
    log_odds_ratio: float
    loglog_difference: float
    predicted: dict[str, dict[str, float]] = field(default_factory=dict)


def cohort_statistics(n_users, n_certificates, singleton_rate):
    """Observed rate, log-odds, log-odds ratio and loglog difference of one cohort."""
    rate = n_certificates / n_users
    lo = _logit(rate)
    return rate, lo, lo - _logit(singleton_rate), _loglog(rate) - _loglog(singleton_rate)


def _matrix(users, courses, rows, cols, values):
    return sparse.csr_matrix((values, (rows, cols)), shape=(users, courses))


def cohort_table(
    scored: dict[str, ScoredEvents],
    singletons: dict[str, CourseRecord],
    min_certificates: int = MIN_COHORT_CERTIFICATES,
) -> list[CohortStat]:
    """Statistics for every ordered pair (A, B) of distinct scored courses.

    The cohort is the users registering both; its rate is A's certificate
    rate among them.  Observed log-odds ratios and loglog differences are
    taken against A's smoothed singleton rate in ``singletons`` (normally
    the evaluation population).  Model analogues average predicted
    probabilities over the cohort's A registrations and compare with the
    model's own mean singleton prediction.  Cohorts with fewer than
    ``min_certificates`` certificates are dropped.
    """
    models = list(scored)
    if not models:
        raise ValueError("need at least one scored model")
    ref = scored[models[0]]
    courses = sorted(set(ref.table.course_id))
    if len(courses) < 2:
        return []
    cidx = {c: j for j, c in enumerate(courses)}
    users, uinv = np.unique(ref.table.user_id, return_inverse=True)
    cj = np.array([cidx[c] for c in ref.table.course_id])
    shape = (users.size, len(courses))
    member = _matrix(*shape, uinv, cj, np.ones(cj.size))
    cert = _matrix(*shape, uinv, cj, ref.table.certified.astype(float))
    n_users = (member.T @ member).toarray()
    n_cert = (cert.T @ member).toarray()
    single = ref.table.n_registered == 1
    pred_sum, pred_single = {}, {}
    for m, s in scored.items():
        if len(s) != len(ref) or not np.array_equal(s.table.course_id, ref.table.course_id):
            raise ValueError(f"scored events of {m!r} do not align with {models[0]!r}")
        pred_sum[m] = (_matrix(*shape, uinv, cj, s.probability).T @ member).toarray()
        tot = np.bincount(cj[single], weights=s.probability[single], minlength=len(courses))
        cnt = np.bincount(cj[single], minlength=len(courses))
        with np.errstate(invalid="ignore", divide="ignore"):
            pred_single[m] = tot / cnt
    out = []
    for a, ca in enumerate(courses):
        rec = singletons.get(ca)
        s_rate = rec.c_singleton_smoothed if rec is not None else math.nan
        for b, cb in enumerate(courses):
            if a == b or n_cert[a, b] < min_certificates:
                continue
            nu, nc = int(n_users[a, b]), int(n_cert[a, b])
            rate, lo, lor, lld = cohort_statistics(nu, nc, s_rate)
            stat = CohortStat(ca, cb, nu, nc, rate, lo, lor, lld)
            for m in models:
                pr = pred_sum[m][a, b] / nu
                ps = pred_single[m][a]
                stat.predicted[m] = {
                    "rate": float(pr),
                    "log_odds": _logit(pr),
                    "log_odds_ratio": _logit(pr) - _logit(ps),
                    "loglog_difference": _loglog(pr) - _loglog(ps),
                }
            out.append(stat)
    return out


def r_squared(predicted, observed) -> float:
    """Squared Pearson correlation; raises on zero variance."""
    x = np.asarray(predicted, dtype=float)
    y = np.asarray(observed, dtype=float)
    if x.size < 2:
        raise DegenerateCorrelationError("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateCorrelationError("zero variance in predicted or observed values")
    return float((dx @ dy) ** 2 / (sxx * syy))


def cohort_correlations(cohorts: list[CohortStat]) -> dict[str, dict[str, float]]:
    """Per model, r^2 between predicted and observed cohort log-odds and log-odds ratios."""
    if not cohorts:
        raise DegenerateCorrelationError("no cohorts")
    out = {}
    for m in cohorts[0].predicted:
        out[m] = {}
        for key in ("log_odds", "log_odds_ratio"):
            pairs = np.array([(c.predicted[m][key], getattr(c, key)) for c in cohorts], dtype=float)
            ok = np.isfinite(pairs).all(axis=1)
            out[m][key] = r_squared(pairs[ok, 0], pairs[ok, 1])
    return out


@dataclass(frozen=True)
class BurstSizeRow:
    burst_size: int
    n_events: int
    n_certified: int
    observed: float
    predicted: dict[str, float]
    low_support: bool


def burst_size_curve(scored: dict[str, ScoredEvents], low_support: int = LOW_SUPPORT) -> list[BurstSizeRow]:
    """Observed and mean predicted certificate rate per burst size."""
    ref = next(iter(scored.values()))
    n = ref.table.burst_size
    y = ref.table.certified
    rows = []
    for size in np.unique(n):
        m = n == size
        rows.append(
            BurstSizeRow(
                int(size),
                int(m.sum()),
                int(y[m].sum()),
                float(y[m].mean()),
                {k: float(s.probability[m].mean()) for k, s in scored.items()},
                bool(m.sum() < low_support),
            )
        )
    return rows


@dataclass
class EffectMatrix:
    """Heatmap data: loglog differences with rows/columns in ``order``."""

    order: list[str]
    values: np.ndarray
    row_median: dict[str, float]
    ln_engagement: dict[str, dict[str, float]]

    def to_dict(self):
        return {
            "order": self.order,
            "values": [[None if not np.isfinite(v) else float(v) for v in row] for row in self.values],
            "row_median": {k: (None if not np.isfinite(v) else v) for k, v in self.row_median.items()},
            "ln_engagement": self.ln_engagement,
        }


def engagement_effect_matrix(cohorts: list[CohortStat], engagements: dict[str, dict[str, float]]) -> EffectMatrix:
    """Observed loglog differences arranged by first (row) and co-registered (column) course.

    Courses are ordered by ascending median row effect (courses without any
    cohort last, by id).  ``engagements`` maps a model tag to its course
    engagements; the log is reported where the engagement is positive.
    """
    courses = sorted({c.first for c in cohorts} | {c.second for c in cohorts} | {k for e in engagements.values() for k in e})
    idx = {c: i for i, c in enumerate(courses)}
    mat = np.full((len(courses), len(courses)), np.nan)
    for c in cohorts:
        mat[idx[c.first], idx[c.second]] = c.loglog_difference
    finite = np.where(np.isfinite(mat), mat, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN rows
        med = np.nanmedian(finite, axis=1)
    key = [(np.isnan(m), m if not np.isnan(m) else 0.0, c) for c, m in zip(courses, med)]
    order = [k[2] for k in sorted(key)]
    perm = [idx[c] for c in order]
    ln_e = {
        model: {c: (math.log(e[c]) if c in e and e[c] > 0 else None) for c in order}
        for model, e in engagements.items()
    }
    return EffectMatrix(order, mat[np.ix_(perm, perm)], {c: float(med[idx[c]]) for c in order}, ln_e)


GROUPINGS = ("age", "burst-ordinal", "within-burst-order")


def age_label(age, edges=AGE_EDGES):
    if age < edges[0]:
        return f"<{edges[0]}"
    if age >= edges[-1]:
        return f">={edges[-1]}"
    i = int(np.searchsorted(edges, age, side="right")) - 1
    return f"{edges[i]}-{edges[i + 1] - 1}"


def _group_keys(table: EventTable, grouping, edges):
    if grouping == "age":
        ok = np.isfinite(table.age)
        keys = np.array([age_label(a, edges) if o else "" for a, o in zip(table.age, ok)], dtype=object)
        sort = {age_label(e - 1, edges): i for i, e in enumerate(list(edges) + [edges[-1] + 1])}
        return keys, ok, lambda k: sort.get(k, -1)
    if grouping == "burst-ordinal":
        return table.burst_ordinal, np.ones(len(table), bool), int
    if grouping == "within-burst-order":
        return table.burst_position, np.ones(len(table), bool), int
    raise ValueError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")


@dataclass(frozen=True)
class GroupRow:
    group: str
    n_events: int
    n_certified: int
    observed: float
    ci_low: float
    ci_high: float
    mean_difficulty: dict[str, float]
    mean_engagement: dict[str, float]


def binomial_interval(k: int, n: int, level: float = 0.95):
    ci = stats.binomtest(k, n).proportion_ci(level, method="wilson")
    return float(ci.low), float(ci.high)


def group_trends(scored: dict[str, ScoredEvents], grouping: str, age_edges=AGE_EDGES) -> list[GroupRow]:
    """Observed rate (with 95% Wilson interval), mean difficulty and mean user engagement per group.

    Users without an age are skipped by the age grouping; empty groups are omitted.
    """
    ref = next(iter(scored.values()))
    keys, ok, sort_key = _group_keys(ref.table, grouping, age_edges)
    rows = []
    for key in sorted(set(keys[ok].tolist()), key=sort_key):
        m = ok & (keys == key)
        n = int(m.sum())
        if n == 0:
            continue
        k = int(ref.table.certified[m].sum())
        lo, hi = binomial_interval(k, n)
        rows.append(
            GroupRow(
                str(key),
                n,
                k,
                k / n,
                lo,
                hi,
                {mod: float(s.difficulty[m].mean()) for mod, s in scored.items()},
                {mod: float(s.e_u[m].mean()) for mod, s in scored.items()},
            )
        )
    return rows


def certificates_per_burst(table: EventTable) -> float:
    """Total certificates divided by the number of bursts."""
    n_bursts = int(np.count_nonzero(table.burst_position == 1))
    if n_bursts == 0:
        raise DomainError("no bursts")
    return float(table.certified.sum()) / n_bursts


def certificate_rate(table: EventTable) -> float:
    if len(table) == 0:
        raise DomainError("no registrations")
    return float(table.certified.mean())


# -- flat rows for export ---------------------------------------------------


def calibration_rows(tables: dict[str, list[CalibrationBin]]):
    return [
        {"model": m, "bin": b.index, "count": b.count, "n_certified": b.n_certified,
         "mean_predicted": b.mean_predicted, "observed": b.observed}
        for m, bins in tables.items()
        for b in bins
    ]


def cohort_rows(cohorts: list[CohortStat]):
    rows = []
    for c in cohorts:
        row = {
            "first": c.first, "second": c.second, "n_users": c.n_users, "n_certificates": c.n_certificates,
            "rate": c.rate, "log_odds": c.log_odds, "log_odds_ratio": c.log_odds_ratio,
            "loglog_difference": c.loglog_difference,
        }
        for m, p in c.predicted.items():
            row |= {f"{k}_{m}": v for k, v in p.items()}
        rows.append(row)
    return rows


def burst_rows(curve: list[BurstSizeRow]):
    return [
        {"burst_size": r.burst_size, "n_events": r.n_events, "n_certified": r.n_certified,
         "observed": r.observed, "low_support": r.low_support}
        | {f"predicted_{m}": v for m, v in r.predicted.items()}
        for r in curve
    ]


def trend_rows(rows: list[GroupRow], grouping: str):
    return [
        {"grouping": grouping, "group": r.group, "n_events": r.n_events, "n_certified": r.n_certified,
         "observed": r.observed, "ci_low": r.ci_low, "ci_high": r.ci_high}
        | {f"mean_difficulty_{m}": v for m, v in r.mean_difficulty.items()}
        | {f"mean_engagement_{m}": v for m, v in r.mean_engagement.items()}
        for r in rows
    ]
