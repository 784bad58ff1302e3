"""Likelihood assembly, user-level splitting and maximum-likelihood fitting of both models.

The beta-END search runs over ``(ln beta, z)`` where ``ln D = H.T @ z`` and
``H`` is the Helmert contrast basis, so the geometric mean of the
difficulties is pinned to 1.  Predictions are invariant under a joint
rescaling of every difficulty and engagement; without the anchor the
likelihood would be flat along that ray.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import helmert

from . import core
from .ingest import CourseRecord, UserProfile, smoothed_rate
from .simplex import SimplexConfig, minimize

log = logging.getLogger(__name__)

BETAEND = "betaend"
LOGISTIC = "logistic"
MODELS = (BETAEND, LOGISTIC)


class NumericalGuardError(ArithmeticError):
    """A model probability left the open unit interval."""


@dataclass(frozen=True)
class SplitAssignment:
    seed: int
    train_fraction: float
    assignment: dict[str, str]

    @property
    def train(self) -> set[str]:
        return {u for u, g in self.assignment.items() if g == "train"}

    @property
    def test(self) -> set[str]:
        return {u for u, g in self.assignment.items() if g == "test"}


def split_users(profiles, seed: int, train_fraction: float) -> SplitAssignment:
    """Assign each user to train with probability ``train_fraction``, independently and reproducibly.

    Users are visited in sorted id order so the draw does not depend on input order.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly inside (0, 1)")
    users = sorted(profiles)
    draws = np.random.default_rng(seed).random(len(users))
    assignment = {u: ("train" if d < train_fraction else "test") for u, d in zip(users, draws)}
    return SplitAssignment(seed, train_fraction, assignment)


@dataclass
class EventTable:
    """Column-oriented view of registrations with their burst context, ordered by user then time."""

    user_id: np.ndarray
    course_id: np.ndarray
    timestamp: np.ndarray
    certified: np.ndarray
    burst_size: np.ndarray
    burst_ordinal: np.ndarray
    burst_position: np.ndarray
    n_registered: np.ndarray
    age: np.ndarray

    def __len__(self):
        return int(self.user_id.size)

    def subset(self, mask) -> "EventTable":
        return EventTable(**{k: v[mask] for k, v in vars(self).items()})


def event_table(profiles: dict[str, UserProfile], users=None) -> EventTable:
    """Flatten profiles (bursts must be assigned) into an :class:`EventTable`."""
    cols = {k: [] for k in EventTable.__dataclass_fields__}
    for uid in sorted(profiles if users is None else set(users) & set(profiles)):
        prof = profiles[uid]
        if not prof.bursts and prof.events:
            raise ValueError(f"profile {uid} has no bursts; assign bursts first")
        age = np.nan if prof.age is None else float(prof.age)
        for b in prof.bursts:
            for pos, ev in enumerate(b.events, start=1):
                cols["user_id"].append(uid)
                cols["course_id"].append(ev.course_id)
                cols["timestamp"].append(ev.timestamp)
                cols["certified"].append(ev.certified)
                cols["burst_size"].append(b.size)
                cols["burst_ordinal"].append(b.ordinal)
                cols["burst_position"].append(pos)
                cols["n_registered"].append(len(prof.registered))
                cols["age"].append(age)
    return EventTable(
        user_id=np.array(cols["user_id"], dtype=object),
        course_id=np.array(cols["course_id"], dtype=object),
        timestamp=np.array(cols["timestamp"], dtype=np.int64),
        certified=np.array(cols["certified"], dtype=bool),
        burst_size=np.array(cols["burst_size"], dtype=np.int64),
        burst_ordinal=np.array(cols["burst_ordinal"], dtype=np.int64),
        burst_position=np.array(cols["burst_position"], dtype=np.int64),
        n_registered=np.array(cols["n_registered"], dtype=np.int64),
        age=np.array(cols["age"], dtype=float),
    )


def user_engagement(profile: UserProfile, engagements: core.CourseEngagement, default_e_c: float) -> float:
    """Sum of course engagements over the user's registered set; unknown courses use ``default_e_c``."""
    if not profile.registered:
        raise core.DomainError(f"user {profile.user_id} has no registrations")
    e = engagements.engagements
    return float(sum(e.get(c, default_e_c) for c in profile.registered))


def bernoulli_nll(log_p, certified, log_q=None, refs=None) -> float:
    """``-sum(y ln p + (1 - y) ln(1 - p))`` from log probabilities.

    ``log_q`` is ``ln(1 - p)``; when omitted it is computed without forming
    ``1 - p``.  ``refs`` (parallel to ``log_p``) names events in the error
    raised for a probability outside (0, 1).
    """
    log_p = np.asarray(log_p, dtype=float)
    y = np.asarray(certified, dtype=bool)
    if log_p.size == 0:
        return 0.0
    if log_q is None:
        log_q = core.log1mexp(np.minimum(log_p, 0.0))
    log_q = np.asarray(log_q, dtype=float)
    bad = ~np.isfinite(log_p) | (log_p >= 0) | ~np.isfinite(log_q)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        who = refs[i] if refs is not None else f"event #{i}"
        raise NumericalGuardError(f"probability outside (0, 1) for {who}: ln p = {log_p[i]!r}")
    return float(-(np.sum(log_p[y]) + np.sum(log_q[~y])))


@dataclass
class _Design:
    """Compiled arrays for fast likelihood evaluation over one user population."""

    courses: list[str]
    incidence: sparse.csr_matrix
    n_other: np.ndarray
    ev_user: np.ndarray
    ev_course: np.ndarray
    log_n: np.ndarray
    n: np.ndarray
    y: np.ndarray
    multi: np.ndarray
    refs: np.ndarray

    @property
    def sign(self):
        # +1 for certified, -1 otherwise: NLL = sum(softplus(-sign * log_odds))
        return np.where(self.y, 1.0, -1.0)


def _design(table: EventTable, courses: list[str]) -> _Design:
    index = {c: j for j, c in enumerate(courses)}
    users, ev_user_all = np.unique(table.user_id, return_inverse=True)
    cidx = np.array([index.get(c, -1) for c in table.course_id], dtype=np.int64)
    scored = cidx >= 0
    inc = sparse.csr_matrix(
        (np.ones(int(scored.sum())), (ev_user_all[scored], cidx[scored])),
        shape=(users.size, len(courses)),
    )
    n_other = np.bincount(ev_user_all[~scored], minlength=users.size).astype(float)
    refs = np.array([f"{u}/{c}" for u, c in zip(table.user_id[scored], table.course_id[scored])], dtype=object)
    n = table.burst_size[scored].astype(float)
    return _Design(
        courses=list(courses),
        incidence=inc,
        n_other=n_other,
        ev_user=ev_user_all[scored],
        ev_course=cidx[scored],
        log_n=np.log(n),
        n=n,
        y=table.certified[scored],
        multi=table.n_registered[scored] > 1,
        refs=refs,
    )


def _betaend_engagement(log_d, beta, log_neg_log_cs):
    return np.exp(log_d - log_neg_log_cs / beta)


def _betaend_log_p(design, log_d, beta, e_c, default_e_c):
    e_u = design.incidence @ e_c + design.n_other * default_e_c
    x = np.exp(beta * (log_d[design.ev_course] - np.log(e_u[design.ev_user])))
    return -x - design.log_n, e_u


def _logistic_log_odds(design, d_c, gamma, e_c, default_e_c):
    e_u = design.incidence @ e_c + design.n_other * default_e_c
    return d_c[design.ev_course] - e_u[design.ev_user] - gamma * design.n, e_u


@dataclass(frozen=True)
class FitConfig:
    """Estimation settings: optimizer, initial point and non-certificate engagement.

    ``default_e_c`` of ``None`` means "median fitted course engagement".
    ``singleton_prior`` must match the prior used to build the course records.
    """

    optimizer: SimplexConfig = field(default_factory=SimplexConfig)
    initial_beta: float = 0.5
    default_e_c: float | None = None
    flat_tolerance: float = 1e-12
    singleton_prior: float = 0.5

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "optimizer" in d:
            d["optimizer"] = SimplexConfig(**d["optimizer"])
        return cls(**d)


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:10]


@dataclass
class FitResult:
    model: str
    params: core.BetaEndParams | core.LogisticParams
    engagement: core.CourseEngagement
    default_e_c: float
    nll: float
    trace: list[float]
    converged: bool
    degenerate: bool
    n_evaluations: int
    n_train_events: int
    singleton_rates: dict[str, float]
    pooled_singleton_rate: float
    seed: int
    config: dict
    created: str = ""

    @property
    def courses(self) -> list[str]:
        return list(self.params.difficulties)

    @property
    def n_free_parameters(self) -> int:
        return len(self.params.difficulties) + 1

    @property
    def config_hash(self) -> str:
        return config_hash({"model": self.model, "seed": self.seed, "config": self.config})

    def to_dict(self) -> dict:
        shape = {"beta": self.params.beta} if self.model == BETAEND else {"gamma": self.params.gamma}
        return {
            "model": self.model,
            **shape,
            "difficulties": self.params.difficulties,
            "engagements": self.engagement.engagements,
            "default_e_c": self.default_e_c,
            "nll": self.nll,
            "trace": self.trace,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "n_evaluations": self.n_evaluations,
            "n_train_events": self.n_train_events,
            "n_free_parameters": self.n_free_parameters,
            "singleton_rates": self.singleton_rates,
            "pooled_singleton_rate": self.pooled_singleton_rate,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "created": self.created,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        if d["model"] == BETAEND:
            params = core.BetaEndParams(d["beta"], dict(d["difficulties"]))
        elif d["model"] == LOGISTIC:
            params = core.LogisticParams(d["gamma"], dict(d["difficulties"]))
        else:
            raise ValueError(f"unknown model tag {d['model']!r}")
        return cls(
            model=d["model"],
            params=params,
            engagement=core.CourseEngagement(dict(d["engagements"])),
            default_e_c=d["default_e_c"],
            nll=d["nll"],
            trace=list(d["trace"]),
            converged=d["converged"],
            degenerate=d["degenerate"],
            n_evaluations=d["n_evaluations"],
            n_train_events=d["n_train_events"],
            singleton_rates=dict(d["singleton_rates"]),
            pooled_singleton_rate=d["pooled_singleton_rate"],
            seed=d["seed"],
            config=d["config"],
            created=d.get("created", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


def _fit_courses(records: dict[str, CourseRecord]) -> list[str]:
    courses = sorted(c for c, r in records.items() if r.offers_certificates)
    if not courses:
        raise ValueError("no certificate-offering course to fit")
    return courses


def _is_flat(objective, theta0, rng, tol) -> bool:
    f0 = objective(theta0)
    for _ in range(3):
        f1 = objective(theta0 + rng.normal(0, 0.5, theta0.size))
        if not abs(f1 - f0) <= tol * max(abs(f0), 1.0):
            return False
    return True


class BetaEndObjective:
    """NLL of the beta-END model as a function of ``(ln beta, z)``."""

    def __init__(self, table: EventTable, records: dict[str, CourseRecord], default_e_c=None):
        self.courses = _fit_courses(records)
        self.design = _design(table, self.courses)
        rates = np.array([records[c].c_singleton_smoothed for c in self.courses])
        self.rates = rates
        self.log_neg_log_cs = np.log(-np.log(rates))
        j = len(self.courses)
        self.basis = helmert(j) if j > 1 else np.zeros((0, 1))
        self.fixed_default = default_e_c

    @property
    def dim(self):
        return len(self.courses)

    def unpack(self, theta):
        return float(np.exp(theta[0])), self.basis.T @ theta[1:]

    def pack(self, beta, log_d):
        log_d = np.asarray(log_d, dtype=float)
        return np.concatenate([[np.log(beta)], self.basis @ (log_d - log_d.mean())])

    def engagement(self, beta, log_d):
        e_c = _betaend_engagement(log_d, beta, self.log_neg_log_cs)
        default = float(np.median(e_c)) if self.fixed_default is None else self.fixed_default
        return e_c, default

    def log_p(self, beta, log_d):
        e_c, default = self.engagement(beta, log_d)
        return _betaend_log_p(self.design, log_d, beta, e_c, default)[0]

    def nll(self, beta, log_d) -> float:
        return bernoulli_nll(self.log_p(beta, log_d), self.design.y, refs=self.design.refs)

    def __call__(self, theta) -> float:
        beta, log_d = self.unpack(theta)
        with np.errstate(all="ignore"):
            lp = self.log_p(beta, log_d)
            if not np.all(np.isfinite(lp)) or np.any(lp >= 0):
                return np.inf
            return float(-(lp[self.design.y].sum() + core.log1mexp(lp[~self.design.y]).sum()))


class LogisticObjective:
    """NLL of the logistic baseline as a function of ``(gamma, D_C)``."""

    def __init__(self, table: EventTable, records: dict[str, CourseRecord], default_e_c=None):
        self.courses = _fit_courses(records)
        self.design = _design(table, self.courses)
        self.l_s = np.array([records[c].l_singleton for c in self.courses])
        self.rates = np.array([records[c].c_singleton_smoothed for c in self.courses])
        self.fixed_default = default_e_c
        self._neg_sign = -self.design.sign

    @property
    def dim(self):
        return len(self.courses) + 1

    def unpack(self, theta):
        return float(theta[0]), np.asarray(theta[1:])

    def engagement(self, gamma, d_c):
        e_c = d_c - gamma - self.l_s
        default = float(np.median(e_c)) if self.fixed_default is None else self.fixed_default
        return e_c, default

    def log_odds(self, gamma, d_c):
        e_c, default = self.engagement(gamma, d_c)
        return _logistic_log_odds(self.design, d_c, gamma, e_c, default)[0]

    def nll(self, gamma, d_c) -> float:
        lo = self.log_odds(gamma, d_c)
        return bernoulli_nll(-np.logaddexp(0, -lo), self.design.y, -np.logaddexp(0, lo), self.design.refs)

    def __call__(self, theta) -> float:
        gamma, d_c = self.unpack(theta)
        lo = self.log_odds(gamma, d_c)
        return float(np.logaddexp(0, self._neg_sign * lo).sum())


def _finish(objective, result, seed, records, degenerate, prior):
    return dict(
        trace=[float(v) for v in result.trace],
        converged=bool(result.converged),
        degenerate=degenerate,
        n_evaluations=int(result.n_evals),
        n_train_events=int(objective.design.y.size),
        singleton_rates={c: float(r) for c, r in zip(objective.courses, objective.rates)},
        pooled_singleton_rate=float(_pooled(records, prior)),
        seed=seed,
    )


def _pooled(records, prior):
    return smoothed_rate(
        sum(r.n_singleton_certified for r in records.values() if r.offers_certificates),
        sum(r.n_singleton for r in records.values() if r.offers_certificates),
        prior,
    )


def _degenerate(objective, theta0, config, seed):
    structural = not objective.design.multi.any()
    flat = _is_flat(objective, theta0, np.random.default_rng([seed, 99]), config.flat_tolerance)
    return bool(structural or flat)


def _stamp():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def fit_betaend(
    table: EventTable,
    records: dict[str, CourseRecord],
    config: FitConfig = FitConfig(),
    seed: int | None = None,
    meta: dict | None = None,
) -> FitResult:
    """Maximum-likelihood beta-END fit.

    ``table`` holds every registration of the training users (non-certificate
    courses included, since they count toward engagement and burst size);
    ``records`` carries the training-split singleton rates.  The starting
    point is all difficulties equal at the anchor with ``beta`` chosen by a
    one-dimensional simplex search; the full search then runs from there.
    """
    seed = config.optimizer.seed if seed is None else seed
    obj = BetaEndObjective(table, records, config.default_e_c)
    if obj.design.y.size == 0:
        raise ValueError("no training events in certificate-offering courses")
    opt = SimplexConfig(**(asdict(config.optimizer) | {"seed": seed}))
    zeros = np.zeros(obj.dim - 1)
    theta0 = np.concatenate([[np.log(config.initial_beta)], zeros])
    degenerate = _degenerate(obj, theta0, config, seed)
    if degenerate:
        log.warning("beta-END likelihood is flat (no multi-course training users); D is unidentifiable")
    line = minimize(lambda t: obj(np.concatenate([t, zeros])), theta0[:1], SimplexConfig(tol=opt.tol, max_evals=500, restarts=1, seed=seed))
    start = np.concatenate([line.x, zeros])
    budget = SimplexConfig(**(asdict(opt) | {"max_evals": max(opt.max_evals - line.n_evals, 1)}))
    result = minimize(obj, start, budget)
    result.trace = line.trace + result.trace
    result.n_evals += line.n_evals
    beta, log_d = obj.unpack(result.x)
    e_c, default = obj.engagement(beta, log_d)
    params = core.BetaEndParams(beta, {c: float(v) for c, v in zip(obj.courses, np.exp(log_d))})
    extra = _finish(obj, result, seed, records, degenerate, config.singleton_prior)
    return FitResult(
        model=BETAEND,
        params=params,
        engagement=core.CourseEngagement({c: float(v) for c, v in zip(obj.courses, e_c)}),
        default_e_c=float(default),
        nll=float(obj.nll(beta, log_d)),
        config={"fit": config.to_dict()} | (meta or {}),
        created=_stamp(),
        **extra,
    )


def fit_logistic(
    table: EventTable,
    records: dict[str, CourseRecord],
    config: FitConfig = FitConfig(),
    seed: int | None = None,
    meta: dict | None = None,
) -> FitResult:
    """Maximum-likelihood fit of the logistic baseline.

    The search starts from ``D_C = L_S + delta`` for every course, so all
    course engagements share the value ``-gamma - delta``; ``(gamma, delta)``
    are first chosen by a two-dimensional simplex search, then the full
    search runs from there.
    """
    seed = config.optimizer.seed if seed is None else seed
    obj = LogisticObjective(table, records, config.default_e_c)
    if obj.design.y.size == 0:
        raise ValueError("no training events in certificate-offering courses")
    opt = SimplexConfig(**(asdict(config.optimizer) | {"seed": seed}))
    theta0 = np.concatenate([[0.0], obj.l_s])
    degenerate = _degenerate(obj, theta0, config, seed)
    if degenerate:
        log.warning("logistic likelihood is flat (no multi-course training users); D_C is unidentifiable")
    pre = minimize(
        lambda t: obj(np.concatenate([t[:1], obj.l_s + t[1]])),
        np.zeros(2),
        SimplexConfig(tol=opt.tol, max_evals=500, restarts=1, seed=seed),
    )
    start = np.concatenate([pre.x[:1], obj.l_s + pre.x[1]])
    budget = SimplexConfig(**(asdict(opt) | {"max_evals": max(opt.max_evals - pre.n_evals, 1)}))
    result = minimize(obj, start, budget)
    result.trace = pre.trace + result.trace
    result.n_evals += pre.n_evals
    gamma, d_c = obj.unpack(result.x)
    e_c, default = obj.engagement(gamma, d_c)
    extra = _finish(obj, result, seed, records, degenerate, config.singleton_prior)
    return FitResult(
        model=LOGISTIC,
        params=core.LogisticParams(gamma, {c: float(v) for c, v in zip(obj.courses, d_c)}),
        engagement=core.CourseEngagement({c: float(v) for c, v in zip(obj.courses, e_c)}),
        default_e_c=float(default),
        nll=float(obj.nll(gamma, d_c)),
        config={"fit": config.to_dict()} | (meta or {}),
        created=_stamp(),
        **extra,
    )


FITTERS = {BETAEND: fit_betaend, LOGISTIC: fit_logistic}


@dataclass
class ScoredEvents:
    """Model predictions for the certificate-offering registrations of an event table."""

    model: str
    table: EventTable
    probability: np.ndarray
    log_probability: np.ndarray
    e_u: np.ndarray
    difficulty: np.ndarray
    flagged: np.ndarray

    def __len__(self):
        return len(self.table)

    def __iter__(self):
        for i in range(len(self)):
            yield (self.table.user_id[i], self.table.course_id[i], self.model, float(self.probability[i]))


def predict(fit: FitResult, table: EventTable, cert_courses=None) -> ScoredEvents:
    """Score every certificate-offering registration in ``table``.

    ``cert_courses`` defaults to the fitted courses.  A certificate course the
    fit has never seen is scored with the default engagement (and, for
    beta-END, the anchor difficulty 1; for the logistic model the mean
    fitted ``D_C``) and flagged.
    """
    fitted = fit.params.difficulties
    cert = set(fitted) if cert_courses is None else set(cert_courses)
    scored_mask = np.array([c in cert for c in table.course_id], dtype=bool)
    e_map = fit.engagement.engagements
    users, inv = np.unique(table.user_id, return_inverse=True)
    e_rows = np.array([e_map.get(c, fit.default_e_c) for c in table.course_id], dtype=float)
    e_u_user = np.bincount(inv, weights=e_rows, minlength=users.size)
    sub = table.subset(scored_mask)
    e_u = e_u_user[inv[scored_mask]]
    flagged = np.array([c not in fitted for c in sub.course_id], dtype=bool)
    if flagged.any():
        log.warning("%d events in courses absent from the fit were scored with defaults", int(flagged.sum()))
    n = sub.burst_size.astype(float)
    if fit.model == BETAEND:
        d = np.array([fitted.get(c, 1.0) for c in sub.course_id], dtype=float)
        log_p = -np.exp(fit.params.beta * (np.log(d) - np.log(e_u))) - np.log(n)
    else:
        mean_dc = float(np.mean(list(fitted.values())))
        d = np.array([fitted.get(c, mean_dc) for c in sub.course_id], dtype=float)
        log_p = -np.logaddexp(0, -(d - e_u - fit.params.gamma * n))
    return ScoredEvents(fit.model, sub, np.exp(log_p), log_p, e_u, d, flagged)


def negative_log_likelihood(fit: FitResult, table: EventTable) -> float:
    """NLL of the certificate outcomes in ``table`` under a fitted model."""
    s = predict(fit, table)
    refs = [f"{u}/{c}" for u, c in zip(s.table.user_id, s.table.course_id)]
    if fit.model == LOGISTIC:
        lo = s.difficulty - s.e_u - fit.params.gamma * s.table.burst_size
        return bernoulli_nll(-np.logaddexp(0, -lo), s.table.certified, -np.logaddexp(0, lo), refs)
    return bernoulli_nll(s.log_probability, s.table.certified, refs=refs)
