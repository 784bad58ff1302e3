"""Seeded synthetic registration logs with known ground-truth model parameters.

Courses are drawn from one seed stream and users from another, so a test
population of any size can be drawn against a fixed course catalogue by
changing ``seed`` while pinning ``course_seed``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import core
from .bursts import DAY, HOUR
from .ingest import RegistrationEvent

STUDY_START = 1380585600  # 2013-10-01T00:00:00Z


class ConfigError(ValueError):
    pass


def curved_powerlaw_table(b: float, c: float, k_max: int) -> dict[int, float]:
    """Normalized probabilities proportional to ``10 ** (b x + c x^2)``, ``x = log10 k``."""
    k = np.arange(1, k_max + 1)
    x = np.log10(k)
    w = 10.0 ** (b * x + c * x * x)
    w /= w.sum()
    return {int(i): float(p) for i, p in zip(k, w)}


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic platform description.

    Gap distributions are log-normal, given as ``(median seconds, sigma)``
    and optionally truncated to ``intra_gap_max`` / ``inter_gap_min`` so that
    clustering at any threshold in between recovers the generating bursts
    exactly.  ``fixed_registrations`` makes every user register exactly that
    many courses, with burst sizes drawn from ``burst_size`` until the total
    is reached (last burst truncated).
    """

    seed: int = 0
    course_seed: int | None = None
    n_users: int = 1000
    n_courses: int = 20
    n_noncert_courses: int = 0
    model: str = "betaend"
    beta: float = 0.13
    gamma: float = 0.4
    difficulty_bounds: tuple[float, float] = (0.25, 4.0)
    difficulties: tuple[float, ...] | None = None
    logistic_difficulty_bounds: tuple[float, float] = (-2.0, -1.0)
    singleton_rate_bounds: tuple[float, float] = (0.01, 0.35)
    singleton_rates: tuple[float, ...] | None = None
    burst_number: dict[int, float] = field(default_factory=lambda: {1: 0.7, 2: 0.15, 3: 0.1, 4: 0.05})
    burst_size: dict[int, float] = field(default_factory=lambda: {1: 0.75, 2: 0.13, 3: 0.07, 4: 0.05})
    fixed_registrations: int | None = None
    intra_gap: tuple[float, float] = (600.0, 1.0)
    inter_gap: tuple[float, float] = (20 * DAY, 1.0)
    intra_gap_max: float | None = 2 * HOUR
    inter_gap_min: float | None = 2 * DAY
    start_time: int = STUDY_START
    first_burst_span: float = 700 * DAY
    age_fraction: float = 0.93
    age_mean: float = 35.0
    age_sd: float = 12.0
    age_assortment: float = 0.0
    sampling: str = "withdrawal"

    def validate(self):
        if self.n_users < 0 or self.n_courses < 1 or self.n_noncert_courses < 0:
            raise ConfigError("n_users must be >= 0 and n_courses >= 1")
        total = self.n_courses + self.n_noncert_courses
        if max(self.burst_size) > total:
            raise ConfigError(f"burst size support {max(self.burst_size)} exceeds course count {total}")
        if self.fixed_registrations is not None and not 1 <= self.fixed_registrations <= total:
            raise ConfigError("fixed_registrations must lie in [1, course count]")
        if self.model not in ("betaend", "logistic"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.sampling not in ("withdrawal", "bernoulli"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.model == "betaend" and not self.beta > 0:
            raise ConfigError("beta must be positive")
        for name in ("burst_number", "burst_size"):
            table = getattr(self, name)
            if not table or min(table) < 1 or any(w < 0 for w in table.values()) or sum(table.values()) <= 0:
                raise ConfigError(f"{name} must map positive integers to non-negative weights")
        for name in ("intra_gap", "inter_gap"):
            if min(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} median and sigma must be positive")
        lo, hi = self.difficulty_bounds
        if not 0 < lo <= hi:
            raise ConfigError("difficulty bounds must be positive")
        lo, hi = self.singleton_rate_bounds
        if not 0 < lo <= hi < 1:
            raise ConfigError("singleton rate bounds must lie in (0, 1)")
        for name, n in (("difficulties", self.n_courses), ("singleton_rates", self.n_courses)):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ConfigError(f"{name} must have n_courses={n} entries")
        return self

    def to_dict(self):
        d = asdict(self)
        d["burst_number"] = {str(k): v for k, v in self.burst_number.items()}
        d["burst_size"] = {str(k): v for k, v in self.burst_size.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict):
        d = dict(d)
        for key in ("burst_number", "burst_size"):
            if key in d:
                d[key] = {int(k): float(v) for k, v in d[key].items()}
        for key in ("difficulty_bounds", "logistic_difficulty_bounds", "singleton_rate_bounds", "intra_gap", "inter_gap"):
            if key in d:
                d[key] = tuple(d[key])
        for key in ("difficulties", "singleton_rates"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


def fun_like_preset(seed: int = 0, n_users: int = 50_000) -> GeneratorConfig:
    """Desk-scale platform with 91 certificate and 49 non-certificate courses and beta = 0.13."""
    return GeneratorConfig(
        seed=seed,
        n_users=n_users,
        n_courses=91,
        n_noncert_courses=49,
        beta=0.13,
        singleton_rate_bounds=(0.01, 0.35),
        burst_number=curved_powerlaw_table(-2.16, -0.21, 40),
        burst_size=curved_powerlaw_table(-2.43, -0.45, 60),
    )


PRESETS = {"fun-like": fun_like_preset}


@dataclass
class GroundTruth:
    model: str
    beta: float | None
    gamma: float | None
    difficulties: dict[str, float]
    engagements: dict[str, float]
    singleton_rates: dict[str, float]
    default_e_c: float
    noncert_courses: list[str]
    user_engagement: dict[str, float]
    event_probability: np.ndarray
    withdrawal_time: np.ndarray
    burst_size: np.ndarray
    config: dict

    def params(self):
        if self.model == "betaend":
            return core.BetaEndParams(self.beta, dict(self.difficulties))
        return core.LogisticParams(self.gamma, dict(self.difficulties))

    def to_json(self, events=None) -> str:
        doc = {
            "model": self.model,
            "beta": self.beta,
            "gamma": self.gamma,
            "default_e_c": self.default_e_c,
            "config": self.config,
            "courses": {
                c: {
                    "offers_certificates": True,
                    "difficulty": self.difficulties[c],
                    "engagement": self.engagements[c],
                    "singleton_rate": self.singleton_rates[c],
                }
                for c in self.difficulties
            }
            | {c: {"offers_certificates": False, "engagement": self.default_e_c} for c in self.noncert_courses},
            "users": {u: {"engagement": e} for u, e in self.user_engagement.items()},
        }
        if events is not None:
            doc["events"] = [
                {
                    "user_id": ev.user_id,
                    "course_id": ev.course_id,
                    "burst_size": int(n),
                    "probability": None if np.isnan(p) else float(p),
                }
                for ev, p, n in zip(events, self.event_probability, self.burst_size)
            ]
        return json.dumps(doc, indent=1, sort_keys=True)


def withdrawal_time(u, e, beta):
    """Inverse-transform Weibull draw ``e * (-ln u) ** (1 / beta)`` for ``u`` in (0, 1]."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.asarray(e, dtype=float) * np.exp(np.log(-np.log(u)) / np.asarray(beta, dtype=float))
    return float(out) if out.ndim == 0 else out


def sample_withdrawal(e, beta, rng: np.random.Generator, size=None):
    """Weibull(shape ``beta``, scale ``e``) withdrawal pseudo-times."""
    shape = size if size is not None else np.broadcast(np.asarray(e), np.asarray(beta)).shape
    u = 1.0 - rng.random(shape)
    return withdrawal_time(u, e, beta)


def _table_sampler(table):
    keys = np.array(sorted(table), dtype=int)
    w = np.array([table[k] for k in keys], dtype=float)
    return keys, w / w.sum()


def _lognormal(rng, median, sigma, size, lo=None, hi=None):
    a = ndtr((np.log(lo) - np.log(median)) / sigma) if lo else 0.0
    b = ndtr((np.log(hi) - np.log(median)) / sigma) if hi else 1.0
    u = a + (b - a) * rng.random(size)
    u = np.clip(u, 1e-300, 1 - 1e-16)
    return median * np.exp(sigma * ndtri(u))


def _courses(config, rng):
    j = config.n_courses
    cert = [f"c{i:03d}" for i in range(j)]
    noncert = [f"x{i:03d}" for i in range(config.n_noncert_courses)]
    if config.singleton_rates is not None:
        c_s = np.array(config.singleton_rates, dtype=float)
    else:
        lo, hi = config.singleton_rate_bounds
        c_s = np.exp(rng.uniform(np.log(lo), np.log(hi), j))
    if config.model == "betaend":
        if config.difficulties is not None:
            d = np.array(config.difficulties, dtype=float)
        else:
            lo, hi = config.difficulty_bounds
            d = np.exp(rng.uniform(np.log(lo), np.log(hi), j))
        e_c = np.asarray(core.engagement_from_singleton(d, config.beta, c_s))
    else:
        if config.difficulties is not None:
            d = np.array(config.difficulties, dtype=float)
        else:
            d = rng.uniform(*config.logistic_difficulty_bounds, j)
        e_c = np.asarray(core.logistic_engagement_from_singleton(d, config.gamma, np.asarray(core.logit(c_s))))
    return cert, noncert, d, c_s, e_c


def generate(config: GeneratorConfig):
    """Draw an event log and its ground truth.

    Each user draws a burst count and burst sizes, a duplicate-free course set
    (uniform, or tilted by age when ``age_assortment`` is non-zero), and
    bimodal registration times.  Engagement is the sum of course engagements
    over the whole set; non-certificate courses contribute the median
    certificate-course engagement and never certify.  In ``withdrawal``
    sampling a registration certifies when a Weibull withdrawal time exceeds
    the difficulty and an independent ``1/N`` thinning keeps it; in
    ``bernoulli`` sampling it certifies with the model probability directly.

    Returns ``(events, truth)`` with events ordered by user then time.
    """
    config.validate()
    course_rng = np.random.default_rng([config.seed if config.course_seed is None else config.course_seed, 0])
    rng = np.random.default_rng([config.seed, 1])
    cert, noncert, d, c_s, e_c = _courses(config, course_rng)
    all_courses = cert + noncert
    n_total = len(all_courses)
    default_e_c = float(np.median(e_c))
    e_all = np.concatenate([e_c, np.full(len(noncert), default_e_c)])
    log_d_all = np.concatenate([np.log(d) if config.model == "betaend" else d, np.zeros(len(noncert))])
    log_d_all = log_d_all - log_d_all[: len(cert)].mean() if len(cert) else log_d_all

    num_keys, num_p = _table_sampler(config.burst_number)
    size_keys, size_p = _table_sampler(config.burst_size)

    users, course_idx, times, bsize, ages = [], [], [], [], {}
    user_e = {}
    for u in range(config.n_users):
        uid = f"u{u:06d}"
        age = None
        if rng.random() < config.age_fraction:
            age = int(np.clip(round(rng.normal(config.age_mean, config.age_sd)), 15, 80))
        if config.fixed_registrations is not None:
            sizes = []
            while sum(sizes) < config.fixed_registrations:
                sizes.append(int(rng.choice(size_keys, p=size_p)))
            sizes[-1] -= sum(sizes) - config.fixed_registrations
        else:
            k = int(rng.choice(num_keys, p=num_p))
            sizes = [int(s) for s in rng.choice(size_keys, size=k, p=size_p)]
            excess = sum(sizes) - n_total
            while excess > 0:
                cut = min(excess, sizes[-1])
                sizes[-1] -= cut
                excess -= cut
                if sizes[-1] == 0:
                    sizes.pop()
        m = sum(sizes)
        if config.age_assortment and age is not None:
            z = (age - config.age_mean) / config.age_sd
            w = np.exp(-config.age_assortment * z * log_d_all)
            chosen = rng.choice(n_total, size=m, replace=False, p=w / w.sum())
        else:
            chosen = rng.choice(n_total, size=m, replace=False)
        t = config.start_time + rng.uniform(0, config.first_burst_span)
        pos = 0
        for b, s in enumerate(sizes):
            if b > 0:
                t += float(_lognormal(rng, *config.inter_gap, None, lo=config.inter_gap_min))
            for i in range(s):
                if i > 0:
                    t += float(_lognormal(rng, *config.intra_gap, None, hi=config.intra_gap_max))
                users.append(uid)
                course_idx.append(int(chosen[pos]))
                times.append(int(np.ceil(t)))
                bsize.append(s)
                pos += 1
        user_e[uid] = float(e_all[chosen].sum())
        ages[uid] = age

    course_idx = np.array(course_idx, dtype=int)
    bsize_arr = np.array(bsize, dtype=int)
    n_ev = course_idx.size
    is_cert = course_idx < len(cert)
    e_u = np.array([user_e[u] for u in users], dtype=float)
    prob = np.full(n_ev, np.nan)
    t_hat = np.full(n_ev, np.nan)
    certified = np.zeros(n_ev, dtype=bool)
    if n_ev:
        ci = course_idx[is_cert]
        if config.model == "betaend":
            prob[is_cert] = np.exp(-((d[ci] / e_u[is_cert]) ** config.beta) - np.log(bsize_arr[is_cert]))
        else:
            prob[is_cert] = core.expit(d[ci] - e_u[is_cert] - config.gamma * bsize_arr[is_cert])
        draws = rng.random(n_ev)
        if config.model == "betaend" and config.sampling == "withdrawal":
            t_hat[is_cert] = sample_withdrawal(e_u[is_cert], config.beta, rng)
            survived = t_hat[is_cert] > d[ci]
            certified[is_cert] = survived & (draws[is_cert] * bsize_arr[is_cert] < 1.0)
        else:
            certified[is_cert] = draws[is_cert] < prob[is_cert]

    events = [
        RegistrationEvent(users[i], all_courses[course_idx[i]], times[i], bool(certified[i]), ages[users[i]])
        for i in range(n_ev)
    ]
    truth = GroundTruth(
        model=config.model,
        beta=config.beta if config.model == "betaend" else None,
        gamma=config.gamma if config.model == "logistic" else None,
        difficulties={c: float(v) for c, v in zip(cert, d)},
        engagements={c: float(v) for c, v in zip(cert, e_c)},
        singleton_rates={c: float(v) for c, v in zip(cert, c_s)},
        default_e_c=default_e_c,
        noncert_courses=noncert,
        user_engagement=user_e,
        event_probability=prob,
        withdrawal_time=t_hat,
        burst_size=bsize_arr,
        config=config.to_dict(),
    )
    return events, truth
