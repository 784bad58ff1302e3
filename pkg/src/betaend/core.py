"""Weibull survival kernel, the beta-END certificate probability and the logistic baseline.

All functions accept scalars or numpy arrays and broadcast.  Scalar inputs
return Python floats.  Everything is evaluated in log space where possible so
that certificate probabilities spanning several orders of magnitude keep full
relative precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a model function."""


@dataclass(frozen=True)
class BetaEndParams:
    """Weibull shape ``beta`` and per-course difficulty ``D_j`` (pseudo-time units)."""

    beta: float
    difficulties: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise DomainError(f"beta must be positive and finite, got {self.beta!r}")
        for course, d in self.difficulties.items():
            if not (np.isfinite(d) and d > 0):
                raise DomainError(f"difficulty of {course!r} must be positive and finite, got {d!r}")


@dataclass(frozen=True)
class CourseEngagement:
    """Per-course engagement ``E_C`` derived from difficulties and singleton rates."""

    engagements: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for course, e in self.engagements.items():
            if not np.isfinite(e):
                raise DomainError(f"engagement of {course!r} must be finite, got {e!r}")


@dataclass(frozen=True)
class LogisticParams:
    """Burst-size coefficient ``gamma`` and per-course log-odds offsets ``D_C``."""

    gamma: float
    difficulties: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.gamma):
            raise DomainError(f"gamma must be finite, got {self.gamma!r}")
        for course, d in self.difficulties.items():
            if not np.isfinite(d):
                raise DomainError(f"difficulty of {course!r} must be finite, got {d!r}")


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def _positive(name, x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError(f"{name} must be positive and finite")
    return x


def _finite(name, x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} must be finite")
    return x


def _open_unit(name, x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x <= 0) or np.any(x >= 1):
        raise DomainError(f"{name} must lie strictly inside (0, 1)")
    return x


def _counts(name, n):
    n = np.asarray(n)
    if not np.all(np.isfinite(n)) or np.any(n < 1) or np.any(n != np.floor(n)):
        raise DomainError(f"{name} must be a positive integer")
    return n.astype(float)


def weibull_log_survival(d, e, beta):
    """Return ``-(d / e) ** beta``, the log of the Weibull survivor function."""
    d, e, beta = _positive("d", d), _positive("e", e), _positive("beta", beta)
    return _out(-np.exp(beta * (np.log(d) - np.log(e))))


def weibull_survival(d, e, beta):
    """Probability that a Weibull(shape ``beta``, scale ``e``) withdrawal time exceeds ``d``.

    >>> round(weibull_survival(2.0, 1.0, 1.0), 6)
    0.135335
    """
    return _out(np.exp(weibull_log_survival(d, e, beta)))


def weibull_hazard(t, e, beta):
    """Instantaneous withdrawal rate ``(beta / e**beta) * t**(beta - 1)``."""
    t, e, beta = _positive("t", t), _positive("e", e), _positive("beta", beta)
    return _out(beta / e * np.exp((beta - 1.0) * (np.log(t) - np.log(e))))


def betaend_log_probability(d, e_u, beta, n):
    """Log certificate probability ``-(d / e_u) ** beta - ln n``."""
    n = _counts("n", n)
    return _out(np.asarray(weibull_log_survival(d, e_u, beta)) - np.log(n))


def betaend_probability(d, e_u, beta, n):
    """Certificate probability of one registration: survival past ``d`` divided by burst size ``n``.

    Parameters
    ----------
    d : float or array_like
        Course difficulty (pseudo-time).
    e_u : float or array_like
        User engagement, the Weibull scale.
    beta : float or array_like
        Weibull shape.
    n : int or array_like
        Number of courses registered in the same burst.
    """
    return _out(np.exp(betaend_log_probability(d, e_u, beta, n)))


def engagement_from_singleton(d, beta, c_s):
    """Course engagement that makes a singleton registrant certify at rate ``c_s``.

    Inverts the survivor function at ``n = 1``: ``d / (-ln c_s) ** (1 / beta)``.
    Exact 0 or 1 rates are rejected; smooth them first.
    """
    d, beta, c_s = _positive("d", d), _positive("beta", beta), _open_unit("c_s", c_s)
    return _out(np.exp(np.log(d) - np.log(-np.log(c_s)) / beta))


def loglog_transform(s):
    """``ln(-ln s)``; affine in ``ln d`` with slope ``beta`` for Weibull survival values."""
    s = _open_unit("s", s)
    return _out(np.log(-np.log(s)))


def logistic_log_odds(d_c, e_u, gamma, n):
    """Log-odds ``d_c - e_u - gamma * n`` of the logistic baseline."""
    d_c, e_u, gamma = _finite("d_c", d_c), _finite("e_u", e_u), _finite("gamma", gamma)
    n = _counts("n", n)
    return _out(d_c - e_u - gamma * n)


def logistic_probability(d_c, e_u, gamma, n):
    """Certificate probability under the logistic baseline."""
    return _out(expit(np.asarray(logistic_log_odds(d_c, e_u, gamma, n))))


def logistic_engagement_from_singleton(d_c, gamma, l_s):
    """Course engagement reproducing singleton log-odds ``l_s`` exactly: ``d_c - gamma - l_s``."""
    d_c, gamma, l_s = _finite("d_c", d_c), _finite("gamma", gamma), _finite("l_s", l_s)
    return _out(d_c - gamma - l_s)


def expit(x):
    """Numerically stable logistic sigmoid."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = _open_unit("p", p)
    return _out(np.log(p) - np.log1p(-p))


def log1mexp(log_p):
    """``ln(1 - exp(log_p))`` for ``log_p < 0`` without forming ``1 - p`` near one."""
    log_p = np.asarray(log_p, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(
            log_p > -0.6931471805599453,
            np.log(-np.expm1(log_p)),
            np.log1p(-np.exp(log_p)),
        )
