"""Registration bursts: single-linkage clustering of a user's registrations in time."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy import stats

HOUR = 3600
DAY = 24 * HOUR
YEAR = 365 * DAY
THRESHOLD_SI = 6 * HOUR
THRESHOLD_MAIN = 8 * HOUR
DEFAULT_THRESHOLD = THRESHOLD_SI
PRESETS = {"6h": THRESHOLD_SI, "8h": THRESHOLD_MAIN}


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Burst:
    user_id: str
    ordinal: int
    events: tuple
    start_time: int

    @property
    def size(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class GapHistogram:
    edges: np.ndarray
    counts: np.ndarray
    n_gaps: int


@dataclass(frozen=True)
class PowerLawFit:
    """Quadratic-in-log fit ``log10 f = a + b log10 k + c (log10 k)^2``."""

    coef: np.ndarray
    ci: np.ndarray
    rss: float
    n_points: int

    @property
    def a(self):
        return float(self.coef[0])

    @property
    def b(self):
        return float(self.coef[1])

    @property
    def c(self):
        return float(self.coef[2])


def parse_duration(text: str) -> float:
    """``'6h'``, ``'30m'``, ``'2d'`` or plain seconds -> seconds."""
    text = text.strip().lower()
    units = {"s": 1, "m": 60, "h": HOUR, "d": DAY, "w": 7 * DAY}
    if text and text[-1] in units:
        return float(text[:-1]) * units[text[-1]]
    return float(text)


def split_points(timestamps: Sequence[int], threshold: float) -> np.ndarray:
    """Indices where a new burst starts (always includes 0 for non-empty input)."""
    t = np.asarray(timestamps)
    if t.size == 0:
        return np.zeros(0, dtype=int)
    return np.concatenate(([0], np.flatnonzero(np.diff(t) > threshold) + 1))


def cluster_bursts(timestamps: Sequence[int], threshold: float, user_id: str = "", events=None) -> list[Burst]:
    """Split a sorted timestamp sequence into bursts.

    Single linkage on a line is exactly a cut wherever the gap between
    neighbours exceeds ``threshold``; a gap equal to the threshold merges.
    ``events`` (parallel to ``timestamps``) are stored as burst members,
    defaulting to the timestamps themselves.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    t = list(timestamps)
    if any(b < a for a, b in zip(t, t[1:])):
        raise ValueError("timestamps must be sorted ascending")
    members = t if events is None else list(events)
    starts = list(split_points(t, threshold)) + [len(t)]
    return [
        Burst(user_id, k + 1, tuple(members[lo:hi]), int(t[lo]))
        for k, (lo, hi) in enumerate(zip(starts, starts[1:]))
    ]


def assign_bursts(profiles: dict, threshold: float = DEFAULT_THRESHOLD) -> None:
    """Fill ``profile.bursts`` for every profile in place."""
    for prof in profiles.values():
        prof.bursts = cluster_bursts([e.timestamp for e in prof.events], threshold, prof.user_id, prof.events)


def _gaps(profiles) -> np.ndarray:
    gaps = [np.diff([e.timestamp for e in p.events]) for p in profiles.values() if len(p.events) > 1]
    return np.concatenate(gaps) if gaps else np.zeros(0)


def gap_histogram(profiles: dict, n_bins: int = 50, lo: float = 60, hi: float = YEAR) -> GapHistogram:
    """Histogram of consecutive same-user registration gaps on log-spaced bins.

    Gaps outside ``[lo, hi]`` are clipped into the end bins so that the total
    equals the number of gaps.
    """
    edges = np.geomspace(lo, hi, n_bins + 1)
    gaps = _gaps(profiles)
    clipped = np.clip(gaps, lo, hi)
    counts, _ = np.histogram(clipped, bins=edges)
    return GapHistogram(edges, counts, int(gaps.size))


def histogram_minimum(hist: GapHistogram, min_separation: int = 3) -> float:
    """Geometric centre of the emptiest bin between the two tallest separated modes.

    Diagnostic only; burst clustering always uses an explicit threshold.
    """
    c = hist.counts.astype(float)
    first = int(np.argmax(c))
    far = np.abs(np.arange(c.size) - first) >= min_separation
    if not far.any():
        raise InsufficientDataError("histogram too narrow to hold two modes")
    second = int(np.flatnonzero(far)[np.argmax(c[far])])
    lo, hi = sorted((first, second))
    k = lo + int(np.argmin(c[lo:hi + 1]))
    if not c[k] < min(c[lo], c[hi]):
        raise InsufficientDataError("histogram is not bimodal")
    return float(np.sqrt(hist.edges[k] * hist.edges[k + 1]))


def total_bursts(profiles: dict, threshold: float) -> int:
    n = 0
    for p in profiles.values():
        if p.events:
            n += int(split_points([e.timestamp for e in p.events], threshold).size)
    return n


def threshold_sweep(profiles: dict, thresholds: Iterable[float]) -> list[tuple[float, int]]:
    """Total burst count at each threshold."""
    times = [np.array([e.timestamp for e in p.events]) for p in profiles.values() if p.events]
    gaps = np.concatenate([np.diff(t) for t in times]) if times else np.zeros(0)
    out = []
    for th in thresholds:
        if th <= 0:
            raise ValueError("thresholds must be positive")
        out.append((float(th), len(times) + int(np.count_nonzero(gaps > th))))
    return out


def burst_metrics(profiles: dict) -> tuple[dict[int, int], dict[int, int]]:
    """Frequency tables of burst number per user and of burst size per burst."""
    number = Counter(len(p.bursts) for p in profiles.values() if p.bursts)
    size = Counter(b.size for p in profiles.values() for b in p.bursts)
    return dict(sorted(number.items())), dict(sorted(size.items()))


def fit_curved_powerlaw(freq: dict[int, float], weighted: bool = False) -> PowerLawFit:
    """Least-squares fit of ``log10 f(k)`` on ``log10 k`` and its square.

    Empty cells are skipped.  With ``weighted=True`` each cell is weighted by
    its count, the inverse delta-method variance of a log Poisson count.

    Raises
    ------
    InsufficientDataError
        With fewer than three non-empty cells.
    """
    items = [(k, f) for k, f in sorted(freq.items()) if f > 0]
    if len(items) < 3:
        raise InsufficientDataError("need at least 3 non-empty cells for a curved power law")
    k = np.array([i[0] for i in items], dtype=float)
    f = np.array([i[1] for i in items], dtype=float)
    x = np.log10(k)
    X = np.column_stack([np.ones_like(x), x, x * x])
    y = np.log10(f)
    w = f if weighted else np.ones_like(f)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ coef
    rss = float(np.sum(w * resid**2))
    dof = len(items) - 3
    if dof > 0:
        sigma2 = rss / dof
        cov = sigma2 * np.linalg.inv(X.T @ (X * w[:, None]))
        half = stats.t.ppf(0.975, dof) * np.sqrt(np.diag(cov))
    else:
        half = np.zeros(3)
    ci = np.column_stack([coef - half, coef + half])
    return PowerLawFit(coef, ci, rss, len(items))


def write_assignments(profiles: dict, stream: TextIO, delimiter=","):
    writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["user_id", "burst_ordinal", "burst_size", "start_time", "course_id"])
    n = 0
    for user in sorted(profiles):
        for b in profiles[user].bursts:
            for ev in b.events:
                writer.writerow([user, b.ordinal, b.size, b.start_time, ev.course_id])
                n += 1
    return n
