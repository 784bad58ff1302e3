"""Parsing, validation and normalization of registration event logs."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, TextIO

log = logging.getLogger(__name__)

AGE_RANGE = (10, 100)
JEFFREYS = 0.5


class SchemaError(ValueError):
    """A mandatory column is missing from the event table header."""


@dataclass(frozen=True, slots=True)
class RegistrationEvent:
    user_id: str
    course_id: str
    timestamp: int
    certified: bool
    age: int | None = None


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str


@dataclass(frozen=True)
class Schema:
    """Column names and delimiter of an event table.

    ``study_window`` is an inclusive ``(start, end)`` pair of epoch seconds;
    events outside it are rejected.
    """

    user_id: str = "user_id"
    course_id: str = "course_id"
    timestamp: str = "timestamp"
    certified: str = "certified"
    age: str = "age"
    delimiter: str = ","
    study_window: tuple[int, int] | None = None


@dataclass
class CourseRecord:
    course_id: str
    offers_certificates: bool
    n_singleton: int
    n_singleton_certified: int
    c_singleton_raw: float
    c_singleton_smoothed: float
    l_singleton: float
    fallback: bool = False


@dataclass
class UserProfile:
    user_id: str
    registered: tuple[str, ...]
    events: list[RegistrationEvent]
    bursts: list = field(default_factory=list)
    age: int | None = None
    e_u: float | None = None


_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _parse_bool(text):
    v = text.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"unrecognized certified flag {text!r}")


def _parse_epoch(text):
    return int(text.strip())


def _parse_iso(text):
    dt = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _detect_timestamp_parser(value):
    try:
        int(value.strip())
        return _parse_epoch
    except ValueError:
        return _parse_iso


def parse_events(stream: TextIO, schema: Schema | None = None):
    """Read a delimited event table.

    Returns ``(events, rejections)``.  The timestamp format (integer epoch
    seconds or ISO-8601) is decided once, from the first data row; rows that
    do not match it are rejected like any other malformed row.  Line numbers
    count the header as line 1.

    Raises
    ------
    SchemaError
        If the header lacks one of ``user_id``, ``course_id``, ``timestamp``
        or ``certified``.
    """
    schema = schema or Schema()
    reader = csv.reader(stream, delimiter=schema.delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("event table is empty; a header row is required") from None
    index = {name: i for i, name in enumerate(header)}
    mandatory = [schema.user_id, schema.course_id, schema.timestamp, schema.certified]
    missing = [c for c in mandatory if c not in index]
    if missing:
        raise SchemaError(f"missing mandatory column(s): {', '.join(missing)}")
    i_user, i_course = index[schema.user_id], index[schema.course_id]
    i_time, i_cert = index[schema.timestamp], index[schema.certified]
    i_age = index.get(schema.age)

    events: list[RegistrationEvent] = []
    rejections: list[Rejection] = []
    parse_time = None
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            rejections.append(Rejection(line, f"expected {len(header)} fields, got {len(row)}"))
            continue
        user, course = row[i_user].strip(), row[i_course].strip()
        if not user or not course:
            rejections.append(Rejection(line, "empty user_id or course_id"))
            continue
        if parse_time is None:
            parse_time = _detect_timestamp_parser(row[i_time])
        try:
            ts = parse_time(row[i_time])
        except ValueError:
            rejections.append(Rejection(line, f"bad timestamp {row[i_time]!r}"))
            continue
        if schema.study_window and not schema.study_window[0] <= ts <= schema.study_window[1]:
            rejections.append(Rejection(line, f"timestamp {ts} outside study window"))
            continue
        try:
            certified = _parse_bool(row[i_cert])
        except ValueError as exc:
            rejections.append(Rejection(line, str(exc)))
            continue
        age = None
        if i_age is not None and row[i_age].strip():
            try:
                age = int(float(row[i_age]))
            except ValueError:
                rejections.append(Rejection(line, f"bad age {row[i_age]!r}"))
                continue
            if not AGE_RANGE[0] <= age <= AGE_RANGE[1]:
                rejections.append(Rejection(line, f"age {age} outside {AGE_RANGE}"))
                continue
        events.append(RegistrationEvent(user, course, ts, certified, age))
    return events, rejections


def write_rejections(rejections: Iterable[Rejection], stream: TextIO, delimiter=","):
    writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["line", "reason"])
    for r in rejections:
        writer.writerow([r.line, r.reason])


def write_events(events: Iterable[RegistrationEvent], stream: TextIO, delimiter=","):
    writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["user_id", "course_id", "timestamp", "certified", "age"])
    for e in events:
        writer.writerow([e.user_id, e.course_id, e.timestamp, int(e.certified), "" if e.age is None else e.age])


def deduplicate(events: list[RegistrationEvent]) -> list[RegistrationEvent]:
    """Keep one event per (user, course): the earliest, certified if any duplicate was."""
    first: dict[tuple[str, str], int] = {}
    merged: list[RegistrationEvent] = []
    for ev in events:
        key = (ev.user_id, ev.course_id)
        pos = first.get(key)
        if pos is None:
            first[key] = len(merged)
            merged.append(ev)
            continue
        kept = merged[pos]
        winner = ev if ev.timestamp < kept.timestamp else kept
        merged[pos] = RegistrationEvent(
            winner.user_id,
            winner.course_id,
            winner.timestamp,
            kept.certified or ev.certified,
            winner.age if winner.age is not None else (kept.age if winner is ev else ev.age),
        )
    return merged


def certificate_courses(events: Iterable[RegistrationEvent]) -> set[str]:
    """Courses with at least one certified registration in the log."""
    return {e.course_id for e in events if e.certified}


def smoothed_rate(certified: int, n: int, prior: float = JEFFREYS) -> float:
    return (certified + prior) / (n + 2 * prior)


def _majority_age(events):
    ages = Counter(e.age for e in events if e.age is not None)
    if not ages:
        return None
    top = max(ages.values())
    return min(a for a, c in ages.items() if c == top)


def group_by_user(events: Iterable[RegistrationEvent]) -> dict[str, UserProfile]:
    """Per-user profiles with events in (timestamp, input) order; bursts are left empty."""
    per_user: dict[str, list[RegistrationEvent]] = defaultdict(list)
    for ev in events:
        per_user[ev.user_id].append(ev)
    profiles = {}
    for user, evs in per_user.items():
        evs.sort(key=lambda e: e.timestamp)  # stable: ties keep input order
        registered = tuple(dict.fromkeys(e.course_id for e in evs))
        profiles[user] = UserProfile(user, registered, evs, age=_majority_age(evs))
    return profiles


def course_records(
    profiles: dict[str, UserProfile],
    cert_courses: set[str],
    population: set[str] | None = None,
    prior: float = JEFFREYS,
) -> dict[str, CourseRecord]:
    """Singleton certificate statistics per course over ``population`` (default: every user).

    A singleton is a user whose whole registered set is one course.  Rates are
    smoothed as ``(c + prior) / (n + 2 prior)``; courses with no singleton registrant
    fall back to the pooled smoothed singleton rate and are flagged.
    """
    counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    courses: set[str] = set()
    for user, prof in profiles.items():
        courses.update(prof.registered)
        if population is not None and user not in population:
            continue
        if len(prof.registered) == 1:
            c = counts[prof.registered[0]]
            c[0] += 1
            c[1] += int(any(e.certified for e in prof.events))
    total_n = sum(c[0] for cid, c in counts.items() if cid in cert_courses)
    total_c = sum(c[1] for cid, c in counts.items() if cid in cert_courses)
    pooled = smoothed_rate(total_c, total_n, prior)
    records = {}
    for cid in sorted(courses | set(cert_courses)):
        n, c = counts.get(cid, (0, 0))
        fallback = n == 0
        if fallback and cid in cert_courses:
            log.warning("course %s has no singleton registrants; using pooled singleton rate", cid)
        rate = pooled if fallback else smoothed_rate(c, n, prior)
        records[cid] = CourseRecord(
            course_id=cid,
            offers_certificates=cid in cert_courses,
            n_singleton=n,
            n_singleton_certified=c,
            c_singleton_raw=c / n if n else math.nan,
            c_singleton_smoothed=rate,
            l_singleton=math.log(rate) - math.log1p(-rate),
            fallback=fallback,
        )
    return records


def build_profiles(
    events: list[RegistrationEvent],
    cert_courses: set[str] | None = None,
    population: set[str] | None = None,
    threshold: float | None = None,
):
    """Group deduplicated events into user profiles and per-course singleton records.

    When ``threshold`` (seconds) is given, every profile also gets its bursts.
    ``cert_courses`` defaults to the courses with any certificate in ``events``.
    """
    profiles = group_by_user(events)
    if threshold is not None:
        from .bursts import assign_bursts

        assign_bursts(profiles, threshold)
    if cert_courses is None:
        cert_courses = certificate_courses(events)
    return profiles, course_records(profiles, cert_courses, population)
