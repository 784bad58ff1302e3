import io

import pytest
from hypothesis import HealthCheck, settings

from betaend import bursts, ingest

settings.register_profile("default", deadline=None, max_examples=100)
settings.register_profile("quick", deadline=None, max_examples=20)
settings.register_profile(
    "thorough", deadline=None, max_examples=1000, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def events_csv(rows, header="user_id,course_id,timestamp,certified,age"):
    return io.StringIO("\n".join([header, *rows]) + "\n")


def profiles_from(events, threshold=bursts.DEFAULT_THRESHOLD):
    profiles = ingest.group_by_user(events)
    bursts.assign_bursts(profiles, threshold)
    return profiles


@pytest.fixture
def ev():
    """Shorthand event constructor."""

    def make(user, course, t, certified=False, age=None):
        return ingest.RegistrationEvent(user, course, t, certified, age)

    return make


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
