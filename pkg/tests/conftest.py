import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------------ acceptance verdicts

_VERDICTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    name = mark.args[0]
    entry = _VERDICTS.setdefault(name, {"ok": True, "notes": []})
    entry["ok"] &= rep.passed
    note = getattr(item, "criterion_note", None)
    if note:
        entry["notes"].append(note)
    elif rep.failed:
        entry["notes"].append(f"{item.name} failed")


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the test's criterion verdict."""

    def set_note(text):
        request.node.criterion_note = text

    return set_note


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS, key=lambda n: int(n[1:])):
        v = _VERDICTS[name]
        terminalreporter.write_line(f"{'PASS' if v['ok'] else 'FAIL'} {name}: {'; '.join(v['notes'])}")
