"""Shared fixtures and the acceptance-criteria summary hook.

Acceptance tests record one line per criterion through the ``criteria``
fixture; the terminal summary prints them all, pass and fail alike, so a
full run always ends with the complete scorecard.
"""

import pytest

_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture()
def criteria():
    def record(name: str, passed: bool, detail: str):
        _CRITERIA[name] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in _CRITERIA.items():
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")


@pytest.fixture(scope="session")
def repro_products():
    """Reproduction product: (config, {seed: checkpoint}, train seconds)."""
    from acceptance_products import load_or_train
    return load_or_train("repro")


@pytest.fixture(scope="session")
def switch_products():
    """Switching product: (config, {seed: checkpoint}, train seconds)."""
    from acceptance_products import load_or_train
    return load_or_train("switch")
