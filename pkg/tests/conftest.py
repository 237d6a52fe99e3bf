"""Shared fixtures and the acceptance-criterion summary hook."""

import numpy as np
import pytest

ACCEPTANCE_RESULTS = []


def record_criterion(name, passed, detail=""):
    """Collect one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {name}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
