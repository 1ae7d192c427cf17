import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pmco.checkpoint import Coordinator  # noqa: E402

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def coordinator():
    with Coordinator(timeout=60.0) as coord:
        yield coord


@pytest.fixture
def verdict(request):
    """Call with a criterion label; one PASS/FAIL line is printed when the test ends."""
    label = []
    yield label.append
    if not label:
        return
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    line = f"{status} {label[0]}"
    _VERDICTS.append(line)
    print(f"\n{line}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
