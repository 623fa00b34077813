import os

import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the multi-minute Monte Carlo checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("LEVITRAP_SLOW"):
        return
    skip = pytest.mark.skip(reason="slow; use --runslow or LEVITRAP_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line (``None`` marks a flagged row); the lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(name, passed, detail):
        tag = "FLAG" if passed is None else "PASS" if passed else "FAIL"
        line = f"{tag}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
